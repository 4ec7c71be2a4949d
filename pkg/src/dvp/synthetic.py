"""Small synthetic videos with known structure, for experiments and tests."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import PairedVideo, VideoSequence, one_hot, to_grayscale


def smooth_texture(h: int, w: int, channels: int = 3, seed: int = 0, sigma: float = 3.0,
                   lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
    """Band-limited random texture rescaled into ``[lo, hi]`` per channel."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h, w, channels))
    tex = np.stack([gaussian_filter(noise[..., c], sigma, mode="wrap") for c in range(channels)], -1)
    tex -= tex.min(axis=(0, 1), keepdims=True)
    tex /= tex.max(axis=(0, 1), keepdims=True) + 1e-12
    return (lo + (hi - lo) * tex).astype(np.float32)


def flicker_video(n_frames: int = 50, size: int = 64, jitter: float = 0.1,
                  input_noise: float = 0.01, seed: int = 0) -> PairedVideo:
    """Static scene whose processed frames get a global brightness offset
    drawn uniformly from ``[-jitter, jitter]`` per frame.

    Inputs carry small independent sensor noise so that frames are
    distinguishable, as in a real static shot.
    """
    rng = np.random.default_rng(seed)
    scene = smooth_texture(size, size, 3, seed=seed + 1)
    inputs, processed = [], []
    for _ in range(n_frames):
        frame = np.clip(scene + input_noise * rng.standard_normal(scene.shape), 0, 1)
        offset = rng.uniform(-jitter, jitter)
        inputs.append(frame.astype(np.float32))
        processed.append(np.clip(frame + offset, 0, 1).astype(np.float32))
    return PairedVideo(VideoSequence(tuple(inputs)), tuple(processed))


def drifting_video(n_frames: int = 30, size: int = 32, speed: float = 1.0, seed: int = 0):
    """Camera panning across a colour canvas.

    Returns ``(gray_inputs, color_frames)``; colour frames double as ground
    truth for propagation.
    """
    span = int(np.ceil(speed * (n_frames - 1))) + size
    canvas = smooth_texture(size, span, 3, seed=seed, sigma=2.0, lo=0.05, hi=0.95)
    color, gray = [], []
    for t in range(n_frames):
        x0 = int(round(speed * t))
        crop = canvas[:, x0:x0 + size]
        color.append(crop)
        gray.append(to_grayscale(crop))
    return VideoSequence(tuple(gray)), VideoSequence(tuple(color))


def moving_square_video(n_frames: int = 20, size: int = 32, side: int = 10,
                        step: int = 1, seed: int = 0, hue_drift: float = 0.0):
    """Textured square sliding diagonally over a green textured background.

    The square starts red; with ``hue_drift`` > 0 its colour moves linearly
    towards blue over the clip (1.0 reaches blue at the last frame), so late
    frames look unlike the first one while neighbours stay similar.

    Returns ``(inputs, label_maps)`` where label maps are one-hot with
    background class 0 and square class 1.
    """
    tex = smooth_texture(size, size, 1, seed=seed, sigma=2.0, lo=0.0, hi=1.0)
    background = np.concatenate([0.15 + 0.2 * tex, 0.45 + 0.3 * tex, 0.15 + 0.2 * tex], axis=2)
    shade = 0.8 + 0.4 * smooth_texture(side, side, 1, seed=seed + 7, sigma=1.0, lo=0.0, hi=1.0)
    red, blue = np.array([0.9, 0.2, 0.2]), np.array([0.25, 0.2, 0.9])
    frames, labels = [], []
    limit = size - side
    for t in range(n_frames):
        a = hue_drift * t / max(n_frames - 1, 1)
        patch = np.clip(((1 - a) * red + a * blue) * shade, 0, 1)
        pos = (2 + step * t) % (limit + 1)
        y0, x0 = pos, (pos + t) % (limit + 1)
        f = background.copy()
        f[y0:y0 + side, x0:x0 + side] = patch
        ids = np.zeros((size, size), dtype=np.int64)
        ids[y0:y0 + side, x0:x0 + side] = 1
        frames.append(f.astype(np.float32))
        labels.append(one_hot(ids, 2))
    return VideoSequence(tuple(frames)), labels


def identity_pair(n_frames: int = 5, size: int = 32, seed: int = 0) -> PairedVideo:
    frames = [smooth_texture(size, size, 3, seed=seed + t) for t in range(n_frames)]
    return PairedVideo(VideoSequence(tuple(frames)), tuple(frames))
