"""Frame and video containers, image-sequence IO, resizing and clip splitting.

Frames are plain ``float32`` arrays of shape ``(H, W, C)`` with values in
``[0, 1]``.  The containers below only add validation and bookkeeping.
"""
from __future__ import annotations

import glob
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

MIN_SIZE = 8
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class DataError(ValueError):
    """Invalid frame data or an unreadable frame directory."""


class MissingDirectoryError(DataError):
    pass


class NoFramesError(DataError):
    pass


class MixedResolutionError(DataError):
    pass


class DecodeError(DataError):
    pass


def as_frame(data, *, name: str = "frame") -> np.ndarray:
    """Validate ``data`` as a frame and return it as float32 ``(H, W, C)``."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise DataError(f"{name}: expected (H, W, C) array, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < MIN_SIZE or w < MIN_SIZE:
        raise DataError(f"{name}: frame {h}x{w} smaller than {MIN_SIZE}x{MIN_SIZE}")
    if c < 1:
        raise DataError(f"{name}: frame has no channels")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(f"{name}: values outside [0, 1]")
    return arr


@dataclass(frozen=True)
class VideoSequence:
    frames: tuple
    frame_rate: Optional[float] = None

    def __post_init__(self):
        frames = tuple(as_frame(f, name=f"frame {i}") for i, f in enumerate(self.frames))
        if not frames:
            raise DataError("a video needs at least one frame")
        shape = frames[0].shape
        for i, f in enumerate(frames):
            if f.shape != shape:
                raise MixedResolutionError(
                    f"frame {i} has shape {f.shape}, expected {shape} (mixed resolutions)"
                )
            f.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def shape(self) -> tuple:
        return self.frames[0].shape

    def stack(self) -> np.ndarray:
        return np.stack(self.frames)


@dataclass(frozen=True)
class PairedVideo:
    """Input frames plus processed frames that exist only at ``reference_indices``.

    A full set of processed frames is the blind-consistency setting; a sparse
    set is the propagation setting.
    """

    inputs: VideoSequence
    processed: tuple
    reference_indices: tuple = field(init=False)

    def __post_init__(self):
        processed = tuple(self.processed)
        if len(processed) != len(self.inputs):
            raise DataError(
                f"{len(processed)} processed entries for {len(self.inputs)} input frames"
            )
        h, w, _ = self.inputs.shape
        out = []
        refs = []
        for t, p in enumerate(processed):
            if p is None:
                out.append(None)
                continue
            p = as_frame(p, name=f"processed frame {t}")
            if p.shape[:2] != (h, w):
                raise DataError(
                    f"processed frame {t} is {p.shape[:2]}, input frames are {(h, w)}"
                )
            p.setflags(write=False)
            out.append(p)
            refs.append(t)
        if not refs:
            raise DataError("no reference frames: every processed entry is missing")
        channels = {out[t].shape[2] for t in refs}
        if len(channels) != 1:
            raise DataError(f"processed frames disagree on channel count: {sorted(channels)}")
        object.__setattr__(self, "processed", tuple(out))
        object.__setattr__(self, "reference_indices", tuple(refs))

    @classmethod
    def full(cls, inputs: VideoSequence, processed: Sequence) -> "PairedVideo":
        return cls(inputs, tuple(processed))

    @classmethod
    def sparse(cls, inputs: VideoSequence, references: dict) -> "PairedVideo":
        processed = [references.get(t) for t in range(len(inputs))]
        return cls(inputs, tuple(processed))

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def is_full(self) -> bool:
        return len(self.reference_indices) == len(self.inputs)

    def processed_sequence(self) -> VideoSequence:
        if not self.is_full:
            raise DataError("processed frames are sparse")
        return VideoSequence(self.processed, self.inputs.frame_rate)


def check_label_map(data, *, atol: float = 1e-5, name: str = "label map") -> np.ndarray:
    """Validate a per-pixel class-probability map (channels sum to one)."""
    arr = as_frame(data, name=name)
    sums = arr.astype(np.float64).sum(axis=2)
    if np.max(np.abs(sums - 1.0)) > atol:
        raise DataError(f"{name}: class probabilities do not sum to 1")
    return arr


def one_hot(ids: np.ndarray, num_classes: Optional[int] = None) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 3:
        ids = ids[..., 0]
    ids = ids.astype(np.int64)
    k = int(ids.max()) + 1 if num_classes is None else num_classes
    if ids.min() < 0 or ids.max() >= k:
        raise DataError(f"class ids outside [0, {k})")
    return np.eye(k, dtype=np.float32)[ids]


# -- disk IO ---------------------------------------------------------------


def _decode(path: str) -> np.ndarray:
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DecodeError(f"cannot decode image file {path}")
    if raw.dtype == np.uint8:
        arr = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        arr = raw.astype(np.float32) / 65535.0
    elif raw.dtype in (np.float32, np.float64):
        arr = raw.astype(np.float32)  # float TIFF: taken as-is, range checked by as_frame
    else:
        raise DecodeError(f"unsupported bit depth {raw.dtype} in {path}")
    if arr.ndim == 2:
        return arr[..., None]
    if arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr[..., ::-1].copy()  # BGR -> RGB


def list_frames(directory, pattern: str = "*.png") -> list:
    directory = os.fspath(directory)
    if not os.path.isdir(directory):
        raise MissingDirectoryError(f"frame directory {directory} does not exist")
    paths = sorted(glob.glob(os.path.join(directory, pattern)))
    if not paths:
        raise NoFramesError(f"no frames matched {pattern!r} in {directory}")
    return paths


def load_sequence(directory, pattern: str = "*.png", frame_rate=None) -> VideoSequence:
    """Decode every file matching ``pattern``, in lexicographic order."""
    frames = []
    shape = None
    for path in list_frames(directory, pattern):
        arr = _decode(path)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise MixedResolutionError(
                f"{path} is {arr.shape[1]}x{arr.shape[0]}x{arr.shape[2]}, expected "
                f"{shape[1]}x{shape[0]}x{shape[2]} (mixed resolutions)"
            )
        try:
            frames.append(as_frame(arr, name=path))
        except DataError as exc:
            raise DecodeError(str(exc)) from exc
    return VideoSequence(tuple(frames), frame_rate)


def load_label_sequence(directory, pattern: str = "*.png", num_classes=None) -> list:
    """Read single-channel PNG masks holding integer class ids."""
    masks = []
    for path in list_frames(directory, pattern):
        raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise DecodeError(f"cannot decode mask file {path}")
        if raw.ndim == 3:
            raw = raw[..., 0]
        masks.append(raw.astype(np.int64))
    k = num_classes or int(max(m.max() for m in masks)) + 1
    return [one_hot(m, max(k, 2)) for m in masks]


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def save_frame(frame: np.ndarray, path) -> None:
    img = to_uint8(frame)
    if img.shape[2] == 3:
        img = img[..., ::-1]
    elif img.shape[2] != 1:
        raise DataError(f"cannot write a {img.shape[2]}-channel frame as an image")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(os.fspath(path), img):
        raise DataError(f"failed to write {path}")


def save_sequence(v: VideoSequence, directory, prefix: str = "frame") -> list:
    """Write frames as 8-bit PNGs named ``<prefix>_00000.png`` onward."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(v))))
    paths = []
    for t, f in enumerate(v):
        path = directory / f"{prefix}_{t:0{width}d}.png"
        save_frame(f, path)
        paths.append(path)
    return paths


def save_label_sequence(masks: Sequence[np.ndarray], directory, prefix: str = "mask") -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, m in enumerate(masks):
        m = np.asarray(m)
        if m.ndim == 3:
            m = m[..., 0]
        path = directory / f"{prefix}_{t:05d}.png"
        cv2.imwrite(os.fspath(path), m.astype(np.uint8))
        paths.append(path)
    return paths


# -- transforms ----------------------------------------------------------


def to_grayscale(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f)
    if f.ndim != 3 or f.shape[2] != 3:
        raise DataError(f"grayscale conversion needs 3 channels, got shape {f.shape}")
    gray = f.astype(np.float64) @ LUMA
    return np.clip(gray, 0.0, 1.0).astype(np.float32)[..., None]


def resized_shape(h: int, w: int, scale: float) -> tuple:
    return int(round(scale * h)), int(round(scale * w))


def resize_frame(f: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resample to ``size = (H', W')`` with half-pixel centres."""
    h2, w2 = size
    if (h2, w2) == f.shape[:2]:
        return f.copy()
    out = cv2.resize(np.ascontiguousarray(f, dtype=np.float32), (w2, h2),
                     interpolation=cv2.INTER_LINEAR)
    if out.ndim == 2:
        out = out[..., None]
    return np.clip(out, 0.0, 1.0)


def resize_sequence(v: VideoSequence, scale: float) -> VideoSequence:
    if not 0.0 < scale <= 1.0:
        raise DataError(f"scale must be in (0, 1], got {scale}")
    h, w, _ = v.shape
    size = resized_shape(h, w, scale)
    if min(size) < MIN_SIZE:
        raise DataError(f"scale {scale} shrinks {h}x{w} below {MIN_SIZE} pixels")
    if scale == 1.0:
        return v
    return VideoSequence(tuple(resize_frame(f, size) for f in v), v.frame_rate)


def resize_paired(pv: PairedVideo, scale: float) -> PairedVideo:
    inputs = resize_sequence(pv.inputs, scale)
    size = inputs.shape[:2]
    processed = tuple(None if p is None else resize_frame(p, size) for p in pv.processed)
    return PairedVideo(inputs, processed)


def clip_bounds(n: int, window: int) -> list:
    """Half-open ``(start, stop)`` bounds of consecutive clips.

    A trailing remainder shorter than two frames is folded into the clip
    before it.
    """
    if window < 2:
        raise DataError(f"clip window must be at least 2 frames, got {window}")
    bounds = [(s, min(s + window, n)) for s in range(0, n, window)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


def split_clips(v: PairedVideo, window: int) -> list:
    clips = []
    for start, stop in clip_bounds(len(v), window):
        inputs = VideoSequence(v.inputs.frames[start:stop], v.inputs.frame_rate)
        clips.append(PairedVideo(inputs, v.processed[start:stop]))
    return clips
