"""Propagate edits from a few reference frames to a whole video.

The network sees only reference pairs (or its own earlier predictions, with
progressive pseudo labels) and is then run on every frame.  Colorization,
style transfer and segmentation share the same loop; segmentation swaps in a
softmax head and cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import losses
from .data import DataError, PairedVideo, VideoSequence, check_label_map
from .losses import LossConfig
from .network import NetSpec, crop, frame_to_tensor, pad_reflect
from .trainer import TrainConfig, TrainError, TrainState, _step, infer_video, init_net, new_state

log = logging.getLogger(__name__)

AUGMENTATIONS = ("crop", "flip", "rotate", "copy_paste")
TASKS = ("color", "style", "segmentation")
SAMPLING = ("uniform", "recency")


class PropagationError(TrainError):
    pass


@dataclass(frozen=True)
class PropagationConfig:
    K: int = 100
    augmentation: tuple = ("crop", "flip", "rotate")
    crop_size: Optional[tuple] = None
    task: str = "color"
    iterations: int = 1000
    learning_rate: float = 1e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    sampling: str = "uniform"
    reinfer: bool = False
    init_checkpoint: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "augmentation", tuple(self.augmentation))
        if self.K < 1:
            raise PropagationError(f"K must be at least 1, got {self.K}")
        if self.iterations < 1:
            raise PropagationError(f"iterations must be at least 1, got {self.iterations}")
        if self.task not in TASKS:
            raise PropagationError(f"unknown task {self.task!r}; choose from {TASKS}")
        unknown = set(self.augmentation) - set(AUGMENTATIONS)
        if unknown:
            raise PropagationError(f"unknown augmentations {sorted(unknown)}")
        if "copy_paste" in self.augmentation and self.task != "segmentation":
            raise PropagationError("copy_paste augmentation is only valid for segmentation")
        if self.crop_size is not None:
            crop_size = tuple(int(v) for v in self.crop_size)
            if len(crop_size) != 2 or min(crop_size) < 1:
                raise PropagationError(f"crop_size must be two positive ints, got {self.crop_size}")
            object.__setattr__(self, "crop_size", crop_size)
        if self.sampling not in SAMPLING:
            raise PropagationError(f"unknown sampling {self.sampling!r}; choose from {SAMPLING}")
        if self.learning_rate <= 0:
            raise PropagationError("learning_rate must be positive")

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, loss=losses.resolve(self.loss),
                           seed=self.seed, init_checkpoint=self.init_checkpoint)


@dataclass
class QueueEntry:
    input: np.ndarray
    target: np.ndarray
    is_pseudo: bool
    index: int


class MemoryQueue:
    """Training pairs gathered so far; starts from one true reference."""

    def __init__(self, input_frame, target, index: int = 0):
        self.entries = [QueueEntry(input_frame, target, False, index)]
        self.steps = []  # training iterations run before each push

    def push(self, input_frame, target, index: int) -> None:
        self.entries.append(QueueEntry(input_frame, target, True, index))

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> QueueEntry:
        return self.entries[i]

    @property
    def pseudo_flags(self) -> list:
        return [e.is_pseudo for e in self.entries]

    def sample(self, rng: np.random.Generator, mode: str = "uniform") -> QueueEntry:
        n = len(self.entries)
        if mode == "recency":
            w = np.arange(1, n + 1, dtype=np.float64)
            return self.entries[int(rng.choice(n, p=w / w.sum()))]
        return self.entries[int(rng.integers(n))]


# -- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    top: int = 0
    left: int = 0
    height: Optional[int] = None
    width: Optional[int] = None
    flip: bool = False
    rot90: int = 0


def sample_transform(shape, cfg: PropagationConfig, rng: np.random.Generator) -> Transform:
    h, w = shape[:2]
    top = left = 0
    ch, cw = h, w
    if "crop" in cfg.augmentation and cfg.crop_size is not None:
        ch, cw = cfg.crop_size
        if ch > h or cw > w:
            raise PropagationError(f"crop {ch}x{cw} is larger than the {h}x{w} frame")
        top = int(rng.integers(h - ch + 1))
        left = int(rng.integers(w - cw + 1))
    flip = "flip" in cfg.augmentation and bool(rng.integers(2))
    k = int(rng.integers(4)) if "rotate" in cfg.augmentation else 0
    return Transform(top, left, ch, cw, flip, k)


def apply_transform(f: np.ndarray, tr: Transform) -> np.ndarray:
    h = f.shape[0] if tr.height is None else tr.height
    w = f.shape[1] if tr.width is None else tr.width
    out = f[tr.top:tr.top + h, tr.left:tr.left + w]
    if tr.flip:
        out = out[:, ::-1]
    if tr.rot90:
        out = np.rot90(out, tr.rot90, axes=(0, 1))
    return np.ascontiguousarray(out)


def foreground(label_map: np.ndarray) -> np.ndarray:
    """Pixels whose most likely class is not background (class 0)."""
    return np.argmax(label_map, axis=2) != 0


def copy_paste(input_frame, label_map, rng: np.random.Generator):
    """Paste the foreground's bounding box, foreground pixels only, at a
    uniformly random location in both the frame and its label map."""
    fg = foreground(label_map)
    if not fg.any():
        return input_frame, label_map
    ys, xs = np.nonzero(fg)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    bh, bw = y1 - y0, x1 - x0
    h, w = fg.shape
    ty = int(rng.integers(h - bh + 1))
    tx = int(rng.integers(w - bw + 1))
    sel = fg[y0:y1, x0:x1]
    img = np.array(input_frame, copy=True)
    lab = np.array(label_map, copy=True)
    img[ty:ty + bh, tx:tx + bw][sel] = input_frame[y0:y1, x0:x1][sel]
    lab[ty:ty + bh, tx:tx + bw][sel] = label_map[y0:y1, x0:x1][sel]
    return img, lab


def augment(input_frame, target, cfg: PropagationConfig, rng: np.random.Generator):
    """Apply one random spatial transform identically to input and target."""
    input_frame = np.asarray(input_frame)
    target = np.asarray(target)
    if "copy_paste" in cfg.augmentation:
        if cfg.task != "segmentation":
            raise PropagationError("copy_paste augmentation is only valid for segmentation")
        input_frame, target = copy_paste(input_frame, target, rng)
    tr = sample_transform(input_frame.shape, cfg, rng)
    return apply_transform(input_frame, tr), apply_transform(target, tr)


# -- training --------------------------------------------------------------


def _fit_pair(state: TrainState, x: np.ndarray, y: np.ndarray) -> float:
    """One gradient step on a single (possibly augmented) pair."""
    spec = state.spec
    xp, rec = pad_reflect(x, spec.multiple)
    dtype = next(state.net.parameters()).dtype
    out = crop(state.net(frame_to_tensor(xp, dtype))[0], rec)
    loss = losses.data_loss(out, frame_to_tensor(y, dtype), state.cfg.loss)
    return _step(state, loss)


def _check(pv: PairedVideo, spec: NetSpec, cfg: PropagationConfig) -> None:
    if spec.heads != 1:
        raise PropagationError("propagation trains a single-head network")
    ref = pv.processed[pv.reference_indices[0]]
    if spec.in_channels != pv.inputs.shape[2]:
        raise PropagationError(f"network takes {spec.in_channels} channels, "
                               f"inputs have {pv.inputs.shape[2]}")
    if spec.out_channels_per_head != ref.shape[2]:
        raise PropagationError(f"network emits {spec.out_channels_per_head} channels, "
                               f"references have {ref.shape[2]}")
    if cfg.crop_size is not None and "crop" in cfg.augmentation:
        h, w = pv.inputs.shape[:2]
        if cfg.crop_size[0] > h or cfg.crop_size[1] > w:
            raise PropagationError(f"crop {cfg.crop_size} is larger than the {h}x{w} frames")


def train_reference_only(pv: PairedVideo, spec: NetSpec, cfg: PropagationConfig,
                         iterations: Optional[int] = None) -> TrainState:
    """Fit the network to the reference pairs only, one augmented pair per step.

    ``loss_history`` of the returned state holds one loss per step.
    """
    if not pv.reference_indices:
        raise PropagationError("no reference frames")
    _check(pv, spec, cfg)
    state = new_state(init_net(spec, cfg.train_config()), cfg.train_config())
    rng = np.random.default_rng(cfg.seed)
    refs = pv.reference_indices
    state.net.train()
    for _ in range(cfg.iterations if iterations is None else iterations):
        t = refs[int(rng.integers(len(refs)))]
        x, y = augment(pv.inputs[t], pv.processed[t], cfg, rng)
        state.loss_history.append(_fit_pair(state, x, y))
    return state


def propagate_reference_only(pv: PairedVideo, spec: NetSpec, cfg: PropagationConfig,
                             iterations: Optional[int] = None) -> VideoSequence:
    """Train on the references, then run the network on every frame."""
    state = train_reference_only(pv, spec, cfg, iterations)
    return infer_video(state, pv.inputs)[0]


class Propagation(NamedTuple):
    outputs: VideoSequence
    queue: MemoryQueue
    state: TrainState


def _predict(state: TrainState, f: np.ndarray) -> np.ndarray:
    return infer_video(state, VideoSequence((f,)))[0][0]


def propagate_pppl(pv: PairedVideo, spec: NetSpec, cfg: PropagationConfig) -> Propagation:
    """Progressive propagation with pseudo labels.

    For each next frame the network trains ``K`` steps on pairs drawn from
    the queue, predicts the next frame, and that prediction joins the queue
    as its training target.
    """
    if pv.reference_indices != (0,):
        raise PropagationError(
            f"progressive propagation takes exactly one reference at frame 0, got "
            f"{list(pv.reference_indices)}; use train_reference_only for several references")
    if len(pv) < 2:
        raise PropagationError("progressive propagation needs at least two frames")
    _check(pv, spec, cfg)
    tcfg = cfg.train_config()
    state = new_state(init_net(spec, tcfg), tcfg)
    rng = np.random.default_rng(cfg.seed)
    queue = MemoryQueue(pv.inputs[0], pv.processed[0], 0)
    outputs = [None] * len(pv)
    for nxt in range(1, len(pv)):
        state.net.train()
        for _ in range(cfg.K):
            entry = queue.sample(rng, cfg.sampling)
            x, y = augment(entry.input, entry.target, cfg, rng)
            state.loss_history.append(_fit_pair(state, x, y))
        queue.steps.append(cfg.K)
        label = _predict(state, pv.inputs[nxt])
        outputs[nxt] = label
        queue.push(pv.inputs[nxt], label, nxt)
        log.debug("pushed pseudo label for frame %d (queue %d)", nxt, len(queue))
    if cfg.reinfer:
        return Propagation(infer_video(state, pv.inputs)[0], queue, state)
    outputs[0] = _predict(state, pv.inputs[0])
    return Propagation(VideoSequence(tuple(outputs), pv.inputs.frame_rate), queue, state)


# -- segmentation ------------------------------------------------------------


def masks_from_labels(label_maps) -> list:
    return [np.argmax(np.asarray(m), axis=2).astype(np.int64) for m in label_maps]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Foreground intersection-over-union; two empty masks count as a perfect match."""
    a = np.asarray(a) != 0
    b = np.asarray(b) != 0
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def propagate_segmentation(pv: PairedVideo, spec: NetSpec, cfg: PropagationConfig,
                           pppl: bool = True):
    """Propagate label maps; returns ``(label_maps, masks)`` with integer class masks."""
    if cfg.task != "segmentation":
        raise PropagationError(f"segmentation propagation needs task='segmentation', got {cfg.task!r}")
    if spec.final_activation != "softmax":
        raise PropagationError("segmentation needs a softmax head")
    for t in pv.reference_indices:
        try:
            check_label_map(pv.processed[t], name=f"reference label map {t}")
        except DataError as exc:
            raise PropagationError(str(exc)) from exc
    if cfg.loss.kind != "cross_entropy":
        cfg = replace(cfg, loss=LossConfig("cross_entropy"))
    if pppl:
        labels = propagate_pppl(pv, spec, cfg).outputs
    else:
        iterations = cfg.K * (len(pv) - 1)
        labels = propagate_reference_only(pv, spec, cfg, iterations)
    return list(labels.frames), masks_from_labels(labels)
