"""Test-time training on a single video for blind temporal consistency.

A fresh network learns to map each input frame to its processed frame, one
frame pair per iteration and with no inter-frame term.  Stopping early keeps
the content the frames agree on and leaves the flicker out.  Two heads plus a
per-pixel confidence map (``irt=True``) handle processed videos that jump
between several plausible results.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import losses
from .data import PairedVideo, VideoSequence, resize_paired, split_clips
from .losses import LossConfig, pixel_distance
from .metrics import FlowSource, e_warp, f_data
from .network import (
    ConsistencyNet,
    NetSpec,
    build_net,
    crop,
    frame_to_tensor,
    load_checkpoint,
    pad_reflect,
    save_checkpoint,
    tensor_to_frame,
)

log = logging.getLogger(__name__)

AUTO_STOP_THRESHOLDS = {"perceptual": 1e-8}
DEFAULT_AUTO_STOP_THRESHOLD = 1e-7


class TrainError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1
    epochs: int = 25
    loss: LossConfig = LossConfig()
    irt: bool = False
    delta: float = 0.02
    warmup_iterations: int = 50
    main_mode_frame: int = 0
    confidence_update: str = "iteration"
    coarse_to_fine: bool = False
    coarse_scale: float = 0.5
    coarse_fraction: float = 0.5
    init_checkpoint: Optional[str] = None
    auto_stop: bool = False
    auto_stop_window: int = 5
    auto_stop_threshold: Optional[float] = None
    probe_frames: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size != 1:
            raise TrainError("training uses exactly one frame pair per iteration (batch_size=1)")
        if self.learning_rate <= 0:
            raise TrainError("learning_rate must be positive")
        if self.delta <= 0:
            raise TrainError(f"delta must be positive, got {self.delta}")
        if self.warmup_iterations < 0:
            raise TrainError("warmup_iterations must be non-negative")
        if self.confidence_update not in ("iteration", "epoch"):
            raise TrainError("confidence_update must be 'iteration' or 'epoch'")
        if not 0.0 < self.coarse_scale <= 1.0:
            raise TrainError("coarse_scale must be in (0, 1]")
        if not 0.0 <= self.coarse_fraction <= 1.0:
            raise TrainError("coarse_fraction must be in [0, 1]")
        if self.auto_stop_window < 2:
            raise TrainError("auto_stop_window must be at least 2")
        if self.auto_stop_threshold is not None and self.auto_stop_threshold <= 0:
            raise TrainError("auto_stop_threshold must be positive")

    @property
    def stop_threshold(self) -> float:
        if self.auto_stop_threshold is not None:
            return self.auto_stop_threshold
        return AUTO_STOP_THRESHOLDS.get(self.loss.kind, DEFAULT_AUTO_STOP_THRESHOLD)

    def phases(self) -> list:
        """``(scale, epochs)`` per training phase."""
        if not self.coarse_to_fine or self.coarse_scale == 1.0:
            return [(1.0, self.epochs)]
        coarse = int(round(self.epochs * self.coarse_fraction))
        return [(s, n) for s, n in ((self.coarse_scale, coarse), (1.0, self.epochs - coarse)) if n]


@dataclass
class TrainState:
    net: ConsistencyNet
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    epoch: int = 0
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    stopped_reason: Optional[str] = None

    @property
    def spec(self) -> NetSpec:
        return self.net.spec


def new_state(net: ConsistencyNet, cfg: TrainConfig) -> TrainState:
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    return TrainState(net, opt, cfg)


# -- per-frame tensors -----------------------------------------------------


class PairTensors:
    """Padded input tensors and unpadded target tensors for one resolution."""

    def __init__(self, pv: PairedVideo, multiple: int, dtype=torch.float32):
        self.inputs = []
        self.records = []
        for f in pv.inputs:
            x, rec = pad_reflect(f, multiple)
            self.inputs.append(frame_to_tensor(x, dtype))
            self.records.append(rec)
        self.targets = {t: frame_to_tensor(pv.processed[t], dtype) for t in pv.reference_indices}

    def __len__(self):
        return len(self.inputs)


def run_heads(net: ConsistencyNet, x: torch.Tensor, rec) -> list:
    return [crop(o, rec) for o in net(x)]


def confidence_tensor(main, minor, target, delta: float) -> torch.Tensor:
    d_main = (main - target).abs().mean(dim=1, keepdim=True)
    d_minor = (minor - target).abs().mean(dim=1, keepdim=True)
    return (d_main < torch.clamp(d_minor, min=delta)).to(main.dtype)


def compute_confidence(main, minor, target, delta: float = 0.02) -> np.ndarray:
    """Binary map selecting pixels where the main head explains the target.

    A pixel is confident when its distance to the main output is below the
    larger of its distance to the minor output and ``delta``.
    """
    main = np.asarray(main)
    if not (main.shape == np.shape(minor) == np.shape(target)):
        raise TrainError(f"shapes differ: {main.shape}, {np.shape(minor)}, {np.shape(target)}")
    d_main = pixel_distance(main, target)
    d_minor = pixel_distance(minor, target)
    return (d_main < np.maximum(d_minor, delta)).astype(np.float32)


def _check_finite(value: float, state: TrainState) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at iteration {state.iteration}")
    return value


def _step(state: TrainState, loss: torch.Tensor) -> float:
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return _check_finite(float(loss.detach()), state)


def train_step(state: TrainState, x, target, rec, conf=None) -> float:
    """One gradient step on a single frame pair."""
    cfg = state.cfg
    outs = run_heads(state.net, x, rec)
    if cfg.irt:
        main, minor = outs
        if conf is None:
            conf = confidence_tensor(main.detach(), minor.detach(), target, cfg.delta)
        loss = losses.irt_loss(main, minor, target, conf, cfg.loss)
    else:
        loss = losses.data_loss(outs[0], target, cfg.loss)
    return _step(state, loss)


def warmup_main_mode(state: TrainState, pv: PairedVideo, cfg: Optional[TrainConfig] = None,
                     tensors: Optional[PairTensors] = None) -> TrainState:
    """Fit both heads to one chosen frame so the main head starts in that frame's mode."""
    cfg = cfg or state.cfg
    if not cfg.irt:
        raise TrainError("main-mode warm-up only applies to IRT training")
    t = cfg.main_mode_frame
    if not 0 <= t < len(pv):
        raise TrainError(f"main_mode_frame {t} outside [0, {len(pv)})")
    if pv.processed[t] is None:
        raise TrainError(f"main_mode_frame {t} has no processed frame")
    if tensors is None:
        tensors = PairTensors(pv, state.spec.multiple, _dtype(state.net))
    x, rec, target = tensors.inputs[t], tensors.records[t], tensors.targets[t]
    for _ in range(cfg.warmup_iterations):
        main, minor = run_heads(state.net, x, rec)
        loss = losses.data_loss(main, target, cfg.loss) + losses.data_loss(minor, target, cfg.loss)
        _step(state, loss)
    return state


def auto_stop_check(loss_history: Sequence[float], k: int = 5, threshold: float = 1e-8) -> bool:
    """True when the last ``k`` epoch losses, scaled by their maximum, have
    variance below ``threshold``."""
    if threshold <= 0:
        raise TrainError("threshold must be positive")
    if k < 2:
        raise TrainError("window k must be at least 2")
    values = np.asarray(loss_history, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError("loss history contains non-finite values")
    if len(values) < k:
        return False
    window = values[-k:]
    peak = window.max()
    if peak <= 0:
        return True
    return bool(np.var(window / peak) < threshold)


def auto_stop_epoch(loss_history: Sequence[float], k: int = 5, threshold: float = 1e-8):
    """First 1-based epoch at which :func:`auto_stop_check` fires, else ``None``."""
    for n in range(k, len(loss_history) + 1):
        if auto_stop_check(loss_history[:n], k, threshold):
            return n
    return None


def probe_indices(n: int, count: int) -> list:
    if count <= 0:
        return []
    if count >= n:
        return list(range(n))
    return sorted({int(round(i)) for i in np.linspace(0, n - 1, count)})


def _dtype(net) -> torch.dtype:
    return next(net.parameters()).dtype


def _check_spec(pv: PairedVideo, spec: NetSpec, cfg: TrainConfig) -> None:
    c_in = pv.inputs.shape[2]
    c_out = pv.processed[pv.reference_indices[0]].shape[2]
    if spec.in_channels != c_in:
        raise TrainError(f"network takes {spec.in_channels} input channels, video has {c_in}")
    if spec.out_channels_per_head != c_out:
        raise TrainError(f"network emits {spec.out_channels_per_head} channels per head, "
                         f"targets have {c_out}")
    if cfg.irt and spec.heads != 2:
        raise TrainError("IRT training needs a two-head network")
    if not cfg.irt and spec.heads != 1:
        raise TrainError("a two-head network needs irt=True")


def init_net(spec: NetSpec, cfg: TrainConfig) -> ConsistencyNet:
    if cfg.init_checkpoint:
        return load_checkpoint(cfg.init_checkpoint, expect_spec=spec)
    return build_net(spec, cfg.seed)


def train_dvp(pv: PairedVideo, spec: NetSpec, cfg: TrainConfig,
              callbacks: Sequence[Callable] = ()) -> TrainState:
    """Train on every (input, processed) pair of ``pv`` and return the final state.

    Each callback is called as ``cb(epoch, mean_loss, snapshot)`` after every
    epoch, where ``snapshot`` maps probe frame indices to main-head outputs
    (empty when ``cfg.probe_frames == 0``).
    """
    if not pv.is_full:
        missing = len(pv) - len(pv.reference_indices)
        raise TrainError(f"{missing} processed frames are missing; use the propagation trainer")
    _check_spec(pv, spec, cfg)
    cfg = replace(cfg, loss=losses.resolve(cfg.loss))
    state = new_state(init_net(spec, cfg), cfg)
    rng = np.random.default_rng(cfg.seed)
    probes = probe_indices(len(pv), cfg.probe_frames) if callbacks else []
    full = PairTensors(pv, spec.multiple, _dtype(state.net))
    warmed = False
    for scale, n_epochs in cfg.phases():
        tensors = full if scale == 1.0 else PairTensors(resize_paired(pv, scale), spec.multiple,
                                                        _dtype(state.net))
        if cfg.irt and not warmed:
            warmup_main_mode(state, pv, cfg, tensors)
            warmed = True
        for _ in range(n_epochs):
            mean_loss = run_epoch(state, tensors, rng)
            snapshot = {}
            if probes:
                snapshot = {t: infer_frame(state.net, full, t)[0] for t in probes}
            for cb in callbacks:
                cb(state.epoch, mean_loss, snapshot)
            if cfg.auto_stop and auto_stop_check(state.loss_history, cfg.auto_stop_window,
                                                 cfg.stop_threshold):
                state.stopped_reason = "auto_stop"
                log.info("auto-stop after epoch %d", state.epoch)
                return state
    state.stopped_reason = "epochs_exhausted"
    return state


def run_epoch(state: TrainState, tensors: PairTensors, rng: np.random.Generator) -> float:
    cfg = state.cfg
    order = rng.permutation(len(tensors))
    confs = {}
    if cfg.irt and cfg.confidence_update == "epoch":
        with torch.no_grad():
            for t in order:
                main, minor = run_heads(state.net, tensors.inputs[t], tensors.records[t])
                confs[t] = confidence_tensor(main, minor, tensors.targets[t], cfg.delta)
    total = 0.0
    for t in order:
        total += train_step(state, tensors.inputs[t], tensors.targets[t], tensors.records[t],
                            confs.get(t))
    state.epoch += 1
    mean_loss = total / len(order)
    state.loss_history.append(mean_loss)
    log.debug("epoch %d loss %.6f", state.epoch, mean_loss)
    return mean_loss


def infer_frame(net: ConsistencyNet, tensors: PairTensors, t: int) -> list:
    with torch.no_grad():
        outs = run_heads(net, tensors.inputs[t], tensors.records[t])
    return [np.clip(tensor_to_frame(o), 0.0, 1.0) for o in outs]


def infer_video(state, inputs: VideoSequence):
    """Per-frame inference; returns ``(main, minor)`` with ``minor=None`` for one head."""
    net = state.net if isinstance(state, TrainState) else state
    spec = net.spec
    if inputs.shape[2] != spec.in_channels:
        raise TrainError(f"network takes {spec.in_channels} channels, frames have {inputs.shape[2]}")
    net.eval()
    dtype = _dtype(net)
    heads = [[] for _ in range(spec.heads)]
    with torch.no_grad():
        for f in inputs:
            x, rec = pad_reflect(f, spec.multiple)
            for k, o in enumerate(run_heads(net, frame_to_tensor(x, dtype), rec)):
                heads[k].append(np.clip(tensor_to_frame(o), 0.0, 1.0))
    seqs = [VideoSequence(tuple(h), inputs.frame_rate) for h in heads]
    return seqs[0], (seqs[1] if len(seqs) > 1 else None)


# -- per-epoch logging -----------------------------------------------------


class SubsetFlow(FlowSource):
    """Re-indexes a flow source onto a subsequence of frames."""

    def __init__(self, source: FlowSource, indices: Sequence[int]):
        self.source = source
        self.indices = list(indices)

    def flow_between(self, frame_a, frame_b, pair=None):
        mapped = None if pair is None else (self.indices[pair[0]], self.indices[pair[1]])
        return self.source.flow_between(frame_a, frame_b, mapped)


class EpochLog:
    """Callback collecting per-epoch loss and probe-frame metrics."""

    def __init__(self, pv: PairedVideo, flows: Optional[FlowSource] = None):
        self.pv = pv
        self.flows = flows
        self.rows = []

    def __call__(self, epoch: int, mean_loss: float, snapshot: dict) -> None:
        row = {"epoch": epoch, "mean_loss": mean_loss, "e_warp": None, "f_data": None}
        idx = sorted(snapshot)
        if len(idx) >= 2:
            outs = [snapshot[t] for t in idx]
            processed = [self.pv.processed[t] for t in idx]
            row["f_data"] = f_data(processed, outs)
            if self.flows is not None:
                inputs = [self.pv.inputs[t] for t in idx]
                row["e_warp"] = e_warp(outs, inputs, SubsetFlow(self.flows, idx)).value
        self.rows.append(row)

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "e_warp", "f_data"])
            for r in self.rows:
                writer.writerow([r["epoch"], repr(r["mean_loss"]),
                                 "" if r["e_warp"] is None else repr(r["e_warp"]),
                                 "" if r["f_data"] is None else repr(r["f_data"])])


# -- long videos -------------------------------------------------------------


@dataclass
class ClipResult:
    main: list
    minor: Optional[list]
    loss_history: list
    stopped_reason: str
    state: Optional[TrainState] = None


def _train_clip(args) -> ClipResult:
    clip, spec, cfg, keep_state, checkpoint = args
    state = train_dvp(clip, spec, cfg)
    if checkpoint is not None:
        save_checkpoint(state.net, checkpoint)
    main, minor = infer_video(state, clip.inputs)
    return ClipResult(list(main.frames), None if minor is None else list(minor.frames),
                      list(state.loss_history), state.stopped_reason,
                      state if keep_state else None)


def stabilize(pv: PairedVideo, spec: NetSpec, cfg: TrainConfig, window: Optional[int] = None,
              jobs: int = 1, checkpoint_dir=None):
    """Train one network per clip of at most ``window`` frames and stitch the outputs.

    With ``checkpoint_dir`` each clip's final network is saved there as
    ``clip_NNN.ckpt``.  Returns ``(main, minor, clip_results)``.
    """
    clips = [pv] if window is None or window >= len(pv) else split_clips(pv, window)
    keep = jobs <= 1
    ckpts = [None] * len(clips)
    if checkpoint_dir is not None:
        ckpts = [Path(checkpoint_dir) / f"clip_{i:03d}.ckpt" for i in range(len(clips))]
    work = [(c, spec, cfg, keep, k) for c, k in zip(clips, ckpts)]
    if jobs > 1 and len(clips) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_clip, work))
    else:
        results = [_train_clip(w) for w in work]
    main = VideoSequence(tuple(f for r in results for f in r.main), pv.inputs.frame_rate)
    minor = None
    if results[0].minor is not None:
        minor = VideoSequence(tuple(f for r in results for f in r.minor), pv.inputs.frame_rate)
    return main, minor, results
