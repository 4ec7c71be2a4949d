"""Two-dimensional toy for watching consistency emerge before overfitting.

Eight nearby inputs stand in for consecutive frames.  Their targets are
noisy copies of one point (unimodal) or alternate between two points
(bimodal).  A small MLP is trained one sample per step, with or without the
dual-head confidence routing, and its outputs are recorded at a few
iterations.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .losses import LossConfig
from .trainer import confidence_tensor

CSV_HEADER = ["iteration", "frame_index", "head", "out_x", "out_y", "target_x", "target_y"]


class ToyError(ValueError):
    pass


@dataclass(frozen=True)
class ToyConfig:
    n_frames: int = 8
    input_dim: int = 2
    out_dim: int = 2
    noise_scale: float = 0.1
    bimodal: bool = False
    cluster_separation: float = 2.0
    iterations: int = 1000
    snapshot_iters: tuple = (100, 200, 1000)
    seed: int = 0
    input_spread: float = 0.1
    hidden: int = 64
    learning_rate: float = 1e-3
    delta: float = 0.02
    warmup_iterations: int = 50
    main_mode_frame: int = 0

    def __post_init__(self):
        object.__setattr__(self, "snapshot_iters", tuple(int(i) for i in self.snapshot_iters))
        if self.n_frames < 2:
            raise ToyError("n_frames must be at least 2")
        if self.input_dim < 1 or self.out_dim < 1 or self.hidden < 1:
            raise ToyError("dimensions must be positive")
        if self.noise_scale < 0 or self.cluster_separation < 0 or self.input_spread <= 0:
            raise ToyError("noise_scale and cluster_separation must be >= 0, input_spread > 0")
        if self.iterations < 1:
            raise ToyError("iterations must be positive")
        snaps = self.snapshot_iters
        if list(snaps) != sorted(snaps) or len(set(snaps)) != len(snaps):
            raise ToyError(f"snapshot_iters must be strictly increasing, got {snaps}")
        if snaps and (snaps[0] < 1 or snaps[-1] > self.iterations):
            raise ToyError(f"snapshot_iters must lie in [1, {self.iterations}]")
        if not 0 <= self.main_mode_frame < self.n_frames:
            raise ToyError("main_mode_frame outside the frames")


class ToyData(NamedTuple):
    inputs: np.ndarray   # (n, input_dim)
    targets: np.ndarray  # (n, out_dim)
    centers: np.ndarray  # (1 or 2, out_dim)
    cluster: np.ndarray  # (n,) index into centers


def make_toy_data(cfg: ToyConfig) -> ToyData:
    rng = np.random.default_rng(cfg.seed)
    inputs = rng.uniform(-cfg.input_spread, cfg.input_spread, (cfg.n_frames, cfg.input_dim))
    base = np.zeros(cfg.out_dim)
    base[-1] = 1.0
    if cfg.bimodal:
        offset = np.zeros(cfg.out_dim)
        offset[0] = cfg.cluster_separation / 2
        centers = np.stack([base - offset, base + offset])
        # alternate modes frame to frame, like a colorization flipping between two results
        cluster = np.arange(cfg.n_frames) % 2
    else:
        centers = base[None]
        cluster = np.zeros(cfg.n_frames, dtype=np.int64)
    noise = rng.standard_normal((cfg.n_frames, cfg.out_dim))
    targets = centers[cluster] + cfg.noise_scale * noise
    return ToyData(inputs, targets, centers, cluster)


class ToyNet(nn.Module):
    """MLP with two hidden layers; ``heads`` output blocks of ``out_dim``."""

    def __init__(self, input_dim, out_dim, hidden, heads, seed):
        super().__init__()
        self.out_dim = out_dim
        self.heads = heads
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.body = nn.Sequential(
                nn.Linear(input_dim, hidden), nn.ReLU(),
                nn.Linear(hidden, hidden), nn.ReLU(),
                nn.Linear(hidden, out_dim * heads),
            )

    def forward(self, x):
        # reshape to (N, C, 1, 1) so the image losses apply unchanged
        y = self.body(x).view(x.shape[0], self.heads * self.out_dim, 1, 1)
        return [y[:, k * self.out_dim:(k + 1) * self.out_dim] for k in range(self.heads)]


class Snapshot(NamedTuple):
    iteration: int
    main: np.ndarray
    minor: Optional[np.ndarray]


class ToyRun(NamedTuple):
    cfg: ToyConfig
    irt: bool
    data: ToyData
    snapshots: list
    loss_history: list

    def at(self, iteration: int) -> Snapshot:
        for s in self.snapshots:
            if s.iteration == iteration:
                return s
        raise KeyError(iteration)


def _outputs(net, x):
    with torch.no_grad():
        return [o.view(o.shape[0], -1).numpy().copy() for o in net(x)]


def run_toy(cfg: ToyConfig, irt: bool = False) -> ToyRun:
    """Train one sample per step and record outputs at ``cfg.snapshot_iters``.

    Iteration counts include the warm-up steps of an IRT run.
    """
    data = make_toy_data(cfg)
    x = torch.tensor(data.inputs, dtype=torch.float64)
    y = torch.tensor(data.targets, dtype=torch.float64).view(cfg.n_frames, cfg.out_dim, 1, 1)
    net = ToyNet(cfg.input_dim, cfg.out_dim, cfg.hidden, 2 if irt else 1, cfg.seed).double()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    loss_cfg = LossConfig("l1")
    snapshots, history = [], []
    snaps = set(cfg.snapshot_iters)
    order = []
    for it in range(1, cfg.iterations + 1):
        if irt and it <= cfg.warmup_iterations:
            t = cfg.main_mode_frame
        else:
            if not order:
                order = list(rng.permutation(cfg.n_frames))
            t = int(order.pop())
        outs = net(x[t:t + 1])
        target = y[t:t + 1]
        if not irt:
            loss = losses.data_loss(outs[0], target, loss_cfg)
        elif it <= cfg.warmup_iterations:
            loss = losses.data_loss(outs[0], target, loss_cfg) + losses.data_loss(outs[1], target, loss_cfg)
        else:
            conf = confidence_tensor(outs[0].detach(), outs[1].detach(), target, cfg.delta)
            loss = losses.irt_loss(outs[0], outs[1], target, conf, loss_cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if it in snaps:
            o = _outputs(net, x)
            snapshots.append(Snapshot(it, o[0], o[1] if irt else None))
    return ToyRun(cfg, irt, data, snapshots, history)


# -- measurements ------------------------------------------------------------


def spread(points) -> float:
    """Mean pairwise Euclidean distance."""
    p = np.asarray(points, dtype=np.float64)
    d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
    n = len(p)
    return float(d.sum() / (n * (n - 1)))


def mean_l1(outputs, targets) -> float:
    return float(np.abs(np.asarray(outputs) - np.asarray(targets)).mean())


def nearest_center(points, centers) -> np.ndarray:
    d = np.sqrt(((np.asarray(points)[:, None] - np.asarray(centers)[None]) ** 2).sum(-1))
    return d.argmin(axis=1)


def center_distances(points, centers) -> np.ndarray:
    """``(n_points, n_centers)`` Euclidean distances."""
    return np.sqrt(((np.asarray(points)[:, None] - np.asarray(centers)[None]) ** 2).sum(-1))


# -- artifacts ---------------------------------------------------------------


def _xy(v) -> list:
    # only the first two dimensions are written; a 1-D toy gets y = 0
    return [repr(float(v[0])), repr(float(v[1])) if len(v) > 1 else "0.0"]


def write_csv(run: ToyRun, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for s in run.snapshots:
            heads = [("main", s.main)] + ([("minor", s.minor)] if s.minor is not None else [])
            for name, out in heads:
                for i in range(run.cfg.n_frames):
                    w.writerow([s.iteration, i, name, *_xy(out[i]), *_xy(run.data.targets[i])])


def plot_snapshot(run: ToyRun, snap: Snapshot, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = 1 if run.cfg.out_dim > 1 else 0
    fig, ax = plt.subplots(figsize=(4, 4))
    t = run.data.targets
    ax.scatter(t[:, 0], t[:, d], marker="x", c="k", label="targets")
    ax.scatter(snap.main[:, 0], snap.main[:, d], c="tab:blue", label="main" if run.irt else "outputs")
    if snap.minor is not None:
        ax.scatter(snap.minor[:, 0], snap.minor[:, d], c="tab:orange", label="minor")
    ax.set_title(f"iteration {snap.iteration}")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)


def write_artifacts(run: ToyRun, out_dir, stem: str = "toy") -> list:
    """CSV with every snapshot plus one scatter PNG per snapshot."""
    out_dir = Path(out_dir)
    paths = [out_dir / f"{stem}.csv"]
    write_csv(run, paths[0])
    for s in run.snapshots:
        p = out_dir / f"{stem}_iter{s.iteration:05d}.png"
        plot_snapshot(run, s, p)
        paths.append(p)
    return paths
