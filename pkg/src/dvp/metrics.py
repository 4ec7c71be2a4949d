"""Temporal-consistency and fidelity metrics.

Flow convention: a flow ``F`` from frame ``a`` to frame ``b`` stores, for each
pixel ``(x, y)`` of ``a``, the displacement ``(dx, dy)`` such that
``b(x + dx, y + dy)`` corresponds to ``a(x, y)``.  ``backward_warp(b, F)`` thus
aligns ``b`` with ``a``.

Flow file layout (little-endian)::

    magic   4 bytes  b"DVPF"
    H       uint32
    W       uint32
    data    H*W*2 float32, row-major, (dx, dy) per pixel

A flow manifest is a CSV file with header ``t,s,path`` mapping the 0-based
frame pair ``(t, s)`` to the file holding the flow from frame ``t`` to ``s``;
relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .data import LUMA

FLOW_MAGIC = b"DVPF"
OCC_ALPHA1 = 0.01
OCC_ALPHA2 = 0.5
PSNR_CAP = 100.0


class MetricError(ValueError):
    pass


class NoValidPixelsError(MetricError):
    pass


class FlowSourceError(MetricError):
    pass


# -- warping ---------------------------------------------------------------


def backward_warp(src, flow) -> np.ndarray:
    """Bilinearly sample ``src`` at ``(x + dx, y + dy)``; coordinates clamp to
    the border."""
    src = np.asarray(src, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if src.ndim != 3 or flow.ndim != 3 or flow.shape[2] != 2 or src.shape[:2] != flow.shape[:2]:
        raise MetricError(f"cannot warp {src.shape} with flow {flow.shape}")
    h, w = src.shape[:2]
    xs = np.clip(np.arange(w)[None, :] + flow[..., 0], 0, w - 1)
    ys = np.clip(np.arange(h)[:, None] + flow[..., 1], 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0)[..., None]
    wy = (ys - y0)[..., None]
    top = src[y0, x0] * (1 - wx) + src[y0, x1] * wx
    bottom = src[y1, x0] * (1 - wx) + src[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def occlusion_mask(f_fwd, f_bwd, alpha1: float = OCC_ALPHA1, alpha2: float = OCC_ALPHA2) -> np.ndarray:
    """Forward-backward consistency check; 1 marks a reliable pixel."""
    f_fwd = np.asarray(f_fwd, dtype=np.float64)
    f_bwd = np.asarray(f_bwd, dtype=np.float64)
    if f_fwd.shape != f_bwd.shape:
        raise MetricError(f"flow shapes differ: {f_fwd.shape} vs {f_bwd.shape}")
    back = backward_warp(f_bwd, f_fwd)
    residual = ((f_fwd + back) ** 2).sum(axis=2)
    bound = alpha1 * ((f_fwd ** 2).sum(axis=2) + (back ** 2).sum(axis=2)) + alpha2
    return (residual <= bound).astype(np.float64)[..., None]


def e_pair(o_t, o_s, flow_t_to_s, mask, reduce: str = "sum") -> float:
    """Masked mean L1 distance between ``o_t`` and ``o_s`` warped onto it.

    ``reduce`` picks how channels combine inside the L1 norm (``sum`` or
    ``mean``).
    """
    o_t = np.asarray(o_t, dtype=np.float64)
    o_s = np.asarray(o_s, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if o_t.shape != o_s.shape:
        raise MetricError(f"frame shapes differ: {o_t.shape} vs {o_s.shape}")
    if mask.shape != o_t.shape[:2] + (1,):
        raise MetricError(f"mask shape {mask.shape} does not match frames {o_t.shape}")
    total = mask.sum()
    if total <= 0:
        raise NoValidPixelsError("no valid pixels: occlusion mask is all zero")
    diff = np.abs(o_t - backward_warp(o_s, flow_t_to_s))
    per_pixel = diff.sum(axis=2) if reduce == "sum" else diff.mean(axis=2)
    return float((mask[..., 0] * per_pixel).sum() / total)


# -- flow sources ----------------------------------------------------------


class FlowSource:
    """Supplies the flow between two frames of the sequence being evaluated.

    ``pair`` carries the frame indices ``(t, s)`` for sources that need them.
    """

    def flow_between(self, frame_a, frame_b, pair: Optional[tuple] = None) -> np.ndarray:
        raise NotImplementedError


class ZeroFlow(FlowSource):
    def flow_between(self, frame_a, frame_b, pair=None):
        return np.zeros(np.shape(frame_a)[:2] + (2,))


class TranslationFlow(FlowSource):
    """Exact flow for content moving by ``velocity = (vx, vy)`` pixels per frame."""

    def __init__(self, velocity):
        self.velocity = np.asarray(velocity, dtype=np.float64)

    def flow_between(self, frame_a, frame_b, pair=None):
        if pair is None:
            raise FlowSourceError("translation flow needs frame indices")
        t, s = pair
        flow = np.empty(np.shape(frame_a)[:2] + (2,))
        flow[...] = (s - t) * self.velocity
        return flow


class FileFlow(FlowSource):
    """Precomputed flows listed in a manifest CSV."""

    def __init__(self, manifest):
        self.manifest = Path(manifest)
        if not self.manifest.is_file():
            raise FlowSourceError(f"flow manifest {manifest} not found")
        self.paths = {}
        with open(self.manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                path = Path(row["path"])
                if not path.is_absolute():
                    path = self.manifest.parent / path
                self.paths[(int(row["t"]), int(row["s"]))] = path

    def flow_between(self, frame_a, frame_b, pair=None):
        if pair not in self.paths:
            raise FlowSourceError(f"manifest {self.manifest} has no flow for pair {pair}")
        flow = read_flow(self.paths[pair])
        if flow.shape[:2] != np.shape(frame_a)[:2]:
            raise FlowSourceError(f"flow {self.paths[pair]} is {flow.shape[:2]}, frames are "
                                  f"{np.shape(frame_a)[:2]}")
        return flow


class FarnebackFlow(FlowSource):
    """Dense flow from OpenCV's Farneback estimator, computed on luminance."""

    def __init__(self, **params):
        self.params = dict(pyr_scale=0.5, levels=3, winsize=15, iterations=3,
                           poly_n=5, poly_sigma=1.2, flags=0)
        self.params.update(params)

    @staticmethod
    def _gray(f):
        f = np.asarray(f, dtype=np.float64)
        g = f @ LUMA if f.shape[2] == 3 else f[..., 0]
        return np.clip(np.rint(g * 255), 0, 255).astype(np.uint8)

    def flow_between(self, frame_a, frame_b, pair=None):
        import cv2

        flow = cv2.calcOpticalFlowFarneback(self._gray(frame_a), self._gray(frame_b), None,
                                            **self.params)
        return flow.astype(np.float64)


def write_flow(path, flow) -> None:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise MetricError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise FlowSourceError(f"{path} is not a flow file")
    h, w = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + h * w * 8:
        raise FlowSourceError(f"{path}: expected {h}x{w} flow, file size is {len(data)} bytes")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)


def write_flow_manifest(path, entries) -> None:
    """``entries`` is an iterable of ``(t, s, flow_path)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "s", "path"])
        for t, s, p in entries:
            writer.writerow([t, s, str(p)])


def precompute_flows(inputs: Sequence, source: FlowSource, directory) -> Path:
    """Write every flow :func:`e_warp` needs plus a manifest; returns the manifest path."""
    directory = Path(directory)
    entries = []
    for t, s in sorted(required_pairs(len(inputs))):
        name = f"flow_{t:05d}_{s:05d}.flo"
        write_flow(directory / name, source.flow_between(inputs[t], inputs[s], (t, s)))
        entries.append((t, s, name))
    manifest = directory / "manifest.csv"
    write_flow_manifest(manifest, entries)
    return manifest


def required_pairs(n: int) -> set:
    pairs = set()
    for t in range(1, n):
        for s in {0, t - 1}:
            pairs.add((t, s))
            pairs.add((s, t))
    return pairs


# -- sequence metrics ------------------------------------------------------


class WarpError(NamedTuple):
    value: float
    short_term: list  # E_pair(O_t, O_{t-1}), t = 2..T
    long_term: list   # E_pair(O_t, O_1), t = 2..T


def pair_mask(inputs, t: int, s: int, flows: FlowSource, alpha1=OCC_ALPHA1, alpha2=OCC_ALPHA2):
    fwd = flows.flow_between(inputs[t], inputs[s], (t, s))
    bwd = flows.flow_between(inputs[s], inputs[t], (s, t))
    return fwd, occlusion_mask(fwd, bwd, alpha1, alpha2)


def e_warp(outputs, inputs, flows: FlowSource, reduce: str = "sum",
           alpha1: float = OCC_ALPHA1, alpha2: float = OCC_ALPHA2) -> WarpError:
    """Short-term plus long-term warping error averaged over frames 2..T.

    Flows and occlusion masks come from ``inputs``; the errors are measured
    on ``outputs``.
    """
    n = len(outputs)
    if n < 2:
        raise MetricError("warping error needs at least two frames")
    if len(inputs) != n:
        raise MetricError(f"{n} output frames but {len(inputs)} input frames")
    cache = {}

    def term(t, s):
        if (t, s) not in cache:
            try:
                fwd, mask = pair_mask(inputs, t, s, flows, alpha1, alpha2)
            except FlowSourceError:
                raise
            except Exception as exc:
                raise FlowSourceError(f"flow source failed on pair {(t, s)}: {exc}") from exc
            cache[(t, s)] = e_pair(outputs[t], outputs[s], fwd, mask, reduce)
        return cache[(t, s)]

    short = [term(t, t - 1) for t in range(1, n)]
    long_ = [term(t, 0) for t in range(1, n)]
    value = sum(a + b for a, b in zip(short, long_)) / (n - 1)
    return WarpError(float(value), short, long_)


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"frame shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr_series(processed, outputs) -> list:
    if len(processed) != len(outputs):
        raise MetricError(f"{len(processed)} processed frames but {len(outputs)} outputs")
    return [psnr(p, o) for p, o in zip(processed, outputs)]


def f_data(processed, outputs) -> float:
    """Mean PSNR over frames 2..T (the first frame is left out)."""
    if len(processed) < 2:
        raise MetricError("data fidelity needs at least two frames")
    series = psnr_series(processed, outputs)
    return float(np.mean(series[1:]))


def mean_intensity_trace(v) -> list:
    return [float(np.mean(np.asarray(f, dtype=np.float64))) for f in v]


# -- reports ---------------------------------------------------------------


@dataclass
class MetricReport:
    e_warp: float
    f_data: Optional[float]
    short_term: list = field(default_factory=list)
    long_term: list = field(default_factory=list)
    mean_intensity: list = field(default_factory=list)
    psnr: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"e_warp": self.e_warp, "f_data": self.f_data, "frames": len(self.mean_intensity)}

    def write(self, directory, stem: str = "metrics") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(json.dumps(asdict(self), indent=2) + "\n")
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "e_pair_prev", "e_pair_first", "mean_intensity", "psnr"])
            for t, mi in enumerate(self.mean_intensity):
                row = [t,
                       _fmt(self.short_term[t - 1]) if t else "",
                       _fmt(self.long_term[t - 1]) if t else "",
                       _fmt(mi),
                       _fmt(self.psnr[t]) if self.psnr else ""]
                writer.writerow(row)


def _fmt(x: float) -> str:
    return repr(float(x))


def evaluate(outputs, inputs, flows: FlowSource, processed=None, reduce: str = "sum",
             alpha1: float = OCC_ALPHA1, alpha2: float = OCC_ALPHA2) -> MetricReport:
    warp = e_warp(outputs, inputs, flows, reduce, alpha1, alpha2)
    fid = series = None
    if processed is not None:
        series = psnr_series(processed, outputs)
        fid = float(np.mean(series[1:]))
    return MetricReport(warp.value, fid, warp.short_term, warp.long_term,
                        mean_intensity_trace(outputs), series or [])


def plot_mean_intensity(traces: dict, path) -> None:
    """One line per labelled sequence, frame index on the x axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    for label, series in traces.items():
        ax.plot(range(1, len(series) + 1), series, label=label)
    ax.set_xlabel("frame")
    ax.set_ylabel("mean intensity")
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
