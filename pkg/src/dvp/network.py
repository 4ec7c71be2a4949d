"""Encoder-decoder convolutional networks mapping an input frame to one or two
output frames, plus reflection padding and a small checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic    8 bytes   b"DVPCKPT\\0"
    version  uint32    CHECKPOINT_VERSION
    hlen     uint64    length of the JSON header in bytes
    header   hlen      UTF-8 JSON: {"spec": {...}, "seed": int,
                                     "tensors": [{"name", "shape", "dtype",
                                                  "offset", "nbytes"}, ...]}
    payload  ...       raw little-endian tensor bytes, concatenated
    crc      uint32    CRC-32 of header + payload
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("unet", "resunet", "fcn")
ACTIVATIONS = ("sigmoid", "softmax", "none")
CHECKPOINT_MAGIC = b"DVPCKPT\0"
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.2


class NetError(ValueError):
    pass


class CheckpointError(NetError):
    pass


@dataclass(frozen=True)
class NetSpec:
    in_channels: int = 3
    out_channels_per_head: int = 3
    heads: int = 1
    backbone: str = "unet"
    depth: int = 4
    base_channels: int = 32
    final_activation: str = "sigmoid"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise NetError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.heads not in (1, 2):
            raise NetError(f"heads must be 1 or 2, got {self.heads}")
        if self.final_activation not in ACTIVATIONS:
            raise NetError(f"unknown final activation {self.final_activation!r}")
        for name in ("in_channels", "out_channels_per_head", "base_channels"):
            if getattr(self, name) < 1:
                raise NetError(f"{name} must be positive")
        if self.depth < 0:
            raise NetError("depth must be non-negative")
        if self.final_activation == "softmax" and self.out_channels_per_head < 2:
            raise NetError("softmax heads need at least two classes")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    @property
    def out_channels(self) -> int:
        return self.heads * self.out_channels_per_head

    def to_dict(self) -> dict:
        return asdict(self)


def _lrelu(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


class DoubleConv(nn.Module):
    def __init__(self, cin, cout, residual=False):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if residual and cin != cout else None
        self.residual = residual

    def forward(self, x):
        y = self.conv2(_lrelu(self.conv1(x)))
        if self.residual:
            y = y + (self.skip(x) if self.skip is not None else x)
        return _lrelu(y)


class EncoderDecoder(nn.Module):
    """u-net style network; ``fcn`` drops the concatenated skips in favour of
    additive 1x1 projections."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]
        residual = spec.backbone == "resunet"
        concat = spec.backbone != "fcn"
        self.concat = concat
        self.encoder = nn.ModuleList()
        cin = spec.in_channels
        for w in widths:
            self.encoder.append(DoubleConv(cin, w, residual))
            cin = w
        self.decoder = nn.ModuleList()
        self.lateral = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            if concat:
                self.decoder.append(DoubleConv(widths[i + 1] + widths[i], widths[i], residual))
            else:
                self.lateral.append(nn.Conv2d(widths[i], widths[i + 1], 1))
                self.decoder.append(DoubleConv(widths[i + 1], widths[i], residual))
        self.head = nn.Conv2d(widths[0], spec.out_channels, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.encoder):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for j, block in enumerate(self.decoder):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            s = skips.pop()
            x = block(torch.cat([x, s], 1) if self.concat else x + self.lateral[j](s))
        y = self.head(x)
        return split_heads(y, self.spec)


def split_heads(y, spec: NetSpec) -> list:
    """Split stacked logits into per-head outputs; the first block is the main head."""
    n = spec.out_channels_per_head
    outs = []
    for k in range(spec.heads):
        z = y[:, k * n:(k + 1) * n]
        if spec.final_activation == "sigmoid":
            z = torch.sigmoid(z)
        elif spec.final_activation == "softmax":
            z = torch.softmax(z, dim=1)
        outs.append(z)
    return outs


class ConsistencyNet(EncoderDecoder):
    def __init__(self, spec: NetSpec, seed: int = 0):
        super().__init__(spec)
        self.seed = seed

    def checksum(self) -> str:
        h = zlib.crc32(b"")
        for name, t in self.state_dict().items():
            h = zlib.crc32(name.encode(), h)
            h = zlib.crc32(t.detach().cpu().numpy().tobytes(), h)
        return f"{h:08x}"


def init_weights(net: nn.Module, seed: int) -> None:
    """He-scaled uniform init for the leaky-ReLU stacks, zero biases, seeded.

    The default PyTorch bound of 1/sqrt(fan_in) shrinks activations by about
    2.4x per layer, which leaves a deep u-net barely moving in the few
    thousand steps a single video gets.
    """
    gen = torch.Generator().manual_seed(seed)
    gain = math.sqrt(6.0 / (1.0 + LEAKY_SLOPE ** 2))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = gain / math.sqrt(fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()


def build_net(spec: NetSpec, seed: int = 0, dtype=torch.float32) -> ConsistencyNet:
    if not isinstance(spec, NetSpec):
        raise NetError("build_net needs a NetSpec")
    net = ConsistencyNet(spec, seed)
    init_weights(net, seed)
    return net.to(dtype)


# -- numpy <-> torch -------------------------------------------------------


def frame_to_tensor(f: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    # copy: frames may be read-only views and torch would alias them
    return torch.from_numpy(np.array(np.transpose(f, (2, 0, 1)), copy=True)).to(dtype)[None]


def tensor_to_frame(t: torch.Tensor) -> np.ndarray:
    return t.detach()[0].permute(1, 2, 0).to(torch.float32).cpu().numpy().copy()


# -- padding ---------------------------------------------------------------


@dataclass(frozen=True)
class CropRecord:
    top: int
    left: int
    height: int
    width: int


def pad_reflect(f: np.ndarray, multiple: int):
    """Reflect-pad ``f`` so both spatial dims are multiples of ``multiple``."""
    f = np.asarray(f)
    if f.ndim != 3:
        raise NetError(f"expected (H, W, C) frame, got shape {f.shape}")
    if multiple < 1:
        raise NetError("multiple must be positive")
    h, w = f.shape[:2]
    ph = -h % multiple
    pw = -w % multiple
    top, left = ph // 2, pw // 2
    rec = CropRecord(top, left, h, w)
    if ph == 0 and pw == 0:
        return f, rec
    padded = np.pad(f, ((top, ph - top), (left, pw - left), (0, 0)), mode="reflect")
    return padded, rec


def crop(f, rec: CropRecord):
    """Undo :func:`pad_reflect`; works on ``(H, W, C)`` arrays and NCHW tensors."""
    if isinstance(f, torch.Tensor):
        return f[..., rec.top:rec.top + rec.height, rec.left:rec.left + rec.width]
    return f[rec.top:rec.top + rec.height, rec.left:rec.left + rec.width]


def forward(net: ConsistencyNet, f: np.ndarray, pad: bool = True) -> list:
    """Run the network on one frame and return one frame per head."""
    f = np.asarray(f, dtype=np.float32)
    spec = net.spec
    if f.ndim != 3 or f.shape[2] != spec.in_channels:
        raise NetError(f"network expects {spec.in_channels} input channels, got shape {f.shape}")
    h, w = f.shape[:2]
    if not pad and (h % spec.multiple or w % spec.multiple):
        raise NetError(f"{h}x{w} is not divisible by {spec.multiple} and padding is disabled")
    x, rec = pad_reflect(f, spec.multiple)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        outs = net(frame_to_tensor(x, dtype))
    return [tensor_to_frame(crop(o, rec)) for o in outs]


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(net: ConsistencyNet, path) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, t in net.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"spec": net.spec.to_dict(), "seed": net.seed, "tensors": tensors},
                        sort_keys=True).encode()
    payload = b"".join(blobs)
    crc = zlib.crc32(payload, zlib.crc32(header))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path, expect_spec: NetSpec | None = None) -> ConsistencyNet:
    """Read a checkpoint; ``expect_spec`` guards resumed runs against a
    mismatched architecture."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(CHECKPOINT_MAGIC) + 12
    if len(data) < fixed + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"corrupt checkpoint {path}: bad header")
    version, hlen = struct.unpack_from("<IQ", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    if len(data) < fixed + hlen + 4:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated")
    header = data[fixed:fixed + hlen]
    payload = data[fixed + hlen:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload, zlib.crc32(header)) != crc:
        raise CheckpointError(f"corrupt checkpoint {path}: checksum mismatch")
    meta = json.loads(header)
    spec = NetSpec(**meta["spec"])
    if expect_spec is not None and spec != expect_spec:
        raise CheckpointError(f"checkpoint {path} holds {spec}, run expects {expect_spec}")
    state = {}
    for entry in meta["tensors"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    net = ConsistencyNet(spec, meta["seed"])
    dtype = next(iter(state.values())).dtype
    net = net.to(dtype)
    net.load_state_dict(state)
    return net
