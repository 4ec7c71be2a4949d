"""Data terms for training: L1, L2, perceptual and cross-entropy, optionally
restricted to a binary per-pixel weight map."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)

KINDS = ("l1", "l2", "perceptual", "cross_entropy")

# torchvision vgg19().features indices of the ReLU after each named conv
VGG19_LAYERS = {
    "relu1_1": 1, "relu1_2": 3,
    "relu2_1": 6, "relu2_2": 8,
    "relu3_1": 11, "relu3_2": 13, "relu3_3": 15, "relu3_4": 17,
    "relu4_1": 20, "relu4_2": 22,
}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CE_EPS = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "l1"
    perceptual_layers: tuple = field(default=())
    perceptual_weight: float = 0.0
    feature_weights: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LossError(f"unknown loss kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "perceptual":
            if not self.perceptual_layers or self.perceptual_weight <= 0:
                raise LossError("perceptual loss needs perceptual_layers and a positive weight")
            unknown = set(self.perceptual_layers) - set(VGG19_LAYERS)
            if unknown:
                raise LossError(f"unknown feature layers {sorted(unknown)}")
        elif self.perceptual_layers or self.perceptual_weight:
            raise LossError(f"perceptual fields are only valid with kind='perceptual', not {self.kind!r}")

    @classmethod
    def perceptual(cls, feature_weights, layers=("relu1_2", "relu2_2", "relu3_2"), weight=1.0):
        return cls("perceptual", tuple(layers), float(weight), str(feature_weights))


class FeatureExtractor(nn.Module):
    """Frozen VGG-19 trunk returning activations at the requested layers."""

    def __init__(self, state_dict: dict, layers: tuple):
        super().__init__()
        from torchvision.models.vgg import cfgs, make_layers

        # the conv trunk alone; the classifier of a full vgg19() is ~100M unused weights
        last = max(VGG19_LAYERS[name] for name in layers)
        trunk = make_layers(cfgs["E"])[: last + 1]
        own = {k[len("features."):]: v for k, v in state_dict.items() if k.startswith("features.")}
        if not own:
            own = state_dict
        own = {k: v for k, v in own.items() if int(k.split(".")[0]) <= last}
        trunk.load_state_dict(own)
        for p in trunk.parameters():
            p.requires_grad_(False)
        self.trunk = trunk.eval()
        self.taps = sorted(VGG19_LAYERS[name] for name in layers)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        elif x.shape[1] != 3:
            raise LossError(f"perceptual loss needs 1 or 3 channels, got {x.shape[1]}")
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.trunk):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
            if i >= self.taps[-1]:
                break
        return feats


@lru_cache(maxsize=4)
def _load_extractor(path: str, layers: tuple) -> FeatureExtractor:
    state = torch.load(path, map_location="cpu", weights_only=True)
    return FeatureExtractor(state, layers)


def resolve(cfg: LossConfig) -> LossConfig:
    """Fall back to plain L1 when perceptual weights are not on disk."""
    if cfg.kind == "perceptual" and not (cfg.feature_weights and Path(cfg.feature_weights).is_file()):
        log.warning("feature-extractor weights %r not found; using l1 loss instead",
                    cfg.feature_weights)
        return LossConfig("l1")
    return cfg


def _as_tensor(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim == 3:  # (H, W, C) frame -> (1, C, H, W)
        arr = np.transpose(arr, (2, 0, 1))[None]
    t = torch.from_numpy(np.ascontiguousarray(arr))
    return t.to(like.dtype) if like is not None else t.to(torch.float64)


def _check_weight(weight: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    if weight.dim() != 4 or weight.shape[1] != 1 or weight.shape[2:] != pred.shape[2:]:
        raise LossError(f"weight map shape {tuple(weight.shape)} does not match {tuple(pred.shape)}")
    if not torch.all((weight == 0) | (weight == 1)):
        raise LossError("weight map must be binary")
    return weight.to(pred.dtype)


def _masked_mean(per_pixel: torch.Tensor, weight: Optional[torch.Tensor]) -> torch.Tensor:
    if weight is None:
        return per_pixel.mean()
    total = weight.sum()
    if total == 0:
        return (per_pixel * weight).sum()
    return (per_pixel * weight).sum() / total


def data_loss(pred, target, cfg: LossConfig = LossConfig(), weight=None) -> torch.Tensor:
    """Mean per-pixel distance between ``pred`` and ``target``.

    With a binary ``weight`` map the mean runs over the selected pixels only.
    Inputs are NCHW tensors or ``(H, W, C)`` arrays; the result is a scalar
    tensor that carries gradients back to ``pred``.
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise LossError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if weight is not None:
        weight = _check_weight(_as_tensor(weight, pred), pred)
    kind = cfg.kind
    if kind == "cross_entropy":
        per_pixel = -(target * torch.log(pred.clamp_min(CE_EPS))).sum(dim=1, keepdim=True)
        return _masked_mean(per_pixel, weight)
    diff = pred - target
    if kind == "l2":
        return _masked_mean((diff * diff).mean(dim=1, keepdim=True), weight)
    pixel = _masked_mean(diff.abs().mean(dim=1, keepdim=True), weight)
    if kind == "l1":
        return pixel
    extractor = _load_extractor(cfg.feature_weights, tuple(cfg.perceptual_layers)).to(pred.dtype)
    if weight is not None:
        pred, target = pred * weight, target * weight
    fp = extractor(pred)
    with torch.no_grad():
        ft = extractor(target)
    feat = sum((a - b).abs().mean() for a, b in zip(fp, ft)) / len(fp)
    return pixel + cfg.perceptual_weight * feat


def pixel_distance(a, b) -> np.ndarray:
    """Channel-mean absolute difference, shape ``(H, W, 1)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LossError(f"frames {a.shape} and {b.shape} differ")
    return np.abs(a - b).mean(axis=2, keepdims=True)


def irt_loss(main, minor, target, conf, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Main head fits the confident pixels, minor head fits the rest."""
    main = _as_tensor(main)
    conf = _as_tensor(conf, main)
    return data_loss(main, target, cfg, conf) + data_loss(minor, target, cfg, 1.0 - conf)

