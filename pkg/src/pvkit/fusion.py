"""Dynamic-weighting fusion of image and depth feature maps.

The fused map is

    fused = F_img + sigmoid(W @ F_img + b) * (gamma * F_depth)

evaluated independently at every spatial location: a 1x1 convolution of the
image features gates, per channel, how much of the (gamma-scaled) depth
features is added. A plain-sum baseline is provided for ablations.

All math is float64; `fuse_backward` returns exact analytic gradients of
sum(upstream * fused) with respect to every input and parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "FeatureMap",
    "FusionParams",
    "FusionGradients",
    "fuse_features",
    "sum_fuse",
    "fuse_backward",
    "multi_scale_fuse",
    "fusion_params_to_json",
    "fusion_params_from_json",
    "save_fusion_params",
    "load_fusion_params",
]


@dataclass
class FeatureMap:
    """One multi-scale feature tensor: float64 values of shape (C, H, W)."""

    values: np.ndarray
    scale_index: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"feature map must be (C, H, W) with positive dims, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map values must be finite")
        self.values = v

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class FusionParams:
    """Gate convolution (weights + bias) and the per-channel depth scale gamma.

    gate_weights has shape (C_depth, C_img): the 1x1 convolution mapping image
    channels to one gate logit per depth channel.
    """

    gate_weights: np.ndarray
    gate_bias: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.gate_weights, dtype=np.float64)
        b = np.asarray(self.gate_bias, dtype=np.float64)
        g = np.asarray(self.gamma, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"gate_weights must be 2-D (C_depth, C_img), got {w.shape}")
        if b.shape != (w.shape[0],) or g.shape != (w.shape[0],):
            raise ValueError(
                f"gate_bias and gamma must have shape ({w.shape[0]},), "
                f"got {b.shape} and {g.shape}")
        for name, a in (("gate_weights", w), ("gate_bias", b), ("gamma", g)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
        self.gate_weights = w
        self.gate_bias = b
        self.gamma = g

    @property
    def depth_channels(self) -> int:
        return self.gate_weights.shape[0]

    @property
    def image_channels(self) -> int:
        return self.gate_weights.shape[1]

    @classmethod
    def initial(cls, image_channels: int, depth_channels: int) -> "FusionParams":
        """Untrained default: zero gate (sigmoid 0.5) and gamma = 1."""
        return cls(np.zeros((depth_channels, image_channels)),
                   np.zeros(depth_channels), np.ones(depth_channels))

    @classmethod
    def random(cls, image_channels: int, depth_channels: int, seed: int) -> "FusionParams":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(image_channels)
        return cls(rng.normal(0.0, scale, (depth_channels, image_channels)),
                   rng.normal(0.0, 0.1, depth_channels),
                   rng.normal(1.0, 0.1, depth_channels))


@dataclass
class FusionGradients:
    """Gradients of sum(upstream * fused) for every fusion input."""

    d_image: np.ndarray
    d_depth: np.ndarray
    d_gate_weights: np.ndarray
    d_gate_bias: np.ndarray
    d_gamma: np.ndarray


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_pair(f_img: FeatureMap, f_depth: FeatureMap, params: FusionParams):
    if (f_img.height, f_img.width) != (f_depth.height, f_depth.width):
        raise ValueError(
            f"spatial dims differ: image {f_img.height}x{f_img.width} vs "
            f"depth {f_depth.height}x{f_depth.width}")
    if params.image_channels != f_img.channels:
        raise ValueError(
            f"gate expects {params.image_channels} image channels, got {f_img.channels}")
    if params.depth_channels != f_depth.channels:
        raise ValueError(
            f"gate expects {params.depth_channels} depth channels, got {f_depth.channels}")


def _gated_depth(f_img: FeatureMap, f_depth: FeatureMap, params: FusionParams):
    """Gate logits, sigmoid gate, and the gated gamma-scaled depth term."""
    logits = (np.einsum("dc,chw->dhw", params.gate_weights, f_img.values)
              + params.gate_bias[:, None, None])
    gate = _sigmoid(logits)
    gated = gate * (params.gamma[:, None, None] * f_depth.values)
    return logits, gate, gated


def fuse_features(f_img: FeatureMap, f_depth: FeatureMap,
                  params: FusionParams) -> FeatureMap:
    """Apply the dynamic-weighting combination at one scale.

    When channel counts differ the residual add is aligned on the first
    min(C_img, C_depth) channels: extra gated depth channels are dropped,
    missing ones contribute nothing.
    """
    _check_pair(f_img, f_depth, params)
    _, _, gated = _gated_depth(f_img, f_depth, params)
    m = min(f_img.channels, f_depth.channels)
    out = f_img.values.copy()
    out[:m] += gated[:m]
    return FeatureMap(out, f_img.scale_index)


def sum_fuse(f_img: FeatureMap, f_depth: FeatureMap) -> FeatureMap:
    """Ablation baseline: plain elementwise sum (shapes must match exactly)."""
    if f_img.values.shape != f_depth.values.shape:
        raise ValueError(
            f"sum baseline needs identical shapes, got {f_img.values.shape} "
            f"vs {f_depth.values.shape}")
    return FeatureMap(f_img.values + f_depth.values, f_img.scale_index)


def fuse_backward(f_img: FeatureMap, f_depth: FeatureMap, params: FusionParams,
                  upstream: np.ndarray) -> FusionGradients:
    """Analytic gradients of sum(upstream * fuse_features(...))."""
    _check_pair(f_img, f_depth, params)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != f_img.values.shape:
        raise ValueError(f"upstream shape {up.shape} != output shape {f_img.values.shape}")
    _, gate, _ = _gated_depth(f_img, f_depth, params)

    # upstream as seen by the gated-depth branch: channels beyond the
    # min(C_img, C_depth) alignment window receive no gradient
    m = min(f_img.channels, f_depth.channels)
    up_d = np.zeros((f_depth.channels,) + up.shape[1:])
    up_d[:m] = up[:m]

    gamma_fd = params.gamma[:, None, None] * f_depth.values
    sgrad = up_d * gamma_fd * gate * (1.0 - gate)   # dL/d(logits)

    d_image = up + np.einsum("dc,dhw->chw", params.gate_weights, sgrad)
    d_depth = up_d * gate * params.gamma[:, None, None]
    d_gate_weights = np.einsum("dhw,chw->dc", sgrad, f_img.values)
    d_gate_bias = sgrad.sum(axis=(1, 2))
    d_gamma = (up_d * gate * f_depth.values).sum(axis=(1, 2))
    return FusionGradients(d_image, d_depth, d_gate_weights, d_gate_bias, d_gamma)


def multi_scale_fuse(features_img: Sequence[FeatureMap],
                     features_depth: Sequence[FeatureMap],
                     params: Sequence[FusionParams]) -> list[FeatureMap]:
    """Fuse each scale independently; lists are aligned by position."""
    if not (len(features_img) == len(features_depth) == len(params)):
        raise ValueError(
            f"scale counts differ: {len(features_img)} image, "
            f"{len(features_depth)} depth, {len(params)} params")
    return [fuse_features(fi, fd, p)
            for fi, fd, p in zip(features_img, features_depth, params)]


def fusion_params_to_json(params: FusionParams) -> str:
    return json.dumps({
        "gate_weights": params.gate_weights.tolist(),
        "gate_bias": params.gate_bias.tolist(),
        "gamma": params.gamma.tolist(),
    }, indent=2)


def fusion_params_from_json(text: str) -> FusionParams:
    doc = json.loads(text)
    try:
        return FusionParams(np.array(doc["gate_weights"], dtype=np.float64),
                            np.array(doc["gate_bias"], dtype=np.float64),
                            np.array(doc["gamma"], dtype=np.float64))
    except KeyError as exc:
        raise ValueError(f"fusion params JSON missing key: {exc}") from None


def save_fusion_params(params: FusionParams, prefix: str) -> None:
    """Write params as three binary tensor files at `prefix`."""
    from .formats import write_tensor   # deferred: formats pulls in PIL
    write_tensor(params.gate_weights, prefix + ".gate_weights.pvt")
    write_tensor(params.gate_bias, prefix + ".gate_bias.pvt")
    write_tensor(params.gamma, prefix + ".gamma.pvt")


def load_fusion_params(prefix: str) -> FusionParams:
    from .formats import read_tensor
    return FusionParams(read_tensor(prefix + ".gate_weights.pvt"),
                        read_tensor(prefix + ".gate_bias.pvt"),
                        read_tensor(prefix + ".gamma.pvt"))
