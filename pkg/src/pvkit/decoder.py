"""Toy transformer decoder with object queries, masked cross-attention,
location-aware centers, and time-aware query propagation.

Forward-only at desk scale: weights are drawn deterministically from a seed
and never trained, except the location head whose L1 loss carries an exact
(sub)gradient. Every operation is a pure function, so decoding the same frame
twice is bitwise identical; time-aware selection makes frame t depend on
frame t-1, which serialises decoding within a sequence.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .formats import read_tensor, write_tensor
from .fusion import FeatureMap

__all__ = [
    "QuerySet",
    "DecoderConfig",
    "LaqConfig",
    "DecoderWeights",
    "masked_cross_attention",
    "run_decoder",
    "taq_select",
    "laq_head",
    "laq_loss",
    "save_query_set",
    "load_query_set",
]


@dataclass
class QuerySet:
    """N object-query embeddings plus whatever heads have produced so far.

    class_logits rows cover K real classes plus a trailing no-object class;
    a slot is "non-empty" when its argmax is not the no-object index.
    """

    embeddings: np.ndarray                      # (N, C_x)
    class_logits: Optional[np.ndarray] = None   # (N, K + 1)
    centers: Optional[np.ndarray] = None        # (N, 2) in [0, 1]^2
    mask_logits: Optional[np.ndarray] = None    # (N, H, W)

    def __post_init__(self):
        e = np.asarray(self.embeddings, dtype=np.float64)
        if e.ndim != 2:
            raise ValueError(f"embeddings must be (N, C_x), got {e.shape}")
        if np.any(np.isnan(e)):
            raise ValueError("embeddings contain NaN")
        self.embeddings = e
        n = e.shape[0]
        for name in ("class_logits", "centers", "mask_logits"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.asarray(a, dtype=np.float64)
            if a.shape[0] != n:
                raise ValueError(f"{name} first dim {a.shape[0]} != query count {n}")
            if np.any(np.isnan(a)):
                raise ValueError(f"{name} contains NaN")
            setattr(self, name, a)

    @property
    def num_queries(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def non_empty_mask(self) -> np.ndarray:
        """Slots whose argmax class is not the trailing no-object class."""
        if self.class_logits is None:
            raise ValueError("non_empty_mask requires class_logits")
        no_object = self.class_logits.shape[1] - 1
        return np.argmax(self.class_logits, axis=1) != no_object

    def class_probs(self) -> np.ndarray:
        if self.class_logits is None:
            raise ValueError("class_probs requires class_logits")
        z = self.class_logits - self.class_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class DecoderConfig:
    """Decoder depth and masking threshold.

    The full-scale reference model stacks 9 layers; 3 is plenty to exercise
    the query mechanics at toy sizes. Setting use_self_attention=False is an
    ablation hook that makes each query's output independent of the others.
    """

    layers: int = 3
    mask_threshold: float = 0.5
    seed: int = 0
    use_self_attention: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")


@dataclass(frozen=True)
class LaqConfig:
    """Location head width and its L1 loss weight (default 5)."""

    hidden_dim: Optional[int] = None
    loss_weight: float = 5.0

    def __post_init__(self):
        if self.loss_weight < 0:
            raise ValueError(f"loss_weight must be >= 0, got {self.loss_weight}")


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int):
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))
    b = np.zeros(fan_out)
    return w, b


@dataclass
class LayerWeights:
    """Single decoder layer: cross-attention, self-attention, feed-forward."""

    cross_q: np.ndarray
    cross_k: np.ndarray
    cross_v: np.ndarray
    self_q: np.ndarray
    self_k: np.ndarray
    self_v: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


@dataclass
class DecoderWeights:
    """All decoder parameters, drawn deterministically from a seed."""

    layers: list[LayerWeights]
    class_w: np.ndarray
    class_b: np.ndarray
    mask_mlp: list[tuple[np.ndarray, np.ndarray]]   # 3 layers, C_x -> C_feat
    laq: list[tuple[np.ndarray, np.ndarray]]        # 3 layers, C_x -> 2
    embed_dim: int
    feature_channels: int
    num_classes: int

    @classmethod
    def create(cls, cfg: DecoderConfig, embed_dim: int, feature_channels: int,
               num_classes: int, laq_hidden: Optional[int] = None) -> "DecoderWeights":
        rng = np.random.default_rng(cfg.seed)
        layers = []
        for _ in range(cfg.layers):
            layers.append(LayerWeights(
                cross_q=_linear_init(rng, embed_dim, embed_dim)[0],
                cross_k=_linear_init(rng, feature_channels, embed_dim)[0],
                cross_v=_linear_init(rng, feature_channels, embed_dim)[0],
                self_q=_linear_init(rng, embed_dim, embed_dim)[0],
                self_k=_linear_init(rng, embed_dim, embed_dim)[0],
                self_v=_linear_init(rng, embed_dim, embed_dim)[0],
                ffn_w1=_linear_init(rng, embed_dim, 2 * embed_dim)[0],
                ffn_b1=np.zeros(2 * embed_dim),
                ffn_w2=_linear_init(rng, 2 * embed_dim, embed_dim)[0],
                ffn_b2=np.zeros(embed_dim),
            ))
        class_w, class_b = _linear_init(rng, embed_dim, num_classes + 1)
        mask_mlp = [_linear_init(rng, embed_dim, embed_dim),
                    _linear_init(rng, embed_dim, embed_dim),
                    _linear_init(rng, embed_dim, feature_channels)]
        h = laq_hidden if laq_hidden is not None else embed_dim
        laq = [_linear_init(rng, embed_dim, h),
               _linear_init(rng, h, h),
               _linear_init(rng, h, 2)]
        return cls(layers, class_w, class_b, mask_mlp, laq,
                   embed_dim, feature_channels, num_classes)

    @classmethod
    def initial_queries(cls, num_queries: int, embed_dim: int, seed: int) -> QuerySet:
        """Learned-equivalent fixed initial queries for frame 0."""
        rng = np.random.default_rng(seed ^ 0x5157)
        return QuerySet(rng.normal(0.0, 1.0, (num_queries, embed_dim)))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _mask_mlp_apply(weights: DecoderWeights, x: np.ndarray) -> np.ndarray:
    h = x
    for i, (w, b) in enumerate(weights.mask_mlp):
        h = h @ w + b
        if i < len(weights.mask_mlp) - 1:
            h = np.maximum(h, 0.0)
    return h


def masked_cross_attention(query_embeddings: np.ndarray, features: FeatureMap,
                           attn_mask: np.ndarray, layer: LayerWeights,
                           return_weights: bool = False):
    """Single-head scaled dot-product attention restricted per query.

    attn_mask is (N, H*W) boolean; query i attends only where its row is
    true. A row with no true entries falls back to dense attention so the
    softmax stays well-defined. Rows of the attention matrix sum to 1.
    """
    x = np.asarray(query_embeddings, dtype=np.float64)
    tokens = features.values.reshape(features.channels, -1).T   # (H*W, C_feat)
    mask = np.asarray(attn_mask, dtype=bool)
    if mask.shape != (x.shape[0], tokens.shape[0]):
        raise ValueError(
            f"attn_mask shape {mask.shape} != (queries, locations) "
            f"({x.shape[0]}, {tokens.shape[0]})")
    q = x @ layer.cross_q
    k = tokens @ layer.cross_k
    v = tokens @ layer.cross_v
    scores = (q @ k.T) / np.sqrt(q.shape[1])
    has_fg = mask.any(axis=1)
    if has_fg.any():
        blocked = ~mask & has_fg[:, None]
        scores = np.where(blocked, -np.inf, scores)
    probs = _softmax_rows(scores)
    out = probs @ v
    if return_weights:
        return out, probs
    return out


def _self_attention(x: np.ndarray, layer: LayerWeights) -> np.ndarray:
    q = x @ layer.self_q
    k = x @ layer.self_k
    v = x @ layer.self_v
    return _softmax_rows((q @ k.T) / np.sqrt(q.shape[1])) @ v


def _scale_order(features: Sequence[FeatureMap]) -> list[int]:
    # coarse first: fewest locations attended earliest, mirroring the
    # usual coarse-to-fine decoder schedule
    return sorted(range(len(features)), key=lambda i: (features[i].height * features[i].width, i))


def run_decoder(x0: QuerySet, features: Sequence[FeatureMap], cfg: DecoderConfig,
                weights: DecoderWeights) -> QuerySet:
    """Run the decoder stack and populate class and mask logits.

    Each layer cross-attends to one feature scale (cycling coarse to fine),
    masked by the sigmoid>threshold foreground of the mask prediction from
    the current embeddings at that scale, then self-attends and applies a
    2-layer feed-forward block, all with residual connections. The final
    mask logits are per-pixel dot products against the largest feature map.
    """
    if len(features) == 0:
        raise ValueError("run_decoder requires at least one feature map")
    channels = {f.channels for f in features}
    if len(channels) != 1:
        raise ValueError(f"all feature maps must share a channel count, got {sorted(channels)}")
    if features[0].channels != weights.feature_channels:
        raise ValueError(
            f"weights expect {weights.feature_channels} feature channels, "
            f"got {features[0].channels}")
    if x0.embed_dim != weights.embed_dim:
        raise ValueError(f"weights expect embed dim {weights.embed_dim}, got {x0.embed_dim}")
    if len(weights.layers) < cfg.layers:
        raise ValueError(
            f"weights hold {len(weights.layers)} layers but config asks for {cfg.layers}")

    order = _scale_order(features)
    x = x0.embeddings.copy()
    for li in range(cfg.layers):
        layer = weights.layers[li]
        fmap = features[order[li % len(order)]]
        flat = fmap.values.reshape(fmap.channels, -1)
        mask_logits = _mask_mlp_apply(weights, x) @ flat      # (N, H*W)
        attn_mask = _sigmoid(mask_logits) > cfg.mask_threshold
        x = x + masked_cross_attention(x, fmap, attn_mask, layer)
        if cfg.use_self_attention:
            x = x + _self_attention(x, layer)
        x = x + np.maximum(x @ layer.ffn_w1 + layer.ffn_b1, 0.0) @ layer.ffn_w2 + layer.ffn_b2

    class_logits = x @ weights.class_w + weights.class_b
    largest = features[order[-1]]   # order is ascending in H*W
    mask_logits = (_mask_mlp_apply(weights, x)
                   @ largest.values.reshape(largest.channels, -1))
    mask_logits = mask_logits.reshape(x.shape[0], largest.height, largest.width)
    return QuerySet(x, class_logits=class_logits, mask_logits=mask_logits)


def taq_select(prev_out: QuerySet, learned_init: QuerySet) -> QuerySet:
    """Pick each slot's initial embedding for the next frame.

    Non-empty slots reuse the previous frame's output embedding; empty slots
    fall back to the learned initial embedding. Slot order is preserved and
    only embeddings are carried over.
    """
    if prev_out.num_queries != learned_init.num_queries:
        raise ValueError(
            f"query counts differ: {prev_out.num_queries} vs {learned_init.num_queries}")
    if prev_out.embed_dim != learned_init.embed_dim:
        raise ValueError(
            f"embedding dims differ: {prev_out.embed_dim} vs {learned_init.embed_dim}")
    keep = prev_out.non_empty_mask()
    emb = np.where(keep[:, None], prev_out.embeddings, learned_init.embeddings)
    return QuerySet(emb)


def laq_head(queries: QuerySet, cfg: LaqConfig, weights: DecoderWeights) -> np.ndarray:
    """Predict each query's segment center in normalised [0,1]^2 coordinates.

    Three affine layers with ReLU between them and a final sigmoid squash;
    zero weights therefore map every query to (0.5, 0.5).
    """
    if cfg.hidden_dim is not None and weights.laq[0][0].shape[1] != cfg.hidden_dim:
        raise ValueError(
            f"weights use hidden dim {weights.laq[0][0].shape[1]}, "
            f"config asks for {cfg.hidden_dim}")
    h = queries.embeddings
    for i, (w, b) in enumerate(weights.laq):
        h = h @ w + b
        if i < len(weights.laq) - 1:
            h = np.maximum(h, 0.0)
    return _sigmoid(h)


def laq_loss(pred_centers: np.ndarray, gt_centers: np.ndarray,
             is_thing: np.ndarray, cfg: LaqConfig) -> tuple[float, np.ndarray]:
    """Weighted L1 center loss over object (thing) queries only.

    loss = weight * mean(|pred - gt|) over thing rows and both coordinates;
    returns (loss, exact subgradient wrt pred_centers). Stuff rows carry no
    gradient, and with no thing rows at all the loss is 0.
    """
    pred = np.asarray(pred_centers, dtype=np.float64)
    gt = np.asarray(gt_centers, dtype=np.float64)
    things = np.asarray(is_thing, dtype=bool)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"centers must both be (N, 2), got {pred.shape} and {gt.shape}")
    if things.shape != (pred.shape[0],):
        raise ValueError(f"is_thing must be ({pred.shape[0]},), got {things.shape}")
    grad = np.zeros_like(pred)
    n_things = int(things.sum())
    if n_things == 0:
        return 0.0, grad
    diff = pred[things] - gt[things]
    denom = 2.0 * n_things
    loss = cfg.loss_weight * float(np.abs(diff).sum()) / denom
    grad[things] = cfg.loss_weight * np.sign(diff) / denom
    return loss, grad


# --- serialization -----------------------------------------------------------

def save_query_set(qs: QuerySet, prefix: str) -> None:
    """Write a query set as tensor files plus a JSON sidecar at `prefix`."""
    write_tensor(qs.embeddings, prefix + ".embeddings.pvt")
    files = {"embeddings": os.path.basename(prefix) + ".embeddings.pvt"}
    if qs.class_logits is not None:
        write_tensor(qs.class_logits, prefix + ".class_logits.pvt")
        files["class_logits"] = os.path.basename(prefix) + ".class_logits.pvt"
    if qs.mask_logits is not None:
        write_tensor(qs.mask_logits, prefix + ".mask_logits.pvt")
        files["mask_logits"] = os.path.basename(prefix) + ".mask_logits.pvt"
    sidecar = {
        "version": 1,
        "N": qs.num_queries,
        "C_x": qs.embed_dim,
        "K": None if qs.class_logits is None else qs.class_logits.shape[1] - 1,
        "centers": None if qs.centers is None else qs.centers.tolist(),
        "non_empty_flags": None if qs.class_logits is None else qs.non_empty_mask().tolist(),
        "files": files,
    }
    with open(prefix + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def load_query_set(prefix: str) -> QuerySet:
    with open(prefix + ".json") as f:
        sidecar = json.load(f)
    base = os.path.dirname(prefix)
    files = sidecar["files"]
    emb = read_tensor(os.path.join(base, files["embeddings"]))
    class_logits = None
    mask_logits = None
    if "class_logits" in files:
        class_logits = read_tensor(os.path.join(base, files["class_logits"]))
    if "mask_logits" in files:
        mask_logits = read_tensor(os.path.join(base, files["mask_logits"]))
    centers = None if sidecar.get("centers") is None else np.array(sidecar["centers"])
    return QuerySet(emb, class_logits=class_logits, centers=centers, mask_logits=mask_logits)
