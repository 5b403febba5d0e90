"""Synthetic scenes and a toy feature pyramid.

The real system extracts multi-scale features with trained backbones; at desk
scale we stand in a deterministic pyramid (average pooling plus a seeded
nonlinear channel lift) so the fusion, decoder, and tracking stages can be
exercised end to end on data with known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth import DepthMap
from .fusion import FeatureMap
from .metrics import CategoryTable, PanopticMap

__all__ = ["SyntheticScene", "make_scene", "build_feature_pyramid"]

ROAD, SKY, CAR, PERSON = 1, 2, 3, 4


@dataclass
class SyntheticScene:
    """Ground truth for a short driving-like clip with moving objects."""

    panoptic: list[PanopticMap]
    depth: list[DepthMap]
    images: list[np.ndarray]                 # (H, W) float64 intensity
    thing_centers: list[dict[int, tuple[float, float]]]   # per frame, id -> (x, y)
    categories: CategoryTable


def make_scene(frames: int = 4, height: int = 64, width: int = 128,
               seed: int = 0) -> SyntheticScene:
    """Sky/road background with two cars and a walker moving left to right.

    Segment ids are persistent across frames (track-consistent), all depths
    sit well below the 100 m completion cap, and a 2-row void strip runs
    along the bottom edge.
    """
    rng = np.random.default_rng(seed)
    horizon = height * 2 // 5
    cats = CategoryTable({
        ROAD: ("road", False),
        SKY: ("sky", False),
        CAR: ("car", True),
        PERSON: ("person", True),
    })
    objects = [
        # (segment id, category, w, h, depth, x0 frac, y frac, dx per frame)
        (10, CAR, width // 6, height // 5, 8.0, 0.15, 0.62, 0.04),
        (11, CAR, width // 7, height // 6, 15.0, 0.55, 0.55, -0.03),
        (12, PERSON, max(3, width // 24), height // 4, 10.0, 0.35, 0.60, 0.02),
    ]
    jitter = rng.uniform(-0.01, 0.01, size=(frames, len(objects), 2))

    panoptic, depths, images, centers = [], [], [], []
    for t in range(frames):
        ids = np.zeros((height, width), dtype=np.uint32)
        ids[:horizon, :] = 2      # sky segment id
        ids[horizon:, :] = 1      # road segment id
        depth = np.zeros((height, width))
        depth[:horizon, :] = 80.0
        road_rows = np.arange(horizon, height, dtype=np.float64)
        depth[horizon:, :] = (40.0 - 35.0 * (road_rows - horizon)
                              / max(1, height - horizon))[:, None]
        frame_centers = {}
        info = {1: (ROAD, False), 2: (SKY, False)}
        for k, (sid, cat, ow, oh, od, x0, yf, dx) in enumerate(objects):
            cx = (x0 + dx * t + jitter[t, k, 0]) * width
            cy = (yf + jitter[t, k, 1]) * height
            x_lo = int(np.clip(cx - ow / 2, 0, width - 1))
            x_hi = int(np.clip(cx + ow / 2, x_lo + 1, width))
            y_lo = int(np.clip(cy - oh / 2, 0, height - 1))
            y_hi = int(np.clip(cy + oh / 2, y_lo + 1, height))
            ids[y_lo:y_hi, x_lo:x_hi] = sid
            depth[y_lo:y_hi, x_lo:x_hi] = od
            info[sid] = (cat, True)
            frame_centers[sid] = (float(np.clip(cx / width, 0, 1)),
                                  float(np.clip(cy / height, 0, 1)))
        ids[height - 2:, :] = 0   # void strip; depth stays valid there
        image = 0.2 + 0.7 * (depth / depth.max()) \
            + 0.1 * np.cos(ids.astype(np.float64))
        panoptic.append(PanopticMap.with_info(ids, info))
        depths.append(DepthMap(depth))
        images.append(image)
        centers.append(frame_centers)
    return SyntheticScene(panoptic, depths, images, centers, cats)


def _pool(values: np.ndarray, factor: int) -> np.ndarray:
    h = (values.shape[0] // factor) * factor
    w = (values.shape[1] // factor) * factor
    if h == 0 or w == 0:
        raise ValueError(
            f"image {values.shape} too small for pooling factor {factor}")
    v = values[:h, :w]
    return v.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def build_feature_pyramid(image: np.ndarray, channels: int = 8, levels: int = 4,
                          base_factor: int = 4, seed: int = 0) -> list[FeatureMap]:
    """Deterministic multi-scale features from a single intensity image.

    Level l pools by base_factor * 2**l and lifts to `channels` channels with
    seeded sinusoidal projections; scale_index runs 1..levels with 1 the
    finest, matching the backbone convention.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D intensity image, got shape {img.shape}")
    rng = np.random.default_rng(seed ^ 0xF3A7)
    freq = rng.uniform(0.5, 3.0, size=channels)
    phase = rng.uniform(0.0, 2 * np.pi, size=channels)
    maps = []
    for level in range(levels):
        pooled = _pool(img, base_factor * (2 ** level))
        chans = np.stack([np.cos(freq[c] * pooled + phase[c]) for c in range(channels)])
        maps.append(FeatureMap(chans, scale_index=level + 1))
    return maps
