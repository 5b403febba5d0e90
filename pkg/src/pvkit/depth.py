"""Depth pipeline: disparity conversion, LiDAR beam simulation, ray-drop,
and classical morphological depth completion.

All maps use 0.0 as the invalid-pixel sentinel; valid depths are finite,
positive meters. Operations are pure functions of their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .rng import uniform01

__all__ = [
    "DepthMap",
    "CameraIntrinsics",
    "LidarSimConfig",
    "CompletionConfig",
    "disparity_to_depth",
    "depth_to_disparity_values",
    "simulate_lidar",
    "ray_drop",
    "complete_depth",
    "dilate_valid",
    "erode_valid",
    "masked_median",
    "masked_gaussian_blur",
    "diamond_kernel",
    "full_kernel",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; baseline in meters (stereo rigs only)."""

    focal_y: float
    principal_y: float
    focal_x: Optional[float] = None
    principal_x: Optional[float] = None
    baseline: Optional[float] = None

    def __post_init__(self):
        if not (self.focal_y > 0):
            raise ValueError(f"focal_y must be > 0, got {self.focal_y}")
        if self.focal_x is not None and not (self.focal_x > 0):
            raise ValueError(f"focal_x must be > 0, got {self.focal_x}")


@dataclass
class DepthMap:
    """Dense or sparse per-pixel depth in meters on an H x W grid.

    `values` is a 2-D float64 array; 0.0 marks pixels with no measurement.
    Valid values must be finite and strictly positive. Treat instances as
    immutable: operations return new maps.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"depth map must be 2-D with positive dims, got shape {v.shape}")
        valid = v != 0.0
        if not np.all(np.isfinite(v[valid])) or np.any(v[valid] < 0):
            raise ValueError("valid depth values must be finite and > 0")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid_mask(self) -> np.ndarray:
        return self.values != 0.0

    def valid_count(self) -> int:
        return int(np.count_nonzero(self.values))


@dataclass(frozen=True)
class LidarSimConfig:
    """Beam-angle binning parameters mimicking a 64-beam spinning LiDAR.

    The default vertical field of view (-24.8 to +2.0 degrees) follows the
    HDL-64E datasheet; beams are spaced uniformly inside it.
    """

    beams: int = 64
    vertical_fov_deg: tuple[float, float] = (-24.8, 2.0)
    keep_ratio: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError(f"beams must be >= 1, got {self.beams}")
        lo, hi = self.vertical_fov_deg
        if not lo < hi:
            raise ValueError(f"vertical FOV min must be < max, got ({lo}, {hi})")
        if not 0.0 <= self.keep_ratio <= 1.0:
            raise ValueError(f"keep_ratio must be in [0, 1], got {self.keep_ratio}")


@dataclass(frozen=True)
class CompletionConfig:
    """Kernel sizes for each stage of the morphological completion pipeline.

    All kernels must be odd and >= 3. `max_depth_cap` is the inversion pivot;
    every input depth must be strictly below it.
    """

    dilate_kernel: int = 5        # diamond
    close_kernel: int = 5         # full square
    small_fill_kernel: int = 7    # full square, empty pixels only
    large_fill_kernel: int = 31   # full square, empty pixels only, repeated
    median_kernel: int = 5
    blur_kernel: int = 5
    enable_blur: bool = True
    max_depth_cap: float = 100.0

    def __post_init__(self):
        for name in ("dilate_kernel", "close_kernel", "small_fill_kernel",
                     "large_fill_kernel", "median_kernel", "blur_kernel"):
            k = getattr(self, name)
            if k < 3 or k % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3, got {k}")
        if not self.max_depth_cap > 0:
            raise ValueError(f"max_depth_cap must be > 0, got {self.max_depth_cap}")


def disparity_to_depth(disparity_png_values: np.ndarray,
                       intrinsics: CameraIntrinsics) -> DepthMap:
    """Decode 16-bit Cityscapes disparity values to metric depth.

    Raw value p = 0 is invalid; p > 0 encodes disparity d = (p - 1) / 256,
    and d = 0 after decoding is also invalid; otherwise
    depth = baseline * focal_x / d.
    """
    if intrinsics.baseline is None or intrinsics.focal_x is None:
        raise ValueError("disparity conversion requires intrinsics with baseline and focal_x")
    if not intrinsics.baseline > 0:
        raise ValueError(f"baseline must be > 0, got {intrinsics.baseline}")
    raw = np.asarray(disparity_png_values)
    if raw.ndim != 2:
        raise ValueError(f"disparity grid must be 2-D, got shape {raw.shape}")
    disparity = (raw.astype(np.float64) - 1.0) / 256.0
    valid = (raw > 0) & (disparity > 0)
    if not valid.any():
        raise ValueError("disparity map has no valid pixels")
    depth = np.zeros(raw.shape, dtype=np.float64)
    depth[valid] = intrinsics.baseline * intrinsics.focal_x / disparity[valid]
    return DepthMap(depth)


def depth_to_disparity_values(depth: DepthMap, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Encode a depth map back to raw 16-bit Cityscapes disparity values.

    Inverse of `disparity_to_depth` up to the 1/256 disparity quantisation
    step; invalid pixels encode to 0.
    """
    if intrinsics.baseline is None or intrinsics.focal_x is None:
        raise ValueError("disparity encoding requires intrinsics with baseline and focal_x")
    valid = depth.valid_mask()
    disparity = np.zeros_like(depth.values)
    disparity[valid] = intrinsics.baseline * intrinsics.focal_x / depth.values[valid]
    raw = np.zeros(depth.values.shape, dtype=np.uint16)
    encoded = np.rint(disparity[valid] * 256.0) + 1.0
    raw[valid] = np.clip(encoded, 1, 65535).astype(np.uint16)
    return raw


def row_angles_deg(height: int, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vertical viewing angle of each image row: atan((cy - r) / fy), degrees."""
    rows = np.arange(height, dtype=np.float64)
    return np.degrees(np.arctan2(intrinsics.principal_y - rows, intrinsics.focal_y))


def simulate_lidar(dense: DepthMap, intrinsics: CameraIntrinsics,
                   cfg: LidarSimConfig) -> DepthMap:
    """Keep only the image rows closest to the simulated beam angles.

    `cfg.beams` beam angles are spaced uniformly across the vertical FOV;
    for each beam the in-FOV row with the nearest viewing angle is retained
    (ties broken toward the lower row index). All other rows become invalid.
    Values at retained rows are copied bit-identically.
    """
    if cfg.beams > dense.height:
        raise ValueError(f"beams ({cfg.beams}) exceeds image height ({dense.height})")
    angles = row_angles_deg(dense.height, intrinsics)
    lo, hi = cfg.vertical_fov_deg
    in_fov = np.nonzero((angles >= lo) & (angles <= hi))[0]
    if in_fov.size == 0:
        raise ValueError(f"no image row falls inside the vertical FOV ({lo}, {hi}) deg")
    beam_angles = np.linspace(lo, hi, cfg.beams)
    # argmin over ascending row indices -> lowest index wins ties
    nearest = in_fov[np.argmin(np.abs(angles[in_fov][None, :] - beam_angles[:, None]), axis=1)]
    keep_rows = np.unique(nearest)
    out = np.zeros_like(dense.values)
    out[keep_rows, :] = dense.values[keep_rows, :]
    return DepthMap(out)


def ray_drop(sparse: DepthMap, keep_ratio: float, seed: int) -> DepthMap:
    """Randomly delete valid pixels, mimicking LiDAR ray drop.

    Each valid pixel is retained independently with probability `keep_ratio`.
    Pixel (r, c) uses draw r * width + c of the splitmix64 stream `seed`, so
    the same (input, keep_ratio, seed) always yields the same output.
    """
    if not 0.0 <= keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in [0, 1], got {keep_ratio}")
    draws = uniform01(seed, sparse.height * sparse.width).reshape(sparse.values.shape)
    keep = (draws < keep_ratio) & sparse.valid_mask()
    out = np.where(keep, sparse.values, 0.0)
    return DepthMap(out)


# --- morphological completion ------------------------------------------------
#
# The pipeline operates on inverted depth (cap - d) so that dilation, which
# propagates the window maximum, favors near surfaces over far ones. Invalid
# pixels stay 0 throughout; all window operations ignore out-of-image pixels.

def diamond_kernel(size: int) -> np.ndarray:
    """Boolean diamond (L1 ball) footprint of odd side length `size`."""
    r = size // 2
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    return np.abs(y) + np.abs(x) <= r


def full_kernel(size: int) -> np.ndarray:
    """Boolean square footprint of odd side length `size`."""
    return np.ones((size, size), dtype=bool)


def dilate_valid(values: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    """Grayscale dilation where 0 marks invalid: max over in-bounds window."""
    out = ndimage.maximum_filter(values, footprint=footprint, mode="constant", cval=-np.inf)
    return np.maximum(out, 0.0)


def erode_valid(values: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    """Grayscale erosion; out-of-image neighbors are ignored, zeros are not."""
    return ndimage.minimum_filter(values, footprint=footprint, mode="constant", cval=np.inf)


def masked_median(values: np.ndarray, valid: np.ndarray, size: int) -> np.ndarray:
    """Median over the valid in-bounds neighbors of each valid pixel.

    Invalid pixels stay 0 and never contribute to a neighbor's median.
    """
    h, w = values.shape
    r = size // 2
    stack = np.full((size * size, h, w), np.nan)
    src = np.where(valid, values, np.nan)
    for i, dy in enumerate(range(-r, r + 1)):
        for j, dx in enumerate(range(-r, r + 1)):
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(w, w - dx))
            yd = slice(max(0, dy), min(h, h + dy))
            xd = slice(max(0, dx), min(w, w + dx))
            stack[i * size + j][yd, xd] = src[ys, xs]
    counts = np.sum(~np.isnan(stack), axis=0)
    med = np.zeros_like(values)
    has_data = counts > 0
    if has_data.any():
        med[has_data] = np.nanmedian(stack[:, has_data], axis=0)
    return np.where(valid, med, 0.0)


def gaussian_weights(size: int, sigma: Optional[float] = None) -> np.ndarray:
    """Truncated 2-D Gaussian kernel; default sigma follows the common
    0.3 * ((size - 1) / 2 - 1) + 0.8 convention for small odd sizes."""
    if sigma is None:
        sigma = 0.3 * ((size - 1) * 0.5 - 1.0) + 0.8
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


def masked_gaussian_blur(values: np.ndarray, valid: np.ndarray, size: int) -> np.ndarray:
    """Gaussian blur normalised over the valid in-bounds neighbors.

    Weighted mean of valid neighbors at each valid pixel; invalid pixels stay
    0. Constant fields are preserved up to float rounding.
    """
    k = gaussian_weights(size)
    num = ndimage.correlate(np.where(valid, values, 0.0), k, mode="constant", cval=0.0)
    den = ndimage.correlate(valid.astype(np.float64), k, mode="constant", cval=0.0)
    out = np.zeros_like(values)
    out[valid] = num[valid] / den[valid]
    return out


def extend_columns_to_top(values: np.ndarray) -> np.ndarray:
    """Copy each column's topmost valid value upward to the map's top valid row."""
    valid = values > 0
    if not valid.any():
        return values
    top_row = int(np.argmax(valid.any(axis=1)))
    out = values.copy()
    col_has = valid.any(axis=0)
    first_valid = np.argmax(valid, axis=0)
    for c in np.nonzero(col_has)[0]:
        r = first_valid[c]
        if r > top_row:
            out[top_row:r, c] = values[r, c]
    return out


def complete_depth(sparse: DepthMap, cfg: CompletionConfig = CompletionConfig()) -> DepthMap:
    """Densify a sparse depth map with the inverted-depth morphological pipeline.

    Stages: invert (cap - d), dilate (diamond), close (full), fill small holes
    (dilation masked to empty pixels), extend each column's top value up to the
    map's top valid row, fill large holes (repeated masked dilation until no
    empty pixel remains at or below the top valid row), median blur, Gaussian
    blur over valid pixels, invert back.

    Output values always lie within [min, max] of the input's valid values,
    and every pixel at or below the topmost valid input row is valid.
    """
    valid_in = sparse.valid_mask()
    if not valid_in.any():
        raise ValueError("completion requires at least one valid pixel")
    vmin = float(sparse.values[valid_in].min())
    vmax = float(sparse.values[valid_in].max())
    if vmax >= cfg.max_depth_cap:
        raise ValueError(
            f"depth {vmax} exceeds inversion cap {cfg.max_depth_cap}; raise max_depth_cap")

    inv = np.where(valid_in, cfg.max_depth_cap - sparse.values, 0.0)

    inv = dilate_valid(inv, diamond_kernel(cfg.dilate_kernel))
    inv = erode_valid(dilate_valid(inv, full_kernel(cfg.close_kernel)),
                      full_kernel(cfg.close_kernel))

    fill = dilate_valid(inv, full_kernel(cfg.small_fill_kernel))
    empty = inv == 0
    inv[empty] = fill[empty]

    inv = extend_columns_to_top(inv)

    top_row = int(np.argmax((inv > 0).any(axis=1)))
    big = full_kernel(cfg.large_fill_kernel)
    while np.any(inv[top_row:] == 0):
        fill = dilate_valid(inv, big)
        empty = inv == 0
        inv[empty] = fill[empty]

    valid = inv > 0
    inv = masked_median(inv, valid, cfg.median_kernel)
    if cfg.enable_blur:
        inv = masked_gaussian_blur(inv, valid, cfg.blur_kernel)

    out = np.zeros_like(inv)
    out[valid] = cfg.max_depth_cap - inv[valid]
    # guard against <=1 ulp drift from the two normalised blurs
    out[valid] = np.clip(out[valid], vmin, vmax)
    return DepthMap(out)
