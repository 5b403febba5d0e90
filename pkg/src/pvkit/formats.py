"""Bit-exact readers and writers for all on-disk artifacts.

Binary tensor format (magic "PVT1", all integers little-endian):

    offset 0   4 bytes   magic b"PVT1"
    offset 4   u32       dtype code: 1 = IEEE-754 binary32, 2 = binary64
    offset 8   u32       rank (number of dims; 0 = scalar)
    offset 12  rank*u32  dims
    then                 payload: prod(dims) scalars, row-major, little-endian

There is no compression or alignment padding so the format can be re-read
byte-for-byte from any language. PNG conventions: depth and disparity are
16-bit grayscale (meters*256 resp. Cityscapes (value-1)/256, 0 invalid);
panoptic maps are 24-bit RGB with segment id = R + 256*G + 65536*B and a
JSON sidecar listing each segment's category.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from .depth import CameraIntrinsics
from .metrics import CategoryTable, PanopticMap, SegmentInfo

__all__ = [
    "FormatError",
    "BadMagicError",
    "TruncatedFileError",
    "UnknownDtypeError",
    "read_tensor",
    "write_tensor",
    "read_png16",
    "write_png16",
    "read_depth_png",
    "write_depth_png",
    "read_panoptic_png",
    "write_panoptic_png",
    "read_categories",
    "write_categories",
    "read_intrinsics",
    "write_intrinsics",
    "FrameEntry",
    "SequenceManifest",
    "read_manifest",
    "write_manifest",
]

TENSOR_MAGIC = b"PVT1"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_KIND = {4: 1, 8: 2}


class FormatError(ValueError):
    """Base error for malformed on-disk artifacts."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


def write_tensor(values: np.ndarray, path: str) -> None:
    """Write a float32/float64 array in the PVT1 tensor format."""
    a = np.asarray(values)
    if a.dtype == np.float32:
        code = 1
    elif a.dtype == np.float64:
        code = 2
    else:
        raise UnknownDtypeError(f"tensor dtype must be float32 or float64, got {a.dtype}")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", code, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(np.ascontiguousarray(a, dtype=_DTYPE_CODES[code]).tobytes())


def read_tensor(path: str) -> np.ndarray:
    """Read a PVT1 tensor; write_tensor . read_tensor is the identity."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: header truncated at {len(data)} bytes")
    code, rank = struct.unpack_from("<II", data, 4)
    if code not in _DTYPE_CODES:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    if len(data) < 12 + 4 * rank:
        raise TruncatedFileError(f"{path}: dims truncated (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = data[12 + 4 * rank:]
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise TruncatedFileError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


# --- 16-bit grayscale PNG ----------------------------------------------------

def read_png16(path: str) -> np.ndarray:
    """Read a 16-bit grayscale PNG as a uint16 array; rejects 8-bit files."""
    img = Image.open(path)
    if img.mode == "L" or img.mode == "P":
        raise FormatError(f"{path}: 8-bit PNG; depth/disparity maps must be 16-bit grayscale")
    if img.mode not in ("I", "I;16"):
        raise FormatError(f"{path}: unsupported PNG mode {img.mode}; expected 16-bit grayscale")
    arr = np.array(img)
    if arr.min() < 0 or arr.max() > 65535:
        raise FormatError(f"{path}: pixel values outside the 16-bit range")
    return arr.astype(np.uint16)


def write_png16(values: np.ndarray, path: str) -> None:
    a = np.asarray(values)
    if a.dtype != np.uint16:
        raise ValueError(f"expected uint16 values, got {a.dtype}")
    Image.fromarray(a).save(path, format="PNG")


def read_depth_png(path: str, mode: str = "depth256") -> np.ndarray:
    """Decode a 16-bit PNG to float64 meters (depth256) or disparity pixels
    (cityscapes_disparity). 0 marks invalid in both modes."""
    raw = read_png16(path).astype(np.float64)
    if mode == "depth256":
        return raw / 256.0
    if mode == "cityscapes_disparity":
        out = np.where(raw > 0, (raw - 1.0) / 256.0, 0.0)
        return out
    raise ValueError(f"unknown depth PNG mode {mode!r}")


def write_depth_png(values: np.ndarray, path: str, mode: str = "depth256") -> None:
    """Encode float64 meters or disparity to a 16-bit PNG (0 stays invalid).

    Valid values are rounded to the nearest 1/256 step and clamped into
    [1, 65535] so they never collapse onto the invalid sentinel.
    """
    v = np.asarray(values, dtype=np.float64)
    valid = v != 0.0
    raw = np.zeros(v.shape, dtype=np.uint16)
    if mode == "depth256":
        encoded = np.rint(v[valid] * 256.0)
    elif mode == "cityscapes_disparity":
        encoded = np.rint(v[valid] * 256.0) + 1.0
    else:
        raise ValueError(f"unknown depth PNG mode {mode!r}")
    raw[valid] = np.clip(encoded, 1, 65535).astype(np.uint16)
    write_png16(raw, path)


# --- panoptic PNG + segments_info --------------------------------------------

def write_panoptic_png(pmap: PanopticMap, png_path: str, segments_info_path: str) -> None:
    """Write segment ids as 24-bit RGB (id = R + 256*G + 65536*B) plus the
    segments_info JSON sidecar."""
    ids = pmap.segment_ids.astype(np.uint32)
    if ids.max(initial=0) >= 1 << 24:
        raise ValueError("segment ids must fit in 24 bits for RGB encoding")
    rgb = np.stack([ids & 0xFF, (ids >> 8) & 0xFF, (ids >> 16) & 0xFF],
                   axis=-1).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(png_path, format="PNG")
    doc = {"version": 1, "segments_info": [
        {"segment_id": int(s.segment_id), "category_id": int(s.category_id),
         "is_thing": bool(s.is_thing)}
        for s in pmap.segments_info
    ]}
    with open(segments_info_path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def read_panoptic_png(png_path: str, segments_info_path: str) -> PanopticMap:
    img = Image.open(png_path)
    if img.mode != "RGB":
        raise FormatError(f"{png_path}: panoptic PNG must be 24-bit RGB, got mode {img.mode}")
    rgb = np.array(img).astype(np.uint32)
    ids = rgb[:, :, 0] + 256 * rgb[:, :, 1] + 65536 * rgb[:, :, 2]
    with open(segments_info_path) as f:
        doc = json.load(f)
    seen = set()
    infos = []
    for entry in doc["segments_info"]:
        sid = int(entry["segment_id"])
        if sid in seen:
            raise FormatError(f"{segments_info_path}: duplicate segment id {sid}")
        seen.add(sid)
        infos.append(SegmentInfo(sid, int(entry["category_id"]), bool(entry["is_thing"])))
    present = set(np.unique(ids).tolist()) - {0}
    missing = present - seen
    if missing:
        raise FormatError(
            f"{png_path}: pixel ids {sorted(missing)} missing from {segments_info_path}")
    return PanopticMap(ids, infos)


def read_categories(path: str) -> CategoryTable:
    with open(path) as f:
        doc = json.load(f)
    table = {}
    for entry in doc["categories"]:
        cid = int(entry["id"])
        if cid in table:
            raise FormatError(f"{path}: duplicate category id {cid}")
        table[cid] = (str(entry.get("name", f"category_{cid}")), bool(entry["is_thing"]))
    return CategoryTable(table)


def write_categories(cats: CategoryTable, path: str) -> None:
    doc = {"version": 1, "categories": [
        {"id": cid, "name": name, "is_thing": is_thing}
        for cid, (name, is_thing) in sorted(cats.entries.items())
    ]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


# --- intrinsics --------------------------------------------------------------

def read_intrinsics(path: str) -> CameraIntrinsics:
    with open(path) as f:
        doc = json.load(f)
    try:
        return CameraIntrinsics(
            focal_y=float(doc["focal_y"]),
            principal_y=float(doc["principal_y"]),
            focal_x=None if doc.get("focal_x") is None else float(doc["focal_x"]),
            principal_x=None if doc.get("principal_x") is None else float(doc["principal_x"]),
            baseline=None if doc.get("baseline") is None else float(doc["baseline"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: intrinsics JSON missing key {exc}") from None


def write_intrinsics(intr: CameraIntrinsics, path: str) -> None:
    doc = {"version": 1,
           "focal_x": intr.focal_x, "focal_y": intr.focal_y,
           "principal_x": intr.principal_x, "principal_y": intr.principal_y,
           "baseline": intr.baseline}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


# --- sequence manifest -------------------------------------------------------

@dataclass
class FrameEntry:
    frame_index: int
    image_path: Optional[str] = None
    depth_path: Optional[str] = None
    panoptic_path: Optional[str] = None
    queries_path: Optional[str] = None


@dataclass
class SequenceManifest:
    """Ordered frame listing; sampling_stride records how many source video
    frames separate consecutive entries (5 for the usual VPS sampling)."""

    frames: list[FrameEntry] = field(default_factory=list)
    sampling_stride: int = 5

    def __post_init__(self):
        prev = None
        for entry in self.frames:
            if prev is not None and entry.frame_index <= prev:
                raise ValueError(
                    f"frame indices must be strictly increasing; "
                    f"index {entry.frame_index} follows {prev}")
            prev = entry.frame_index


_FRAME_PATH_KEYS = ("image_path", "depth_path", "panoptic_path", "queries_path")


def read_manifest(path: str) -> SequenceManifest:
    with open(path) as f:
        doc = json.load(f)
    frames = []
    for raw in doc.get("frames", []):
        if "frame_index" not in raw:
            raise FormatError(f"{path}: manifest frame entry missing frame_index")
        kwargs = {k: raw.get(k) for k in _FRAME_PATH_KEYS}
        frames.append(FrameEntry(int(raw["frame_index"]), **kwargs))
    try:
        return SequenceManifest(frames, int(doc.get("sampling_stride", 5)))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_manifest(manifest: SequenceManifest, path: str) -> None:
    doc = {"version": 1, "sampling_stride": manifest.sampling_stride, "frames": []}
    for entry in manifest.frames:
        row = {"frame_index": entry.frame_index}
        for k in _FRAME_PATH_KEYS:
            v = getattr(entry, k)
            if v is not None:
                row[k] = v
        doc["frames"].append(row)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
