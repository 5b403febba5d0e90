"""Panoptic Quality and Video Panoptic Quality evaluation.

A predicted segment matches a ground-truth segment of the same category when
their IoU exceeds 0.5; void pixels (segment id 0 in the ground truth) are
excluded from both intersection and union, and an unmatched prediction whose
area lies more than half on void is exempt from the false-positive count.
Per class, PQ = iou_sum / (TP + 0.5 FP + 0.5 FN); classes with no activity
are skipped before averaging.

The video metric applies the same accounting to tubes: per temporal window,
each persistent (category, track id) pair contributes the union of its
per-frame pixels as one segment. Stats from all windows accumulate into the
per-class totals before the final ratio, so a window length of 1 reproduces
frame-accumulated PQ exactly. VPQ is the mean over the configured window
labels.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "SegmentInfo",
    "PanopticMap",
    "CategoryTable",
    "PqStats",
    "SegmentMatch",
    "match_segments",
    "compute_pq",
    "PqResult",
    "Tube",
    "build_tubes",
    "VpqConfig",
    "compute_vpq",
    "VpqResult",
]

VOID_ID = 0
IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class SegmentInfo:
    segment_id: int
    category_id: int
    is_thing: bool


@dataclass
class PanopticMap:
    """Per-pixel segment ids (0 = void) plus per-segment category info."""

    segment_ids: np.ndarray
    segments_info: list[SegmentInfo]

    def __post_init__(self):
        ids = np.asarray(self.segment_ids)
        if ids.ndim != 2 or min(ids.shape) < 1:
            raise ValueError(f"segment id map must be 2-D with positive dims, got {ids.shape}")
        if np.issubdtype(ids.dtype, np.floating):
            raise ValueError("segment ids must be integers")
        if ids.min() < 0:
            raise ValueError("segment ids must be non-negative")
        self.segment_ids = ids.astype(np.uint32)
        seen = {}
        for info in self.segments_info:
            if info.segment_id == VOID_ID:
                raise ValueError("segment id 0 is reserved for void")
            if info.segment_id in seen:
                raise ValueError(f"duplicate segment id {info.segment_id} in segments_info")
            seen[info.segment_id] = info
        present = set(np.unique(self.segment_ids).tolist()) - {VOID_ID}
        missing = present - set(seen)
        if missing:
            raise ValueError(f"pixel ids {sorted(missing)} missing from segments_info")

    @classmethod
    def with_info(cls, segment_ids: np.ndarray,
                  info: Mapping[int, tuple[int, bool]]) -> "PanopticMap":
        """Build from an id map and {segment_id: (category_id, is_thing)}."""
        return cls(segment_ids,
                   [SegmentInfo(sid, cat, thing) for sid, (cat, thing) in sorted(info.items())])

    @property
    def height(self) -> int:
        return self.segment_ids.shape[0]

    @property
    def width(self) -> int:
        return self.segment_ids.shape[1]

    def info_by_id(self) -> dict[int, SegmentInfo]:
        return {s.segment_id: s for s in self.segments_info}


@dataclass
class CategoryTable:
    """category_id -> (name, is_thing)."""

    entries: dict[int, tuple[str, bool]]

    def is_thing(self, category_id: int) -> bool:
        return self.entries[category_id][1]

    def __contains__(self, category_id: int) -> bool:
        return category_id in self.entries

    @classmethod
    def simple(cls, thing_ids: Sequence[int], stuff_ids: Sequence[int]) -> "CategoryTable":
        entries = {int(c): (f"thing_{c}", True) for c in thing_ids}
        for c in stuff_ids:
            if int(c) in entries:
                raise ValueError(f"category {c} listed as both thing and stuff")
            entries[int(c)] = (f"stuff_{c}", False)
        return cls(entries)


class ClassStats:
    """Accumulated matching stats for one category."""

    __slots__ = ("iou_sum", "tp", "fp", "fn")

    def __init__(self):
        self.iou_sum = 0.0
        self.tp = 0
        self.fp = 0
        self.fn = 0

    def __iadd__(self, other: "ClassStats") -> "ClassStats":
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


class PqStats:
    """Per-category stats, mergeable across frames/windows/workers."""

    def __init__(self):
        self.per_class: dict[int, ClassStats] = {}

    def __getitem__(self, category_id: int) -> ClassStats:
        if category_id not in self.per_class:
            self.per_class[category_id] = ClassStats()
        return self.per_class[category_id]

    def __iadd__(self, other: "PqStats") -> "PqStats":
        for cid, stats in other.per_class.items():
            target = self[cid]
            target += stats
        return self


@dataclass(frozen=True)
class SegmentMatch:
    gt_id: int
    pred_id: int
    iou: float


@dataclass
class PqClassResult:
    pq: float
    iou_sum: float
    tp: int
    fp: int
    fn: int


@dataclass
class PqResult:
    pq: float
    pq_things: float
    pq_stuff: float
    per_class: dict[int, PqClassResult]

    def to_report(self) -> dict:
        return {
            "all": self.pq,
            "things": self.pq_things,
            "stuff": self.pq_stuff,
            "per_class": {str(cid): {"pq": r.pq, "iou_sum": r.iou_sum,
                                     "tp": r.tp, "fp": r.fp, "fn": r.fn}
                          for cid, r in sorted(self.per_class.items())},
        }


def _pair_counts(gt_ids: np.ndarray, pred_ids: np.ndarray) -> dict[tuple[int, int], int]:
    """Exact pixel-count of every (gt id, pred id) co-occurrence."""
    codes = gt_ids.astype(np.uint64) << np.uint64(32) | pred_ids.astype(np.uint64)
    uniq, counts = np.unique(codes, return_counts=True)
    return {(int(c >> np.uint64(32)), int(c & np.uint64(0xFFFFFFFF))): int(n)
            for c, n in zip(uniq, counts)}


def _areas(pairs: dict[tuple[int, int], int]) -> tuple[dict[int, int], dict[int, int]]:
    gt_areas: dict[int, int] = {}
    pred_areas: dict[int, int] = {}
    for (g, p), n in pairs.items():
        if g != VOID_ID:
            gt_areas[g] = gt_areas.get(g, 0) + n
        if p != VOID_ID:
            pred_areas[p] = pred_areas.get(p, 0) + n
    return gt_areas, pred_areas


def _match_pairs(pairs, gt_areas, pred_areas, gt_info, pred_info):
    """IoU>0.5 matches between same-category segments; void excluded."""
    matches = []
    matched_gt: set[int] = set()
    matched_pred: set[int] = set()
    for (g, p), inter in sorted(pairs.items()):
        if g == VOID_ID or p == VOID_ID:
            continue
        if g not in gt_info or p not in pred_info:
            continue
        if gt_info[g].category_id != pred_info[p].category_id:
            continue
        union = (gt_areas[g] + pred_areas[p] - inter
                 - pairs.get((VOID_ID, p), 0))
        iou = inter / union
        if iou > IOU_THRESHOLD:
            # IoU > 0.5 makes matches provably one-to-one; verify anyway
            if g in matched_gt or p in matched_pred:
                raise AssertionError(
                    f"segment matched twice (gt {g}, pred {p}); IoU rule violated")
            matched_gt.add(g)
            matched_pred.add(p)
            matches.append(SegmentMatch(g, p, iou))
    return matches, matched_gt, matched_pred


def match_segments(pred: PanopticMap, gt: PanopticMap) -> list[SegmentMatch]:
    """All (gt, pred) segment matches of one frame, sorted by id pair."""
    if pred.segment_ids.shape != gt.segment_ids.shape:
        raise ValueError(
            f"map dims differ: pred {pred.segment_ids.shape} vs gt {gt.segment_ids.shape}")
    pairs = _pair_counts(gt.segment_ids, pred.segment_ids)
    gt_areas, pred_areas = _areas(pairs)
    matches, _, _ = _match_pairs(pairs, gt_areas, pred_areas,
                                 gt.info_by_id(), pred.info_by_id())
    return matches


def _check_categories(pmap: PanopticMap, cats: CategoryTable, label: str):
    for info in pmap.segments_info:
        if info.category_id not in cats:
            raise ValueError(f"{label} segment {info.segment_id} has unknown "
                             f"category {info.category_id}")


def _frame_stats(pred: PanopticMap, gt: PanopticMap, cats: CategoryTable) -> PqStats:
    if pred.segment_ids.shape != gt.segment_ids.shape:
        raise ValueError(
            f"map dims differ: pred {pred.segment_ids.shape} vs gt {gt.segment_ids.shape}")
    _check_categories(gt, cats, "gt")
    _check_categories(pred, cats, "pred")
    pairs = _pair_counts(gt.segment_ids, pred.segment_ids)
    gt_areas, pred_areas = _areas(pairs)
    gt_info = gt.info_by_id()
    pred_info = pred.info_by_id()
    stats = PqStats()
    matches, matched_gt, matched_pred = _match_pairs(
        pairs, gt_areas, pred_areas, gt_info, pred_info)
    for m in matches:
        cls = stats[gt_info[m.gt_id].category_id]
        cls.tp += 1
        cls.iou_sum += m.iou
    for g, info in sorted(gt_info.items()):
        if g in matched_gt or gt_areas.get(g, 0) == 0:
            continue
        stats[info.category_id].fn += 1
    for p, info in sorted(pred_info.items()):
        if p in matched_pred:
            continue
        area = pred_areas.get(p, 0)
        if area == 0:
            continue
        # predictions mostly over void are exempt from the FP count
        if pairs.get((VOID_ID, p), 0) / area > 0.5:
            continue
        stats[info.category_id].fp += 1
    return stats


def _average(stats: PqStats, cats: CategoryTable) -> PqResult:
    per_class = {}
    sums = {"all": [0.0, 0], "things": [0.0, 0], "stuff": [0.0, 0]}
    for cid in sorted(stats.per_class):
        s = stats.per_class[cid]
        if s.tp + s.fp + s.fn == 0:
            continue            # class saw no segments anywhere: skip
        pq = s.iou_sum / (s.tp + 0.5 * s.fp + 0.5 * s.fn)
        per_class[cid] = PqClassResult(pq, s.iou_sum, s.tp, s.fp, s.fn)
        sums["all"][0] += pq
        sums["all"][1] += 1
        bucket = "things" if cats.is_thing(cid) else "stuff"
        sums[bucket][0] += pq
        sums[bucket][1] += 1
    def mean(key):
        total, n = sums[key]
        return total / n if n else 0.0
    return PqResult(mean("all"), mean("things"), mean("stuff"), per_class)


def compute_pq(preds: Sequence[PanopticMap], gts: Sequence[PanopticMap],
               cats: CategoryTable, threads: int = 1) -> PqResult:
    """Panoptic Quality over aligned prediction/ground-truth frame lists."""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    stats = PqStats()
    for frame in _map_ordered(lambda pg: _frame_stats(pg[0], pg[1], cats),
                              list(zip(preds, gts)), threads):
        stats += frame
    return _average(stats, cats)


# --- tubes / VPQ --------------------------------------------------------------

@dataclass
class Tube:
    """One track's pixels concatenated over a window, treated as a segment."""

    segment_id: int
    category_id: int
    is_thing: bool
    area: int
    pixels: np.ndarray      # flat indices t*H*W + y*W + x within the window


def build_tubes(frames: Sequence[PanopticMap], start: int = 0,
                length: Optional[int] = None) -> dict[int, Tube]:
    """Group pixels by persistent segment id over frames[start:start+length].

    Requires track-consistent ids: the same id must keep one category across
    the window's frames.
    """
    if length is None:
        length = len(frames) - start
    window = frames[start:start + length]
    if len(window) != length or length < 1:
        raise ValueError(f"window [{start}, {start + length}) outside sequence "
                         f"of {len(frames)} frames")
    shape = window[0].segment_ids.shape
    info: dict[int, SegmentInfo] = {}
    for t, frame in enumerate(window):
        if frame.segment_ids.shape != shape:
            raise ValueError("all frames in a window must share dimensions")
        for s in frame.segments_info:
            if s.segment_id in info:
                prev = info[s.segment_id]
                if (prev.category_id, prev.is_thing) != (s.category_id, s.is_thing):
                    raise ValueError(
                        f"segment id {s.segment_id} changes category within the window "
                        f"({prev.category_id} -> {s.category_id})")
            else:
                info[s.segment_id] = s
    stack = np.stack([f.segment_ids for f in window])
    flat = stack.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_ids = flat[order]
    boundaries = np.nonzero(np.diff(sorted_ids))[0] + 1
    groups = np.split(order, boundaries)
    tubes: dict[int, Tube] = {}
    for group in groups:
        sid = int(flat[group[0]])
        if sid == VOID_ID:
            continue
        s = info[sid]
        tubes[sid] = Tube(sid, s.category_id, s.is_thing, len(group), np.sort(group))
    return tubes


def _window_stats(preds: Sequence[PanopticMap], gts: Sequence[PanopticMap],
                  start: int, length: int, cats: CategoryTable) -> PqStats:
    """Tube-level matching stats for one temporal window."""
    gt_stack = np.stack([f.segment_ids for f in gts[start:start + length]])
    pred_stack = np.stack([f.segment_ids for f in preds[start:start + length]])
    if gt_stack.shape != pred_stack.shape:
        raise ValueError(
            f"stack dims differ: pred {pred_stack.shape} vs gt {gt_stack.shape}")
    gt_tubes = build_tubes(gts, start, length)
    pred_tubes = build_tubes(preds, start, length)
    for label, tubes in (("gt", gt_tubes), ("pred", pred_tubes)):
        for tube in tubes.values():
            if tube.category_id not in cats:
                raise ValueError(f"{label} tube {tube.segment_id} has unknown "
                                 f"category {tube.category_id}")
    pairs = _pair_counts(gt_stack, pred_stack)
    gt_areas = {sid: t.area for sid, t in gt_tubes.items()}
    pred_areas = {sid: t.area for sid, t in pred_tubes.items()}
    gt_info = {sid: SegmentInfo(sid, t.category_id, t.is_thing) for sid, t in gt_tubes.items()}
    pred_info = {sid: SegmentInfo(sid, t.category_id, t.is_thing)
                 for sid, t in pred_tubes.items()}
    stats = PqStats()
    matches, matched_gt, matched_pred = _match_pairs(
        pairs, gt_areas, pred_areas, gt_info, pred_info)
    for m in matches:
        cls = stats[gt_info[m.gt_id].category_id]
        cls.tp += 1
        cls.iou_sum += m.iou
    for g in sorted(gt_tubes):
        if g not in matched_gt:
            stats[gt_tubes[g].category_id].fn += 1
    for p in sorted(pred_tubes):
        if p in matched_pred:
            continue
        if pairs.get((VOID_ID, p), 0) / pred_tubes[p].area > 0.5:
            continue
        stats[pred_tubes[p].category_id].fp += 1
    return stats


@dataclass(frozen=True)
class VpqConfig:
    """Window labels and their lengths in sampled frames.

    The default labels {0, 5, 10, 15} follow the every-5th-frame sampling
    convention and map to windows of 1..4 sampled frames.
    """

    k_labels: tuple[int, ...] = (0, 5, 10, 15)
    frames_per_label: Mapping[int, int] = field(
        default_factory=lambda: {0: 1, 5: 2, 10: 3, 15: 4})

    def __post_init__(self):
        for k in self.k_labels:
            if k not in self.frames_per_label:
                raise ValueError(f"k label {k} has no window length")
            if self.frames_per_label[k] < 1:
                raise ValueError(f"window length for k={k} must be >= 1")


@dataclass
class VpqKResult:
    k: int
    window: int
    vpq: float
    vpq_things: float
    vpq_stuff: float
    per_class: dict[int, PqClassResult]


@dataclass
class VpqResult:
    vpq: float
    vpq_things: float
    vpq_stuff: float
    per_k: list[VpqKResult]
    skipped_k: list[int]

    def to_report(self) -> dict:
        return {
            "mean": self.vpq,
            "things": self.vpq_things,
            "stuff": self.vpq_stuff,
            "per_k": [{"k": r.k, "window": r.window, "all": r.vpq,
                       "things": r.vpq_things, "stuff": r.vpq_stuff}
                      for r in self.per_k],
            "skipped_k": list(self.skipped_k),
        }


def _map_ordered(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def compute_vpq(pred_frames: Sequence[PanopticMap], gt_frames: Sequence[PanopticMap],
                cats: CategoryTable, cfg: VpqConfig = VpqConfig(),
                threads: int = 1) -> VpqResult:
    """Video Panoptic Quality over an aligned, track-consistent sequence.

    For each window label, tube stats from every window start position are
    accumulated into per-class totals before the PQ ratio; labels whose
    window exceeds the sequence length are skipped and reported as absent.
    The headline VPQ is the mean over the evaluated labels.
    """
    if len(pred_frames) != len(gt_frames):
        raise ValueError(
            f"got {len(pred_frames)} predictions for {len(gt_frames)} ground truths")
    per_k = []
    skipped = []
    for k in cfg.k_labels:
        window = cfg.frames_per_label[k]
        if window > len(gt_frames):
            skipped.append(k)
            continue
        starts = list(range(len(gt_frames) - window + 1))
        stats = PqStats()
        for s in _map_ordered(
                lambda start: _window_stats(pred_frames, gt_frames, start, window, cats),
                starts, threads):
            stats += s
        res = _average(stats, cats)
        per_k.append(VpqKResult(k, window, res.pq, res.pq_things, res.pq_stuff,
                                res.per_class))
    if per_k:
        mean = float(np.mean([r.vpq for r in per_k]))
        mean_th = float(np.mean([r.vpq_things for r in per_k]))
        mean_st = float(np.mean([r.vpq_stuff for r in per_k]))
    else:
        mean = mean_th = mean_st = 0.0
    return VpqResult(mean, mean_th, mean_st, per_k, skipped)
