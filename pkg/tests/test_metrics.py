"""PQ/VPQ engines against worked examples and brute-force oracles."""

import numpy as np
import pytest

from oracles import (TEST_CATS, brute_force_pq, brute_force_vpq_k,
                     perturb_panoptic, random_panoptic,
                     random_panoptic_sequence)
from pvkit.metrics import (PanopticMap, SegmentInfo, VpqConfig, build_tubes,
                           compute_pq, compute_vpq, match_segments)


def _two_segment_maps(gt_px, pred_px, overlap_px, category=1, width=64):
    """1-D strips laid out to hit exact pixel counts: gt [0, gt_px),
    pred [gt_px - overlap, gt_px - overlap + pred_px). The rest of the gt
    map is a background stuff segment so no pred pixel falls on void."""
    total = gt_px + pred_px + 8
    h = (total + width - 1) // width + 1
    gt = np.full((h, width), 9, dtype=np.uint32)
    pred = np.zeros((h, width), dtype=np.uint32)
    flat_gt = gt.reshape(-1)
    flat_pred = pred.reshape(-1)
    flat_gt[:gt_px] = 1
    start = gt_px - overlap_px
    flat_pred[start:start + pred_px] = 2
    gt_map = PanopticMap.with_info(gt, {1: (category, True), 9: (3, False)})
    pred_map = PanopticMap.with_info(pred, {2: (category, True)})
    return pred_map, gt_map


class TestMatchSegments:
    def test_perfect_prediction_all_iou_one(self):
        rng = np.random.default_rng(1)
        gt = random_panoptic(rng)
        matches = match_segments(gt, gt)
        present = {s.segment_id for s in gt.segments_info}
        assert {m.gt_id for m in matches} == present
        for m in matches:
            assert m.iou == 1.0

    def test_60_overlap_no_match(self):
        # IoU = 60 / (100 + 100 - 60) = 0.4286 <= 0.5
        pred, gt = _two_segment_maps(100, 100, 60)
        assert match_segments(pred, gt) == []

    def test_void_excluded_from_union(self):
        # same geometry but background left void: the 20 off-segment pred
        # pixels no longer count toward the union
        pred, gt = _two_segment_maps(100, 100, 80)
        ids = gt.segment_ids.copy()
        ids[ids == 9] = 0
        gt_void = PanopticMap.with_info(ids, {1: (1, True)})
        matches = match_segments(pred, gt_void)
        assert matches[0].iou == pytest.approx(80 / 100, abs=1e-12)

    def test_80_overlap_match(self):
        # IoU = 80 / 120 = 0.6667
        pred, gt = _two_segment_maps(100, 100, 80)
        matches = match_segments(pred, gt)
        assert len(matches) == 1
        assert matches[0].iou == pytest.approx(80 / 120, abs=1e-12)

    def test_category_mismatch_blocks_match(self):
        pred, gt = _two_segment_maps(100, 100, 90)
        pred.segments_info = [SegmentInfo(2, 2, True)]
        assert match_segments(pred, gt) == []

    def test_dim_mismatch_rejected(self):
        a = PanopticMap.with_info(np.zeros((4, 4), dtype=np.uint32), {})
        b = PanopticMap.with_info(np.zeros((4, 5), dtype=np.uint32), {})
        with pytest.raises(ValueError, match="dims"):
            match_segments(a, b)


class TestComputePq:
    def test_perfect_prediction_scores_one(self):
        rng = np.random.default_rng(2)
        gts = [random_panoptic(rng) for _ in range(3)]
        res = compute_pq(gts, gts, TEST_CATS)
        assert res.pq == 1.0
        # things/stuff are 1.0 whenever that bucket participated
        for val in (res.pq_things, res.pq_stuff):
            assert val in (0.0, 1.0) or val == pytest.approx(1.0)

    def test_single_matched_pair_formula(self):
        pred, gt = _two_segment_maps(100, 100, 80)
        res = compute_pq([pred], [gt], TEST_CATS)
        cls = res.per_class[1]
        assert cls.pq == pytest.approx(80 / 120, abs=1e-12)
        assert (cls.tp, cls.fp, cls.fn) == (1, 0, 0)
        assert cls.iou_sum <= cls.tp
        assert cls.iou_sum > 0.5 * cls.tp
        # unmatched background (class 3) contributes one FN, so the overall
        # mean is (2/3 + 0) / 2
        assert res.pq == pytest.approx((80 / 120) / 2, abs=1e-12)

    def test_void_heavy_prediction_not_fp(self):
        ids_gt = np.zeros((10, 10), dtype=np.uint32)
        ids_gt[:5, :] = 1                        # one gt segment, rest void
        gt = PanopticMap.with_info(ids_gt, {1: (1, True)})
        ids_pred = np.zeros((10, 10), dtype=np.uint32)
        ids_pred[4:, :] = 2                      # 60 px, 50 on void -> 83% void
        ids_pred[4, :] = 0
        pred = PanopticMap.with_info(ids_pred, {2: (1, True)})
        res = compute_pq([pred], [gt], TEST_CATS)
        assert res.per_class[1].fp == 0
        assert res.per_class[1].fn == 1

    def test_majority_non_void_prediction_is_fp(self):
        ids_gt = np.zeros((10, 10), dtype=np.uint32)
        ids_gt[:5, :] = 1
        gt = PanopticMap.with_info(ids_gt, {1: (1, True)})
        ids_pred = np.zeros((10, 10), dtype=np.uint32)
        ids_pred[3:5, :] = 2                     # 20 px all on gt segment rows
        pred = PanopticMap.with_info(ids_pred, {2: (2, True)})
        res = compute_pq([pred], [gt], TEST_CATS)
        assert res.per_class[2].fp == 1

    def test_absent_classes_skipped(self):
        ids = np.zeros((6, 6), dtype=np.uint32)
        ids[:3, :] = 1
        gt = PanopticMap.with_info(ids, {1: (1, True)})
        res = compute_pq([gt], [gt], TEST_CATS)
        assert set(res.per_class) == {1}
        assert res.pq == 1.0 and res.pq_stuff == 0.0

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            gt = random_panoptic(rng)
            pred = perturb_panoptic(rng, gt)
            base = compute_pq([pred], [gt], TEST_CATS)
            gt2 = PanopticMap.with_info(
                np.where(gt.segment_ids > 0, gt.segment_ids + 500, 0),
                {s.segment_id + 500: (s.category_id, s.is_thing)
                 for s in gt.segments_info})
            pred2 = PanopticMap.with_info(
                np.where(pred.segment_ids > 0, pred.segment_ids * 7 + 3, 0),
                {s.segment_id * 7 + 3: (s.category_id, s.is_thing)
                 for s in pred.segments_info})
            again = compute_pq([pred2], [gt2], TEST_CATS)
            assert again.pq == pytest.approx(base.pq, abs=1e-12)
            assert again.pq_things == pytest.approx(base.pq_things, abs=1e-12)
            assert again.pq_stuff == pytest.approx(base.pq_stuff, abs=1e-12)

    def test_monotone_degradation(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            gt = random_panoptic(rng)
            if len(gt.segments_info) < 2:
                continue
            pred = PanopticMap.with_info(
                gt.segment_ids.copy(),
                {s.segment_id: (s.category_id, s.is_thing) for s in gt.segments_info})
            base = compute_pq([pred], [gt], TEST_CATS)
            # flip some pixels of the first segment to the second segment
            a, b = gt.segments_info[0].segment_id, gt.segments_info[1].segment_id
            flipped = pred.segment_ids.copy()
            ys, xs = np.nonzero(flipped == a)
            take = max(1, len(ys) // 4)
            flipped[ys[:take], xs[:take]] = b
            worse_info = {s.segment_id: (s.category_id, s.is_thing)
                          for s in pred.segments_info if (flipped == s.segment_id).any()}
            worse = PanopticMap.with_info(flipped, worse_info)
            degraded = compute_pq([worse], [gt], TEST_CATS)
            for cid, cls in degraded.per_class.items():
                if cid in base.per_class:
                    assert cls.iou_sum <= base.per_class[cid].iou_sum + 1e-12

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for i in range(20):
            gt = random_panoptic(rng, 24, 24)
            pred = perturb_panoptic(rng, gt) if i % 2 else random_panoptic(rng, 24, 24)
            res = compute_pq([pred], [gt], TEST_CATS)
            want_all, want_th, want_st, want_cls = brute_force_pq([pred], [gt], TEST_CATS)
            assert res.pq == pytest.approx(want_all, abs=1e-9)
            assert res.pq_things == pytest.approx(want_th, abs=1e-9)
            assert res.pq_stuff == pytest.approx(want_st, abs=1e-9)
            assert set(res.per_class) == set(want_cls)
            for val in (res.pq, res.pq_things, res.pq_stuff):
                assert 0.0 <= val <= 1.0

    def test_threads_do_not_change_result(self):
        rng = np.random.default_rng(6)
        gts = [random_panoptic(rng) for _ in range(6)]
        preds = [perturb_panoptic(rng, g) for g in gts]
        a = compute_pq(preds, gts, TEST_CATS, threads=1)
        b = compute_pq(preds, gts, TEST_CATS, threads=4)
        assert a.pq == b.pq and a.pq_things == b.pq_things

    def test_misaligned_lists_rejected(self):
        rng = np.random.default_rng(7)
        gt = random_panoptic(rng)
        with pytest.raises(ValueError, match="predictions"):
            compute_pq([gt, gt], [gt], TEST_CATS)


class TestBuildTubes:
    def test_window_one_equals_frame_segments(self):
        rng = np.random.default_rng(8)
        seq = random_panoptic_sequence(rng)
        tubes = build_tubes(seq, start=1, length=1)
        frame = seq[1]
        for sid, tube in tubes.items():
            assert tube.area == int((frame.segment_ids == sid).sum())
        assert set(tubes) == {s.segment_id for s in frame.segments_info
                              if (frame.segment_ids == s.segment_id).any()}

    def test_id_swap_tube_iou_one_third(self):
        # two equal segments; prediction swaps their ids in frame 2
        ids1 = np.zeros((4, 8), dtype=np.uint32)
        ids1[:, :4] = 1
        ids1[:, 4:] = 2
        ids2_swapped = np.where(ids1 == 1, 2, 1).astype(np.uint32)
        info = {1: (1, True), 2: (1, True)}
        gt = [PanopticMap.with_info(ids1, info), PanopticMap.with_info(ids1, info)]
        pred = [PanopticMap.with_info(ids1, info),
                PanopticMap.with_info(ids2_swapped, info)]
        gt_tubes = build_tubes(gt, 0, 2)
        pred_tubes = build_tubes(pred, 0, 2)
        for sid in (1, 2):
            inter = np.intersect1d(gt_tubes[sid].pixels, pred_tubes[sid].pixels).size
            union = gt_tubes[sid].area + pred_tubes[sid].area - inter
            assert inter / union == pytest.approx(1 / 3, abs=1e-12)

    def test_consistent_ids_iou_one(self):
        rng = np.random.default_rng(9)
        seq = random_panoptic_sequence(rng, frames=3)
        a = build_tubes(seq, 0, 3)
        b = build_tubes(seq, 0, 3)
        for sid in a:
            assert np.array_equal(a[sid].pixels, b[sid].pixels)

    def test_category_switch_rejected(self):
        ids = np.full((2, 2), 1, dtype=np.uint32)
        f0 = PanopticMap.with_info(ids, {1: (1, True)})
        f1 = PanopticMap.with_info(ids, {1: (2, True)})
        with pytest.raises(ValueError, match="category"):
            build_tubes([f0, f1], 0, 2)


class TestComputeVpq:
    def test_window_one_equals_direct_pq_exactly(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            gts = random_panoptic_sequence(rng, frames=3)
            preds = [perturb_panoptic(rng, g) for g in gts]
            # keep prediction ids consistent across frames: perturb per frame
            # breaks id persistence, which window 1 does not need
            direct = compute_pq(preds, gts, TEST_CATS)
            tube = compute_vpq(preds, gts, TEST_CATS,
                               VpqConfig((0,), {0: 1}))
            assert tube.per_k[0].vpq == direct.pq
            assert tube.per_k[0].vpq_things == direct.pq_things
            assert tube.per_k[0].vpq_stuff == direct.pq_stuff

    def test_perfect_consistent_prediction_all_k(self):
        rng = np.random.default_rng(11)
        gts = random_panoptic_sequence(rng, frames=4)
        res = compute_vpq(gts, gts, TEST_CATS)
        assert res.vpq == 1.0
        for r in res.per_k:
            assert r.vpq == 1.0
        assert res.skipped_k == []

    def test_id_switch_sequence_matches_brute_force(self):
        ids1 = np.zeros((4, 8), dtype=np.uint32)
        ids1[:, :4] = 1
        ids1[:, 4:] = 2
        swapped = np.where(ids1 == 1, 2, 1).astype(np.uint32)
        info = {1: (1, True), 2: (1, True)}
        gts = [PanopticMap.with_info(ids1, info) for _ in range(4)]
        preds = [PanopticMap.with_info(ids1, info),
                 PanopticMap.with_info(ids1, info),
                 PanopticMap.with_info(swapped, info),
                 PanopticMap.with_info(swapped, info)]
        cfg = VpqConfig((0, 5, 10, 15), {0: 1, 5: 2, 10: 3, 15: 4})
        res = compute_vpq(preds, gts, TEST_CATS, cfg)
        for r in res.per_k:
            want_all, want_th, want_st, _ = brute_force_vpq_k(
                preds, gts, TEST_CATS, r.window)
            assert r.vpq == pytest.approx(want_all, abs=1e-9)
            assert r.vpq_things == pytest.approx(want_th, abs=1e-9)

    def test_random_sequences_match_brute_force(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            gts = random_panoptic_sequence(rng, frames=3, height=12, width=12)
            # prediction: same blobs with swapped ids on the last frame
            preds = [PanopticMap.with_info(g.segment_ids.copy(),
                                           {s.segment_id: (s.category_id, s.is_thing)
                                            for s in g.segments_info})
                     for g in gts]
            cfg = VpqConfig((0, 5, 10), {0: 1, 5: 2, 10: 3})
            res = compute_vpq(preds, gts, TEST_CATS, cfg)
            for r in res.per_k:
                want_all, want_th, want_st, _ = brute_force_vpq_k(
                    preds, gts, TEST_CATS, r.window)
                assert r.vpq == pytest.approx(want_all, abs=1e-9)

    def test_short_sequence_skips_k(self):
        rng = np.random.default_rng(13)
        gts = random_panoptic_sequence(rng, frames=2)
        res = compute_vpq(gts, gts, TEST_CATS)
        assert res.skipped_k == [10, 15]
        assert [r.k for r in res.per_k] == [0, 5]
        assert res.vpq == 1.0

    def test_track_relabeling_invariance(self):
        rng = np.random.default_rng(14)
        gts = random_panoptic_sequence(rng, frames=3)
        preds = [PanopticMap.with_info(g.segment_ids.copy(),
                                       {s.segment_id: (s.category_id, s.is_thing)
                                        for s in g.segments_info})
                 for g in gts]
        base = compute_vpq(preds, gts, TEST_CATS)
        relabeled = [PanopticMap.with_info(
            np.where(p.segment_ids > 0, p.segment_ids + 40, 0),
            {s.segment_id + 40: (s.category_id, s.is_thing)
             for s in p.segments_info}) for p in preds]
        again = compute_vpq(relabeled, gts, TEST_CATS)
        assert again.vpq == pytest.approx(base.vpq, abs=1e-12)

    def test_report_shape(self):
        rng = np.random.default_rng(15)
        gts = random_panoptic_sequence(rng, frames=4)
        res = compute_vpq(gts, gts, TEST_CATS)
        doc = res.to_report()
        assert list(doc) == ["mean", "things", "stuff", "per_k", "skipped_k"]
        assert [e["k"] for e in doc["per_k"]] == [0, 5, 10, 15]
