"""End-to-end pipeline on a bundled synthetic sequence.

Runs disparity decoding, LiDAR simulation, ray drop, completion, fusion,
time-aware decoding, tracking, and PQ/VPQ evaluation on a 4-frame synthetic
scene, writing every intermediate artifact plus a JSON report. The decoder is
untrained, so its outputs are diagnostic; the metric self-check evaluates the
synthetic ground truth against itself and must come out at PQ = VPQ = 1.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from . import __version__
from .decoder import (DecoderConfig, DecoderWeights, LaqConfig, QuerySet,
                      laq_head, laq_loss, run_decoder, save_query_set, taq_select)
from .depth import (CameraIntrinsics, CompletionConfig, LidarSimConfig,
                    complete_depth, depth_to_disparity_values,
                    disparity_to_depth, ray_drop, simulate_lidar)
from .formats import (FrameEntry, SequenceManifest, write_categories,
                      write_depth_png, write_intrinsics, write_manifest,
                      write_panoptic_png, write_png16)
from .fusion import FusionParams, multi_scale_fuse
from .metrics import VpqConfig, compute_pq, compute_vpq
from .rng import hash_color
from .synth import build_feature_pyramid, make_scene
from .tracking import MatchConfig, SequenceTracker, track_report

DEMO_FRAMES = 4
DEMO_HEIGHT = 64
DEMO_WIDTH = 128
NUM_QUERIES = 8
EMBED_DIM = 16
NUM_CLASSES = 4
FEATURE_CHANNELS = 8


def _write_overlay(pmap, path: str) -> None:
    ids = pmap.segment_ids
    rgb = np.zeros(ids.shape + (3,), dtype=np.uint8)
    for sid in np.unique(ids):
        if sid == 0:
            continue
        rgb[ids == sid] = hash_color(int(sid))
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def run_demo(out_dir: str, seed: int = 0, threads: int = 1,
             taq: bool = True) -> dict:
    """Execute the full pipeline; returns (and writes) the report dict."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("gt", "depth", "queries", "overlay"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    scene = make_scene(DEMO_FRAMES, DEMO_HEIGHT, DEMO_WIDTH, seed)
    intr = CameraIntrinsics(focal_y=120.0, principal_y=12.0,
                            focal_x=2200.0, principal_x=64.0, baseline=0.21)
    write_intrinsics(intr, os.path.join(out_dir, "intrinsics.json"))
    write_categories(scene.categories, os.path.join(out_dir, "categories.json"))

    sim_cfg = LidarSimConfig(beams=32, keep_ratio=0.7, seed=seed)
    comp_cfg = CompletionConfig()
    dec_cfg = DecoderConfig(layers=3, seed=seed)
    laq_cfg = LaqConfig()

    weights = DecoderWeights.create(dec_cfg, EMBED_DIM, FEATURE_CHANNELS, NUM_CLASSES)
    x_learned = DecoderWeights.initial_queries(NUM_QUERIES, EMBED_DIM, seed)
    tracker = SequenceTracker(MatchConfig(alpha_position=0.0))

    frames = []
    depth_stats = []
    decode_stats = []
    assignments = []
    query_sets = []
    prev_out = None
    for t in range(DEMO_FRAMES):
        gt_png = os.path.join(out_dir, "gt", f"frame_{t:04d}.png")
        gt_json = os.path.join(out_dir, "gt", f"frame_{t:04d}.json")
        write_panoptic_png(scene.panoptic[t], gt_png, gt_json)
        _write_overlay(scene.panoptic[t],
                       os.path.join(out_dir, "overlay", f"frame_{t:04d}.png"))

        disp_raw = depth_to_disparity_values(scene.depth[t], intr)
        disp_png = os.path.join(out_dir, "depth", f"disparity_{t:04d}.png")
        write_png16(disp_raw, disp_png)
        dense = disparity_to_depth(disp_raw, intr)
        sparse = ray_drop(simulate_lidar(dense, intr, sim_cfg),
                          sim_cfg.keep_ratio, seed + t)
        completed = complete_depth(sparse, comp_cfg)
        sparse_png = os.path.join(out_dir, "depth", f"sparse_{t:04d}.png")
        completed_png = os.path.join(out_dir, "depth", f"completed_{t:04d}.png")
        write_depth_png(sparse.values, sparse_png)
        write_depth_png(completed.values, completed_png)
        depth_stats.append({
            "frame": t,
            "dense_valid": dense.valid_count(),
            "sparse_valid": sparse.valid_count(),
            "completed_valid": completed.valid_count(),
            "completed_min": float(completed.values[completed.valid_mask()].min()),
            "completed_max": float(completed.values[completed.valid_mask()].max()),
        })

        img_pyr = build_feature_pyramid(scene.images[t], FEATURE_CHANNELS, seed=seed)
        depth_pyr = build_feature_pyramid(completed.values / comp_cfg.max_depth_cap,
                                          FEATURE_CHANNELS, seed=seed + 1)
        params = [FusionParams.random(FEATURE_CHANNELS, FEATURE_CHANNELS, seed + 100 + s)
                  for s in range(len(img_pyr))]
        fused = multi_scale_fuse(img_pyr, depth_pyr, params)

        x_init = x_learned if (prev_out is None or not taq) \
            else taq_select(prev_out, x_learned)
        out = run_decoder(x_init, fused, dec_cfg, weights)
        centers = laq_head(out, laq_cfg, weights)
        qs = QuerySet(out.embeddings, class_logits=out.class_logits,
                      centers=centers, mask_logits=out.mask_logits)
        prev_out = qs
        query_sets.append(qs)

        prefix = os.path.join(out_dir, "queries", f"frame_{t:04d}")
        save_query_set(qs, prefix)
        assignments.append(tracker.update(qs))

        gt_centers = np.array(list(scene.thing_centers[t].values()))
        n_things = gt_centers.shape[0]
        loss, _ = laq_loss(centers[:n_things], gt_centers,
                           np.ones(n_things, dtype=bool), laq_cfg)
        decode_stats.append({
            "frame": t,
            "non_empty_slots": int(qs.non_empty_mask().sum()),
            "fused_feature_max_abs": float(max(np.abs(f.values).max() for f in fused)),
            "class_logit_max_abs": float(np.abs(qs.class_logits).max()),
            "laq_loss_vs_gt_centers": loss,
        })

        frames.append(FrameEntry(
            frame_index=t * 5,
            depth_path=os.path.relpath(completed_png, out_dir),
            panoptic_path=os.path.relpath(gt_png, out_dir),
            queries_path=os.path.relpath(prefix, out_dir),
        ))

    write_manifest(SequenceManifest(frames, sampling_stride=5),
                   os.path.join(out_dir, "sequence.json"))

    report_tracks = track_report(assignments, query_sets)
    with open(os.path.join(out_dir, "tracks.json"), "w") as f:
        json.dump(report_tracks, f, indent=2)
        f.write("\n")

    # metric self-check: the ground truth against itself must score 1.0
    pq = compute_pq(scene.panoptic, scene.panoptic, scene.categories, threads=threads)
    vpq = compute_vpq(scene.panoptic, scene.panoptic, scene.categories,
                      VpqConfig(), threads=threads)

    track_ids = sorted({tid for a in assignments for tid in a.track_ids
                        if tid is not None})
    report = {
        "toolkit_version": __version__,
        "command": "demo",
        "config": {
            "seed": seed, "threads": threads, "taq": taq,
            "frames": DEMO_FRAMES, "height": DEMO_HEIGHT, "width": DEMO_WIDTH,
            "queries": NUM_QUERIES, "embed_dim": EMBED_DIM,
            "classes": NUM_CLASSES, "beams": sim_cfg.beams,
            "keep_ratio": sim_cfg.keep_ratio, "decoder_layers": dec_cfg.layers,
        },
        "depth": depth_stats,
        "decode": decode_stats,
        "tracking": {"distinct_track_ids": len(track_ids)},
        "eval_self_check": {"pq": pq.to_report(), "vpq": vpq.to_report()},
    }
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    return report
