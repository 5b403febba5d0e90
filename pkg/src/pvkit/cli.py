"""Command-line entry point.

Subcommands cover the whole pipeline: depth simulation/completion, feature
fusion, toy decoding with time-aware queries, tracking, PQ/VPQ evaluation,
and an end-to-end synthetic demo. Every run writes a JSON report embedding
the toolkit version and the fully resolved configuration.

Exit codes: 0 success, 1 validation error (bad flags or inconsistent
inputs), 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import __version__
from .decoder import (DecoderConfig, DecoderWeights, LaqConfig, QuerySet,
                      laq_head, load_query_set, run_decoder, save_query_set,
                      taq_select)
from .depth import (CompletionConfig, DepthMap, LidarSimConfig, complete_depth,
                    disparity_to_depth, ray_drop, simulate_lidar)
from .demo import run_demo
from .formats import (FormatError, FrameEntry, SequenceManifest,
                      read_categories, read_depth_png, read_intrinsics,
                      read_manifest, read_panoptic_png, read_png16,
                      read_tensor, write_depth_png, write_manifest,
                      write_tensor)
from .fusion import (FeatureMap, FusionParams, fusion_params_from_json,
                     multi_scale_fuse, sum_fuse)
from .metrics import VpqConfig, compute_pq, compute_vpq
from .synth import build_feature_pyramid
from .tracking import MatchConfig, SequenceTracker, track_report

log = logging.getLogger("pvkit")


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad flags, matching our exit codes."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_dict(args: argparse.Namespace) -> dict:
    skip = {"handler"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_report(path: str, command: str, args: argparse.Namespace,
                  payload: dict) -> None:
    report = {"toolkit_version": __version__, "command": command,
              "config": _config_dict(args)}
    report.update(payload)
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")


def _default_report_path(output: str) -> str:
    return output + ".report.json"


# --- depth -------------------------------------------------------------------

def cmd_depth_from_disparity(args) -> int:
    intr = read_intrinsics(args.intrinsics)
    raw = read_png16(args.input)
    depth = disparity_to_depth(raw, intr)
    write_depth_png(depth.values, args.output)
    _write_report(args.report or _default_report_path(args.output),
                  "depth from-disparity", args, {
                      "valid_pixels": depth.valid_count(),
                      "depth_min": float(depth.values[depth.valid_mask()].min()),
                      "depth_max": float(depth.values[depth.valid_mask()].max()),
                  })
    return 0


def cmd_depth_simulate(args) -> int:
    intr = read_intrinsics(args.intrinsics)
    dense = DepthMap(read_depth_png(args.input, "depth256"))
    cfg = LidarSimConfig(beams=args.beams,
                         vertical_fov_deg=(args.fov_min, args.fov_max),
                         keep_ratio=args.keep, seed=args.seed)
    sparse = simulate_lidar(dense, intr, cfg)
    if cfg.keep_ratio < 1.0:
        sparse = ray_drop(sparse, cfg.keep_ratio, cfg.seed)
    write_depth_png(sparse.values, args.output)
    _write_report(args.report or _default_report_path(args.output),
                  "depth simulate", args, {
                      "input_valid_pixels": dense.valid_count(),
                      "output_valid_pixels": sparse.valid_count(),
                      "valid_rows": int(np.unique(
                          np.nonzero(sparse.valid_mask())[0]).size),
                  })
    return 0


def cmd_depth_complete(args) -> int:
    sparse = DepthMap(read_depth_png(args.input, "depth256"))
    cfg = CompletionConfig(enable_blur=not args.no_blur, max_depth_cap=args.cap)
    completed = complete_depth(sparse, cfg)
    write_depth_png(completed.values, args.output)
    _write_report(args.report or _default_report_path(args.output),
                  "depth complete", args, {
                      "input_valid_pixels": sparse.valid_count(),
                      "output_valid_pixels": completed.valid_count(),
                  })
    return 0


# --- fuse ----------------------------------------------------------------------

def cmd_fuse(args) -> int:
    if len(args.image_features) != len(args.depth_features):
        raise ValueError(
            f"{len(args.image_features)} image and {len(args.depth_features)} "
            f"depth feature files; counts must match")
    if len(args.output) != len(args.image_features):
        raise ValueError("one --output per scale is required")
    imgs = [FeatureMap(read_tensor(p), i + 1) for i, p in enumerate(args.image_features)]
    deps = [FeatureMap(read_tensor(p), i + 1) for i, p in enumerate(args.depth_features)]
    if args.mode == "sum":
        fused = [sum_fuse(a, b) for a, b in zip(imgs, deps)]
    else:
        if not args.params:
            raise ValueError("--params is required for dynamic fusion")
        params_list = []
        for path in args.params:
            with open(path) as f:
                params_list.append(fusion_params_from_json(f.read()))
        if len(params_list) == 1 and len(imgs) > 1:
            params_list = params_list * len(imgs)
        fused = multi_scale_fuse(imgs, deps, params_list)
    for fmap, path in zip(fused, args.output):
        write_tensor(fmap.values, path)
    _write_report(args.report or _default_report_path(args.output[0]),
                  "fuse", args, {
                      "scales": len(fused),
                      "output_max_abs": float(max(np.abs(f.values).max() for f in fused)),
                  })
    return 0


# --- decode --------------------------------------------------------------------

def cmd_decode(args) -> int:
    manifest = read_manifest(args.manifest)
    if not manifest.frames:
        raise ValueError(f"{args.manifest}: manifest has no frames")
    os.makedirs(args.output_dir, exist_ok=True)
    base = os.path.dirname(os.path.abspath(args.manifest))
    cfg = DecoderConfig(layers=args.layers, seed=args.seed)
    laq_cfg = LaqConfig()
    weights = DecoderWeights.create(cfg, args.embed_dim, args.channels, args.classes)
    x_learned = DecoderWeights.initial_queries(args.queries, args.embed_dim, args.seed)
    out_frames = []
    prev_out = None
    for entry in manifest.frames:
        if entry.depth_path is None:
            raise ValueError(f"frame {entry.frame_index}: decode requires depth_path")
        depth = read_depth_png(os.path.join(base, entry.depth_path), "depth256")
        depth_pyr = build_feature_pyramid(depth / max(1.0, depth.max()),
                                          args.channels, seed=args.seed + 1)
        if entry.image_path is not None:
            img = np.asarray(Image.open(os.path.join(base, entry.image_path))
                             .convert("L"), dtype=np.float64) / 255.0
            img_pyr = build_feature_pyramid(img, args.channels, seed=args.seed)
            params = [FusionParams.initial(args.channels, args.channels)
                      for _ in img_pyr]
            features = multi_scale_fuse(img_pyr, depth_pyr, params)
        else:
            features = depth_pyr
        x_init = x_learned if (prev_out is None or not args.taq) \
            else taq_select(prev_out, x_learned)
        out = run_decoder(x_init, features, cfg, weights)
        centers = laq_head(out, laq_cfg, weights)
        qs = QuerySet(out.embeddings, class_logits=out.class_logits,
                      centers=centers, mask_logits=out.mask_logits)
        prev_out = qs
        prefix = os.path.join(args.output_dir, f"frame_{entry.frame_index:04d}")
        save_query_set(qs, prefix)
        out_frames.append(FrameEntry(
            frame_index=entry.frame_index,
            depth_path=entry.depth_path,
            image_path=entry.image_path,
            panoptic_path=entry.panoptic_path,
            queries_path=os.path.relpath(prefix, args.output_dir)))
    out_manifest = os.path.join(args.output_dir, "decoded.json")
    write_manifest(SequenceManifest(out_frames, manifest.sampling_stride), out_manifest)
    _write_report(args.report or os.path.join(args.output_dir, "decode.report.json"),
                  "decode", args, {"frames": len(out_frames),
                                   "manifest": out_manifest})
    return 0


# --- track ---------------------------------------------------------------------

def cmd_track(args) -> int:
    manifest = read_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    query_sets = []
    for entry in manifest.frames:
        if entry.queries_path is None:
            raise ValueError(f"frame {entry.frame_index}: track requires queries_path")
        query_sets.append(load_query_set(os.path.join(base, entry.queries_path)))
    cfg = MatchConfig(alpha_position=args.alpha, match_scope=args.scope)
    tracker = SequenceTracker(cfg)
    assignments = [tracker.update(qs) for qs in query_sets]
    report = track_report(assignments, query_sets)
    report["toolkit_version"] = __version__
    report["config"] = _config_dict(args)
    with open(args.output, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    return 0


# --- eval ----------------------------------------------------------------------

def _load_panoptic_dir(directory: str):
    pngs = sorted(p for p in os.listdir(directory) if p.endswith(".png"))
    if not pngs:
        raise ValueError(f"{directory}: no panoptic PNG files found")
    maps = []
    for name in pngs:
        sidecar = os.path.join(directory, name[:-4] + ".json")
        if not os.path.exists(sidecar):
            raise ValueError(f"{directory}: missing segments_info sidecar for {name}")
        maps.append(read_panoptic_png(os.path.join(directory, name), sidecar))
    return pngs, maps


def _paired_maps(pred_dir: str, gt_dir: str):
    gt_names, gts = _load_panoptic_dir(gt_dir)
    pred_names, preds = _load_panoptic_dir(pred_dir)
    if gt_names != pred_names:
        raise ValueError(
            f"prediction and ground-truth directories do not pair up: "
            f"{sorted(set(gt_names) ^ set(pred_names))}")
    return preds, gts


def cmd_eval_pq(args) -> int:
    cats = read_categories(args.categories)
    preds, gts = _paired_maps(args.pred_dir, args.gt_dir)
    result = compute_pq(preds, gts, cats, threads=args.threads)
    _write_report(args.output, "eval pq", args,
                  {"frames": len(gts), "pq": result.to_report()})
    return 0


def cmd_eval_vpq(args) -> int:
    cats = read_categories(args.categories)
    preds, gts = _paired_maps(args.pred_dir, args.gt_dir)
    try:
        ks = tuple(int(s) for s in args.ks.split(","))
    except ValueError:
        raise ValueError(f"--ks must be comma-separated integers, got {args.ks!r}")
    # window length follows the every-5th-frame convention: k -> k/5 + 1 frames
    for k in ks:
        if k < 0 or k % 5 != 0:
            raise ValueError(f"k labels must be non-negative multiples of 5, got {k}")
    cfg = VpqConfig(ks, {k: k // 5 + 1 for k in ks})
    result = compute_vpq(preds, gts, cats, cfg, threads=args.threads)
    _write_report(args.output, "eval vpq", args,
                  {"frames": len(gts), "vpq": result.to_report()})
    return 0


# --- demo ----------------------------------------------------------------------

def cmd_demo(args) -> int:
    report = run_demo(args.output_dir, seed=args.seed, threads=args.threads,
                      taq=not args.no_taq)
    pq_all = report["eval_self_check"]["pq"]["all"]
    log.info("demo finished: self-check PQ = %s", pq_all)
    print(f"demo report written to {os.path.join(args.output_dir, 'report.json')} "
          f"(self-check PQ = {pq_all})")
    return 0


# --- parser --------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="pvkit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"pvkit {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for metric evaluation (default 1)")
    parser.add_argument("--log-level", default=os.environ.get("PVKIT_LOG", "warning"),
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    def allow_trailing_globals(p):
        # --seed/--threads may also follow the subcommand; SUPPRESS keeps the
        # value parsed at the top level when the trailing flag is absent
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                       help=argparse.SUPPRESS)
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                       help=argparse.SUPPRESS)

    depth = sub.add_parser("depth", help="depth pipeline operations")
    depth_sub = depth.add_subparsers(dest="depth_command", required=True)

    p = depth_sub.add_parser("from-disparity", help="decode Cityscapes disparity to depth")
    p.add_argument("--input", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_depth_from_disparity)

    p = depth_sub.add_parser("simulate", help="simulate a spinning LiDAR from dense depth")
    p.add_argument("--input", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beams", type=int, default=64)
    p.add_argument("--fov-min", type=float, default=-24.8)
    p.add_argument("--fov-max", type=float, default=2.0)
    p.add_argument("--keep", type=float, default=0.7,
                   help="ray-drop keep probability (1.0 disables ray drop)")
    p.add_argument("--report")
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_depth_simulate)

    p = depth_sub.add_parser("complete", help="densify sparse depth morphologically")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cap", type=float, default=100.0)
    p.add_argument("--no-blur", action="store_true")
    p.add_argument("--report")
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_depth_complete)

    p = sub.add_parser("fuse", help="fuse image and depth feature tensors")
    p.add_argument("--image-features", nargs="+", required=True)
    p.add_argument("--depth-features", nargs="+", required=True)
    p.add_argument("--params", nargs="+",
                   help="fusion params JSON, one per scale or one shared (dynamic mode)")
    p.add_argument("--mode", choices=["dynamic", "sum"], default="dynamic")
    p.add_argument("--output", nargs="+", required=True)
    p.add_argument("--report")
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("decode", help="run the toy decoder over a sequence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--taq", action="store_true",
                   help="reuse non-empty queries from the previous frame")
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--report")
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("track", help="match query sets across frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--alpha", type=float, default=0.0,
                   help="weight of the center-distance cost term")
    p.add_argument("--scope", choices=["all-slots", "non-empty-only"],
                   default="all-slots")
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_track)

    ev = sub.add_parser("eval", help="panoptic metric evaluation")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)

    p = ev_sub.add_parser("pq", help="image Panoptic Quality")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--categories", required=True)
    p.add_argument("--output", required=True)
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_eval_pq)

    p = ev_sub.add_parser("vpq", help="Video Panoptic Quality over tube windows")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--categories", required=True)
    p.add_argument("--ks", default="0,5,10,15")
    p.add_argument("--output", required=True)
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_eval_vpq)

    p = sub.add_parser("demo", help="end-to-end synthetic pipeline")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--no-taq", action="store_true")
    allow_trailing_globals(p)
    p.set_defaults(handler=cmd_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except FormatError as exc:
        print(f"pvkit: file format error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"pvkit: I/O error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"pvkit: validation error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
