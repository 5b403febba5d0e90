"""CLI subcommands: exit codes, determinism, reports, fixture regressions."""

import json
import os

import numpy as np
import pytest

from oracles import brute_force_assignment, scalar_cosine_costs
from pvkit.cli import main
from pvkit.decoder import QuerySet, save_query_set
from pvkit.depth import CameraIntrinsics, DepthMap
from pvkit.formats import (FrameEntry, SequenceManifest, read_depth_png,
                           write_categories, write_depth_png, write_intrinsics,
                           write_manifest, write_panoptic_png, write_tensor)
from pvkit.metrics import CategoryTable


@pytest.fixture
def intrinsics_file(tmp_path):
    path = str(tmp_path / "intr.json")
    write_intrinsics(CameraIntrinsics(focal_y=120.0, principal_y=12.0,
                                      focal_x=2200.0, principal_x=64.0,
                                      baseline=0.21), path)
    return path


def _write_dense_depth(tmp_path, name="dense.png"):
    rng = np.random.default_rng(0)
    values = rng.uniform(4.0, 60.0, (64, 32))
    path = str(tmp_path / name)
    write_depth_png(values, path)
    return path


class TestExitCodes:
    def test_unknown_flag_exits_1(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["demo", "--not-a-flag"])
        assert exc.value.code == 1

    def test_unknown_subcommand_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_missing_input_file_exits_2(self, tmp_path, intrinsics_file, capsys):
        code = main(["depth", "from-disparity", "--input",
                     str(tmp_path / "nope.png"), "--intrinsics", intrinsics_file,
                     "--output", str(tmp_path / "out.png")])
        assert code == 2
        assert "I/O error" in capsys.readouterr().err

    def test_validation_error_exits_1(self, tmp_path, intrinsics_file, capsys):
        dense = _write_dense_depth(tmp_path)
        code = main(["depth", "simulate", "--input", dense, "--intrinsics",
                     intrinsics_file, "--output", str(tmp_path / "o.png"),
                     "--beams", "4096"])
        assert code == 1
        assert "validation error" in capsys.readouterr().err


class TestDepthCommands:
    def test_from_disparity_and_report(self, tmp_path, intrinsics_file):
        from pvkit.depth import depth_to_disparity_values
        depth = DepthMap(np.random.default_rng(1).uniform(5, 50, (32, 32)))
        intr = CameraIntrinsics(focal_y=120.0, principal_y=12.0, focal_x=2200.0,
                                principal_x=64.0, baseline=0.21)
        raw = depth_to_disparity_values(depth, intr)
        disp_png = str(tmp_path / "disp.png")
        from pvkit.formats import write_png16
        write_png16(raw, disp_png)
        out = str(tmp_path / "depth.png")
        assert main(["depth", "from-disparity", "--input", disp_png,
                     "--intrinsics", intrinsics_file, "--output", out]) == 0
        report = json.load(open(out + ".report.json"))
        assert report["toolkit_version"]
        assert report["config"]["input"] == disp_png
        back = read_depth_png(out)
        valid = depth.values != 0
        assert np.max(np.abs(back[valid] - depth.values[valid])) < 0.2

    def test_simulate_deterministic(self, tmp_path, intrinsics_file):
        dense = _write_dense_depth(tmp_path)
        out1 = str(tmp_path / "a.png")
        out2 = str(tmp_path / "b.png")
        args = ["--seed", "42", "depth", "simulate", "--input", dense,
                "--intrinsics", intrinsics_file, "--beams", "16",
                "--keep", "0.7"]
        assert main(args + ["--output", out1]) == 0
        assert main(args + ["--output", out2]) == 0
        assert open(out1, "rb").read() == open(out2, "rb").read()

    def test_complete_after_simulate(self, tmp_path, intrinsics_file):
        dense = _write_dense_depth(tmp_path)
        sparse = str(tmp_path / "sparse.png")
        assert main(["depth", "simulate", "--input", dense, "--intrinsics",
                     intrinsics_file, "--beams", "16", "--keep", "1.0",
                     "--output", sparse]) == 0
        completed = str(tmp_path / "completed.png")
        assert main(["depth", "complete", "--input", sparse,
                     "--output", completed]) == 0
        report = json.load(open(completed + ".report.json"))
        assert report["output_valid_pixels"] >= report["input_valid_pixels"]


class TestFuseCommand:
    def test_dynamic_and_sum_modes(self, tmp_path):
        rng = np.random.default_rng(2)
        a = rng.uniform(-1, 1, (3, 4, 4))
        b = rng.uniform(-1, 1, (3, 4, 4))
        pa = str(tmp_path / "a.pvt")
        pb = str(tmp_path / "b.pvt")
        write_tensor(a, pa)
        write_tensor(b, pb)
        params = str(tmp_path / "params.json")
        with open(params, "w") as f:
            json.dump({"gate_weights": np.zeros((3, 3)).tolist(),
                       "gate_bias": [0.0] * 3, "gamma": [1.0] * 3}, f)
        out = str(tmp_path / "fused.pvt")
        assert main(["fuse", "--image-features", pa, "--depth-features", pb,
                     "--params", params, "--output", out]) == 0
        from pvkit.formats import read_tensor
        fused = read_tensor(out)
        assert np.allclose(fused, a + 0.5 * b, atol=1e-15)
        out_sum = str(tmp_path / "sum.pvt")
        assert main(["fuse", "--image-features", pa, "--depth-features", pb,
                     "--mode", "sum", "--output", out_sum]) == 0
        assert np.array_equal(read_tensor(out_sum), a + b)


class TestTrackCommand:
    def _sequence_fixture(self, tmp_path, seed=5, frames=4, n=5, dim=8):
        rng = np.random.default_rng(seed)
        base = rng.normal(size=(n, dim))
        sets = []
        entries = []
        for t in range(frames):
            emb = base + 0.02 * rng.normal(size=base.shape)
            logits = np.zeros((n, 3))
            logits[:, 0] = 3.0
            qs = QuerySet(emb, class_logits=logits,
                          centers=rng.uniform(size=(n, 2)))
            prefix = str(tmp_path / f"frame_{t:04d}")
            save_query_set(qs, prefix)
            sets.append(qs)
            entries.append(FrameEntry(t, queries_path=f"frame_{t:04d}"))
        manifest = str(tmp_path / "seq.json")
        write_manifest(SequenceManifest(entries, 5), manifest)
        return manifest, sets

    def test_alpha_zero_matches_appearance_only_oracle(self, tmp_path):
        manifest, sets = self._sequence_fixture(tmp_path)
        out = str(tmp_path / "tracks.json")
        assert main(["track", "--manifest", manifest, "--output", out,
                     "--alpha", "0"]) == 0
        doc = json.load(open(out))
        # oracle: cosine costs + brute-force assignment + manual id carry
        next_id = 1
        ids = {}
        for t, qs in enumerate(sets):
            got = {row["slot"]: row["track_id"] for row in doc["frames"][t]["queries"]}
            if t == 0:
                new_ids = {}
                for slot in range(qs.num_queries):
                    new_ids[slot] = next_id
                    next_id += 1
            else:
                cost = scalar_cosine_costs(sets[t - 1].embeddings.tolist(),
                                           qs.embeddings.tolist())
                _, pairs = brute_force_assignment(cost)
                new_ids = {}
                matched = {c: p for p, c in pairs}
                for slot in range(qs.num_queries):
                    if slot in matched:
                        new_ids[slot] = ids[matched[slot]]
                    else:
                        new_ids[slot] = next_id
                        next_id += 1
            ids = new_ids
            assert got == ids, f"frame {t}: {got} != {ids}"

    def test_config_embedded_in_report(self, tmp_path):
        manifest, _ = self._sequence_fixture(tmp_path)
        out = str(tmp_path / "tracks.json")
        assert main(["track", "--manifest", manifest, "--output", out,
                     "--alpha", "0.5", "--scope", "non-empty-only"]) == 0
        doc = json.load(open(out))
        assert doc["config"]["alpha"] == 0.5
        assert doc["config"]["scope"] == "non-empty-only"
        assert doc["toolkit_version"]


class TestEvalCommands:
    def _write_frames(self, directory, maps):
        os.makedirs(directory, exist_ok=True)
        for t, pmap in enumerate(maps):
            write_panoptic_png(pmap, os.path.join(directory, f"f{t:03d}.png"),
                               os.path.join(directory, f"f{t:03d}.json"))

    def test_eval_pq_identical_dirs_scores_one(self, tmp_path):
        from oracles import random_panoptic_sequence
        rng = np.random.default_rng(6)
        maps = random_panoptic_sequence(rng, frames=3)
        self._write_frames(str(tmp_path / "gt"), maps)
        self._write_frames(str(tmp_path / "pred"), maps)
        cats_path = str(tmp_path / "cats.json")
        write_categories(CategoryTable({1: ("a", True), 2: ("b", True),
                                        3: ("c", False)}), cats_path)
        out = str(tmp_path / "report.json")
        assert main(["eval", "pq", "--pred-dir", str(tmp_path / "pred"),
                     "--gt-dir", str(tmp_path / "gt"), "--categories",
                     cats_path, "--output", out]) == 0
        report = json.load(open(out))
        assert report["pq"]["all"] == 1.0
        assert report["config"]["categories"] == cats_path

    def test_eval_vpq_with_ks(self, tmp_path):
        from oracles import random_panoptic_sequence
        rng = np.random.default_rng(7)
        maps = random_panoptic_sequence(rng, frames=4)
        self._write_frames(str(tmp_path / "gt"), maps)
        self._write_frames(str(tmp_path / "pred"), maps)
        cats_path = str(tmp_path / "cats.json")
        write_categories(CategoryTable({1: ("a", True), 2: ("b", True),
                                        3: ("c", False)}), cats_path)
        out = str(tmp_path / "vpq.json")
        assert main(["eval", "vpq", "--pred-dir", str(tmp_path / "pred"),
                     "--gt-dir", str(tmp_path / "gt"), "--categories",
                     cats_path, "--ks", "0,5,10,15", "--output", out]) == 0
        report = json.load(open(out))
        assert report["vpq"]["mean"] == 1.0
        assert [e["k"] for e in report["vpq"]["per_k"]] == [0, 5, 10, 15]

    def test_mismatched_dirs_rejected(self, tmp_path):
        from oracles import random_panoptic_sequence
        rng = np.random.default_rng(8)
        maps = random_panoptic_sequence(rng, frames=2)
        self._write_frames(str(tmp_path / "gt"), maps)
        self._write_frames(str(tmp_path / "pred"), maps[:1])
        cats_path = str(tmp_path / "cats.json")
        write_categories(CategoryTable({1: ("a", True), 2: ("b", True),
                                        3: ("c", False)}), cats_path)
        code = main(["eval", "pq", "--pred-dir", str(tmp_path / "pred"),
                     "--gt-dir", str(tmp_path / "gt"), "--categories",
                     cats_path, "--output", str(tmp_path / "r.json")])
        assert code == 1


class TestDecodePipeline:
    def test_decode_then_track(self, tmp_path):
        rng = np.random.default_rng(9)
        entries = []
        for t in range(3):
            values = rng.uniform(5.0, 50.0, (64, 64))
            path = str(tmp_path / f"depth_{t}.png")
            write_depth_png(values, path)
            entries.append(FrameEntry(t * 5, depth_path=f"depth_{t}.png"))
        manifest = str(tmp_path / "seq.json")
        write_manifest(SequenceManifest(entries, 5), manifest)
        out_dir = str(tmp_path / "decoded")
        assert main(["decode", "--manifest", manifest, "--output-dir", out_dir,
                     "--taq"]) == 0
        decoded_manifest = os.path.join(out_dir, "decoded.json")
        assert os.path.exists(decoded_manifest)
        tracks = str(tmp_path / "tracks.json")
        assert main(["track", "--manifest", decoded_manifest,
                     "--output", tracks, "--alpha", "1.0"]) == 0
        doc = json.load(open(tracks))
        assert len(doc["frames"]) == 3

    def test_decode_deterministic_under_taq(self, tmp_path):
        rng = np.random.default_rng(10)
        entries = []
        for t in range(2):
            values = rng.uniform(5.0, 50.0, (64, 64))
            path = str(tmp_path / f"d{t}.png")
            write_depth_png(values, path)
            entries.append(FrameEntry(t, depth_path=f"d{t}.png"))
        manifest = str(tmp_path / "seq.json")
        write_manifest(SequenceManifest(entries, 5), manifest)
        outs = []
        for run in range(2):
            out_dir = str(tmp_path / f"run{run}")
            assert main(["decode", "--manifest", manifest,
                         "--output-dir", out_dir, "--taq"]) == 0
            outs.append(open(os.path.join(out_dir, "frame_0001.embeddings.pvt"),
                             "rb").read())
        assert outs[0] == outs[1]


class TestDemoCommand:
    def test_demo_self_check(self, tmp_path, capsys):
        out_dir = str(tmp_path / "demo")
        assert main(["demo", "--output-dir", out_dir]) == 0
        report = json.load(open(os.path.join(out_dir, "report.json")))
        assert report["eval_self_check"]["pq"]["all"] == 1.0
        assert report["eval_self_check"]["vpq"]["mean"] == 1.0
        assert os.path.exists(os.path.join(out_dir, "tracks.json"))
        assert os.path.exists(os.path.join(out_dir, "sequence.json"))
