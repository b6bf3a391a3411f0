import csv
import json

import jsonschema
import numpy as np
import pytest

from sodkit import backend
from sodkit.cli import BENCH_SCHEMA, main, parse_config_file, parse_shape
from sodkit.errors import ContractError
from sodkit.metrics import Detection, GroundTruth, write_jsonl
from sodkit.pnm import read_pnm


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def manifest(path):
    return json.loads((path / "run-manifest.json").read_text())


def test_help_exits_zero(capsys):
    assert run(capsys, "--help")[0] == 0


@pytest.mark.parametrize("argv", [[], ["nope"], ["gen", "--images", "x"], ["eval", "--gt", "a"]])
def test_usage_errors(capsys, argv):
    assert run(capsys, *argv)[0] == 2


class TestFuseCheck:
    def test_default_passes(self, capsys, tmp_path):
        code, out, _ = run(capsys, "fuse-check", "--out", str(tmp_path))
        rep = json.loads(out)
        assert code == 0 and rep["passed"] and rep["max_deviation"] <= 1e-9 and rep["trials"] == 200
        m = manifest(tmp_path)
        assert m["command"] == "fuse-check" and m["config"]["trials"] == 200

    def test_minimal(self, capsys):
        code, out, _ = run(capsys, "fuse-check", "--width", "1", "--spatial", "4", "--trials", "5")
        assert code == 0 and json.loads(out)["passed"]

    def test_corrupt_fails(self, capsys):
        code, _, err = run(capsys, "fuse-check", "--trials", "3", "--corrupt")
        assert code == 1 and "check failed" in err

    def test_table(self, capsys):
        code, out, _ = run(capsys, "fuse-check", "--trials", "2", "--format", "table")
        assert code == 0 and "PASS" in out

    def test_deterministic(self, capsys):
        a = json.loads(run(capsys, "fuse-check", "--trials", "4", "--seed", "3")[1])
        b = json.loads(run(capsys, "fuse-check", "--trials", "4", "--seed", "3")[1])
        assert a["max_deviation"] == b["max_deviation"]


class TestConfig:
    def test_config_merged_flags_win(self, capsys, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# fuse settings\ntrials = 3\nwidth = 2\n")
        out_dir = tmp_path / "o"
        code, out, _ = run(capsys, "fuse-check", "--config", str(cfg), "--width", "5", "--out", str(out_dir))
        assert code == 0
        rep = json.loads(out)
        assert rep["trials"] == 3 and rep["width"] == 5
        assert manifest(out_dir)["config"]["trials"] == 3

    def test_unknown_key(self, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus = 1\n")
        assert run(capsys, "fuse-check", "--config", str(cfg))[0] == 2

    def test_parse(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("a = 1.5\nb-c = true\nname = hello world  # note\n")
        assert parse_config_file(cfg) == {"a": 1.5, "b_c": True, "name": "hello world"}
        cfg.write_text("no equals sign\n")
        with pytest.raises(ContractError):
            parse_config_file(cfg)

    def test_missing_config_file(self, capsys, tmp_path):
        assert run(capsys, "fuse-check", "--config", str(tmp_path / "absent.cfg"))[0] == 2


class TestBench:
    def test_schema_and_ratio(self, capsys, tmp_path):
        code, out, _ = run(capsys, "bench", "--shapes", "1x4x8x8:4", "2x3x6x10:5",
                           "--repetitions", "3", "--out", str(tmp_path))
        assert code == 0
        rep = json.loads(out)
        jsonschema.validate(rep, BENCH_SCHEMA)
        assert all(r["mac_ratio"] == 4.0 and r["macs_fused"] == r["macs_vanilla"] for r in rep["shapes"])
        assert (tmp_path / "run-manifest.json").exists()

    def test_both_backends(self, capsys):
        code, out, _ = run(capsys, "bench", "--shapes", "1x2x6x6:2", "--repetitions", "1",
                           "--backend", "both")
        assert code == 0
        reps = json.loads(out)
        reps = reps if isinstance(reps, list) else [reps]
        assert [r["backend"] for r in reps] == backend.available()
        for r in reps:
            jsonschema.validate(r, BENCH_SCHEMA)

    def test_table(self, capsys):
        code, out, _ = run(capsys, "bench", "--shapes", "1x2x6x6:2", "--repetitions", "1",
                           "--format", "table")
        assert code == 0 and "ratio" in out

    def test_bad_shape(self, capsys):
        assert run(capsys, "bench", "--shapes", "1x2x3:4")[0] == 2
        with pytest.raises(ContractError):
            parse_shape("axbxcxd:1")
        assert parse_shape("1x2x3x4:5") == ((1, 2, 3, 4), 5)


class TestGen:
    def test_gen_writes_dataset(self, capsys, tmp_path):
        code, out, _ = run(capsys, "gen", "--images", "2", "--seed", "5", "--out", str(tmp_path))
        assert code == 0
        stats = json.loads(out)
        assert stats["num_images"] == 2
        assert read_pnm(tmp_path / "images" / "000001.ppm").shape == (640, 640, 3)
        lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
        assert len(lines) == stats["num_objects"]
        assert manifest(tmp_path)["config"]["seed"] == 5

    def test_gen_deterministic(self, capsys, tmp_path):
        for name in ("a", "b"):
            run(capsys, "gen", "--images", "3", "--no-render", "--seed", "2", "--out", str(tmp_path / name))
        assert (tmp_path / "a" / "annotations.jsonl").read_bytes() == \
               (tmp_path / "b" / "annotations.jsonl").read_bytes()

    def test_gen_bad_count(self, capsys, tmp_path):
        assert run(capsys, "gen", "--images", "0", "--out", str(tmp_path))[0] == 2


class TestEval:
    @pytest.fixture
    def files(self, tmp_path):
        gts = [GroundTruth(0, 1, (20, 20, 8, 8)), GroundTruth(0, 2, (60, 60, 40, 40))]
        dets = [Detection(0, 1, (20, 20, 8, 8), 0.9)]
        write_jsonl(tmp_path / "gt.jsonl", gts)
        write_jsonl(tmp_path / "pred.jsonl", dets)
        return tmp_path / "gt.jsonl", tmp_path / "pred.jsonl"

    def test_json_report(self, capsys, tmp_path, files):
        gt, pred = files
        out_dir = tmp_path / "rep"
        code, out, _ = run(capsys, "eval", "--gt", str(gt), "--pred", str(pred), "--iou-thr", "0.5,0.7",
                           "--max-det", "300", "--out", str(out_dir))
        rep = json.loads(out)
        assert code == 0 and rep["map50"] == 0.5
        assert set(rep["map_per_threshold"]) == {"0.50", "0.70"}
        assert json.loads((out_dir / "eval-report.json").read_text())["map50"] == 0.5

    def test_table(self, capsys, files):
        gt, pred = files
        code, out, _ = run(capsys, "eval", "--gt", str(gt), "--pred", str(pred), "--format", "table")
        assert code == 0 and "map50" in out

    def test_missing_file(self, capsys, tmp_path, files):
        gt, _ = files
        assert run(capsys, "eval", "--gt", str(gt), "--pred", str(tmp_path / "none.jsonl"))[0] == 2

    def test_bad_thresholds(self, capsys, files):
        gt, pred = files
        assert run(capsys, "eval", "--gt", str(gt), "--pred", str(pred), "--iou-thr", "0.7,0.5")[0] == 2


class TestRegress:
    def test_csv_and_summary(self, capsys, tmp_path):
        code, out, _ = run(capsys, "regress", "--pairs", "20", "--steps", "50", "--out", str(tmp_path))
        assert code == 0
        rows = list(csv.DictReader((tmp_path / "regress.csv").open()))
        assert list(rows[0]) == ["step", "mean_loss", "mean_iou", "ema_mean", "mean_gamma"]
        assert len(rows) == 50
        summary = json.loads((tmp_path / "regress-summary.json").read_text())
        assert summary["final_mean_iou"] > summary["initial_mean_iou"]
        assert manifest(tmp_path)["config"]["lr"] == 1.0

    def test_stdout(self, capsys):
        code, out, _ = run(capsys, "regress", "--pairs", "3", "--steps", "4", "--modulation", "literal")
        assert code == 0 and out.startswith("step,mean_loss")

    def test_bad_lr(self, capsys):
        assert run(capsys, "regress", "--pairs", "2", "--steps", "2", "--lr", "0")[0] == 2


class TestGammaCurve:
    def test_csv(self, capsys, tmp_path):
        code, _, _ = run(capsys, "gamma-curve", "--samples", "11", "--beta-max", "6", "--out", str(tmp_path))
        assert code == 0
        rows = list(csv.reader((tmp_path / "gamma-curve.csv").open()))
        assert rows[0] == ["beta", "gamma"] and len(rows) == 12
        vals = {float(b): float(g) for b, g in rows[1:]}
        assert vals[0.0] == 0.0 and abs(vals[3.0] - 1.0) < 1e-9

    def test_stdout(self, capsys):
        code, out, _ = run(capsys, "gamma-curve", "--samples", "3", "--alpha", "2.0", "--delta", "1.0")
        assert code == 0 and out.splitlines()[0] == "beta,gamma"


class TestFeatmap:
    def test_generated(self, capsys, tmp_path):
        code, out, _ = run(capsys, "featmap", "--size", "32", "--k", "7", "--out", str(tmp_path))
        assert code == 0
        rep = json.loads(out)
        names = {p.split("/")[-1] for p in rep["written"]}
        assert {"post_branch.pgm", "pre_merge.pgm", "output.pgm"} <= names
        img = read_pnm(tmp_path / "output.pgm")
        assert img.shape == (16, 16) and img.dtype == np.uint8

    def test_from_file(self, capsys, tmp_path):
        from sodkit.pnm import write_ppm
        write_ppm(tmp_path / "in.ppm", np.random.default_rng(0).uniform(size=(3, 20, 30)))
        code, _, _ = run(capsys, "featmap", "--input", str(tmp_path / "in.ppm"), "--size", "16",
                         "--k", "5", "--out", str(tmp_path / "maps"))
        assert code == 0 and (tmp_path / "maps" / "run-manifest.json").exists()

    def test_needs_out(self, capsys):
        assert run(capsys, "featmap", "--size", "16", "--k", "3")[0] == 2


class TestPipeline:
    def test_zero_jitter(self, capsys, tmp_path):
        code, out, _ = run(capsys, "pipeline", "--images", "2", "--feature-size", "64", "--k", "7",
                           "--out", str(tmp_path))
        assert code == 0
        rep = json.loads(out)
        assert rep["map50"] == 1.0 and rep["reference_map50"] == 1.0
        assert any((tmp_path / "featmaps").glob("*.pgm"))
        code, out, _ = run(capsys, "eval", "--gt", str(tmp_path / "annotations.jsonl"),
                           "--pred", str(tmp_path / "predictions.jsonl"), "--iou-thr", "0.5")
        assert code == 0 and json.loads(out)["map50"] == 1.0

    def test_huge_jitter(self, capsys):
        code, out, _ = run(capsys, "pipeline", "--images", "2", "--feature-size", "32", "--k", "3",
                           "--jitter", "3.0")
        assert code == 0 and json.loads(out)["map50"] == 0.0
