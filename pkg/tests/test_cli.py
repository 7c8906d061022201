import csv
import json
import subprocess
import sys
import time

import pytest

from atfm.cli import ConfigError, load_run_config, main


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--count", "8", "--size", "16", "--seed", "1"]) == 0
    gtr, sfm = root / "gtr.atfm", root / "sfm.atfm"
    start = time.perf_counter()
    assert main(["train-gtr", "--data", str(data), "--out", str(gtr), "--seed", "0", "--epochs", "30"]) == 0
    assert main(["train-sfm", "--data", str(data), "--gtr", str(gtr), "--out", str(sfm), "--seed", "0", "--epochs", "40"]) == 0
    elapsed = time.perf_counter() - start
    return {"root": root, "data": data, "gtr": gtr, "sfm": sfm, "elapsed": elapsed}


def test_gen_data_layout(toy):
    dirs = sorted(p.name for p in toy["data"].iterdir() if p.is_dir())
    assert len(dirs) == 8
    assert (toy["data"] / "manifest.json").is_file()
    assert sorted(p.name for p in (toy["data"] / dirs[0]).iterdir()) == ["image.pgm"] + [f"mask_{k}.pgm" for k in range(4)]


def test_gen_data_repeatable(tmp_path, toy):
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--count", "8", "--size", "16", "--seed", "1"]) == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(toy["data"])


def test_gen_data_rejects_small_size(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--size", "4", "--seed", "1"]) == 1
    assert "size" in capsys.readouterr().err


def test_toy_training_within_budget(toy):
    assert toy["elapsed"] < 600


def test_loss_logs(toy):
    for name, epochs in (("gtr", 30), ("sfm", 40)):
        with open(toy[name].with_suffix(".loss.csv")) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "mean_loss", "grad_norm", "wall_seconds"]
        assert len(rows) - 1 == epochs


def test_train_sfm_requires_gtr(toy, capsys):
    code = main(["train-sfm", "--data", str(toy["data"]), "--out", "x.atfm", "--seed", "0"])
    assert code == 1
    assert "--gtr" in capsys.readouterr().err


def test_seed_is_mandatory(toy):
    assert main(["train-gtr", "--data", str(toy["data"]), "--out", "x.atfm"]) == 1
    assert main(["sample", "--image", "x", "--gtr", "x", "--sfm", "none", "--out", "x"]) == 1


def test_sample_writes_masks(toy, tmp_path):
    image = toy["data"] / "s00000" / "image.pgm"
    args = ["sample", "--image", str(image), "--gtr", str(toy["gtr"]), "--sfm", str(toy["sfm"])]
    args += ["--n", "16", "--steps", "25", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    masks = sorted(p.name for p in (tmp_path / "a").glob("pred_*.pgm"))
    assert len(masks) == 16
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "predictions.json").read_text())
    assert manifest["n"] == 16 and manifest["files"] == masks


def test_sample_stage_one_only(toy, tmp_path):
    image = toy["data"] / "s00001" / "image.pgm"
    args = ["sample", "--image", str(image), "--gtr", str(toy["gtr"]), "--sfm", "none", "--n", "4", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "p")]) == 0
    manifest = json.loads((tmp_path / "p" / "predictions.json").read_text())
    assert manifest["sfm"] is None and manifest["steps"] == 0


def test_sample_shape_mismatch(toy, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "big"), "--count", "1", "--size", "32", "--seed", "0"]) == 0
    image = tmp_path / "big" / "s00000" / "image.pgm"
    args = ["sample", "--image", str(image), "--gtr", str(toy["gtr"]), "--sfm", "none", "--seed", "0"]
    assert main(args + ["--out", str(tmp_path / "o")]) == 1


def _eval(toy, *extra):
    args = ["eval", "--data", str(toy["data"]), "--gtr", str(toy["gtr"]), "--sfm", str(toy["sfm"]), "--seed", "0"]
    return main(args + list(extra))


def test_eval_report(toy, tmp_path):
    out = tmp_path / "report.json"
    assert _eval(toy, "--n", "4", "--runs", "5", "--steps", "5", "--out", str(out)) == 0
    report = json.loads(out.read_text())
    for key in ("ged_4", "hm_iou_4", "mdm_4"):
        assert set(report[key]) == {"mean", "std"}
    assert len(report["per_run"]) == 5


def test_eval_self_consistency(toy, tmp_path):
    out = tmp_path / "self.json"
    assert _eval(toy, "--n", "4", "--runs", "2", "--steps", "5", "--self-eval", "--out", str(out)) == 0
    report = json.loads(out.read_text())
    assert report["ged_4"]["mean"] == pytest.approx(0.0, abs=1e-12)
    assert report["hm_iou_4"]["mean"] == pytest.approx(1.0, abs=1e-12)


def test_eval_hundred_predictions(toy, tmp_path):
    out = tmp_path / "n100.json"
    args = ["eval", "--data", str(toy["data"]), "--gtr", str(toy["gtr"]), "--sfm", "none", "--seed", "0"]
    assert main(args + ["--n", "100", "--runs", "1", "--out", str(out)]) == 0
    assert 0 <= json.loads(out.read_text())["hm_iou_100"]["mean"] <= 1


def test_eval_repeatable(toy, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert _eval(toy, "--n", "4", "--runs", "2", "--steps", "5", "--out", str(a)) == 0
    assert _eval(toy, "--n", "4", "--runs", "2", "--steps", "5", "--out", str(b)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_training_repeatable(toy, tmp_path):
    out = tmp_path / "gtr.atfm"
    assert main(["train-gtr", "--data", str(toy["data"]), "--out", str(out), "--seed", "0", "--epochs", "30"]) == 0
    assert out.read_bytes() == toy["gtr"].read_bytes()


def test_missing_dataset_is_io_error(tmp_path):
    assert main(["train-gtr", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "g"), "--seed", "0"]) == 3


def test_divergence_exit_code(toy, tmp_path):
    args = ["train-gtr", "--data", str(toy["data"]), "--out", str(tmp_path / "g"), "--seed", "0", "--epochs", "2"]
    assert main(args + ["--lr", "1e30"]) == 2


def test_unfrozen_or_wrong_kind_checkpoint(toy, tmp_path):
    args = ["train-sfm", "--data", str(toy["data"]), "--gtr", str(toy["sfm"]), "--out", str(tmp_path / "s"), "--seed", "0"]
    assert main(args) == 1


class TestRunConfig:
    def test_unknown_keys_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gtr": {"epochz": 3}}))
        with pytest.raises(ConfigError, match="gtr.epochz"):
            load_run_config(str(path))
        path.write_text(json.dumps({"optimizer": {}}))
        with pytest.raises(ConfigError, match="optimizer"):
            load_run_config(str(path))

    def test_invalid_values_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"sfm": {"alpha": -1}}))
        with pytest.raises(ConfigError, match="sfm.alpha"):
            load_run_config(str(path))
        path.write_text(json.dumps({"net": {"rank": "ten"}}))
        with pytest.raises(ConfigError, match="net.rank"):
            load_run_config(str(path))

    def test_overrides(self):
        cfg = load_run_config(None, ["gtr.epochs=7", "net.widths=[8,16]"])
        assert cfg.section("gtr").epochs == 7
        assert cfg.section("net").widths == (8, 16)
        with pytest.raises(ConfigError):
            load_run_config(None, ["epochs=7"])

    def test_config_file_drives_training(self, toy, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gtr": {"epochs": 2}, "net": {"widths": [8, 16], "rank": 3}}))
        out = tmp_path / "g.atfm"
        assert main(["train-gtr", "--data", str(toy["data"]), "--out", str(out), "--seed", "1", "--config", str(path)]) == 0
        with open(out.with_suffix(".loss.csv")) as fh:
            assert len(fh.readlines()) == 3


class TestVerify:
    def test_all_pass(self, capsys):
        assert main(["verify", "--suite", "all"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") == 6

    def test_injected_fault_names_check(self, capsys):
        assert main(["verify", "--suite", "theorems", "--break-cholesky"]) == 1
        assert "FAIL theorem.factorization" in capsys.readouterr().out

    def test_theorem_suite_budget(self):
        start = time.perf_counter()
        assert main(["verify", "--suite", "theorems"]) == 0
        assert time.perf_counter() - start < 30

    def test_console_script_entry(self):
        proc = subprocess.run([sys.executable, "-m", "atfm.cli", "verify", "--suite", "theorems"], capture_output=True, text=True)
        assert proc.returncode == 0 and "PASS theorem.truncation_time" in proc.stdout
