import csv
import json
import os

import pytest

from kgensemble.cli import main
from kgensemble.data import load_dataset
from kgensemble.ensemble import read_checkpoint_metadata

TRAIN = ["--model", "transe", "--dim", "8", "--k", "2", "--gamma", "4", "--eta", "4", "--lr", "0.01",
         "--batches", "4", "--max-epochs", "4", "--valid-every", "2", "--patience", "1"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(["synth", "--pattern", "mixed", "--entities", "60", "--pairs", "400", "--fan", "3",
               "--valid-fraction", "0.1", "--test-fraction", "0.1", "--seed", "2", "--out", str(out)])
    assert rc == 0
    return str(out)


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--dataset", data_dir, "--out", str(out), "--runs", "2"] + TRAIN) == 0
    return out


class TestSynth:
    def test_files(self, data_dir):
        assert sorted(os.listdir(data_dir)) == ["test.txt", "train.txt", "valid.txt"]
        ds = load_dataset(data_dir)
        assert len(ds.valid) > 0 and len(ds.test) > 0

    def test_fan_pattern(self, tmp_path):
        assert main(["synth", "--pattern", "n-1", "--entities", "100", "--pairs", "3", "--fan", "5",
                     "--out", str(tmp_path)]) == 0
        rows = [line.split("\t") for line in (tmp_path / "train.txt").read_text().splitlines()]
        assert len(rows) == 15
        assert len({r[2] for r in rows}) == 3

    def test_infeasible(self, tmp_path, capsys):
        assert main(["synth", "--pattern", "symmetric", "--entities", "4", "--pairs", "100",
                     "--out", str(tmp_path)]) == 2
        assert capsys.readouterr().err.count("\n") == 1


class TestTrain:
    def test_outputs(self, trained):
        names = sorted(os.listdir(trained))
        assert names == ["config.txt", "curve-s0-r0.csv", "curve-s0-r1.csv", "curve-s2-r0.csv",
                         "curve-s2-r1.csv", "manifest.json", "model-s0.kge", "model-s2.kge"]
        meta = read_checkpoint_metadata(str(trained / "model-s2.kge"))
        assert meta["seeds"] == [2, 3] and meta["k"] == 2 and meta["d_l"] == 8
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["d"] == 16 and len(manifest["runs"]) == 2
        header = (trained / "curve-s0-r0.csv").read_text().splitlines()[0]
        assert header.startswith("epoch,")

    def test_identical_flags_identical_bytes(self, data_dir, trained, tmp_path):
        assert main(["train", "--dataset", data_dir, "--out", str(tmp_path)] + TRAIN) == 0
        assert (tmp_path / "model-s0.kge").read_bytes() == (trained / "model-s0.kge").read_bytes()

    def test_config_file_reproduces(self, trained, tmp_path):
        assert main(["train", "--config", str(trained / "config.txt"), "--out", str(tmp_path)]) == 0
        for name in ("model-s0.kge", "model-s2.kge"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    def test_flag_beats_config(self, trained, tmp_path):
        assert main(["train", "--config", str(trained / "config.txt"), "--out", str(tmp_path),
                     "--runs", "1", "--seed", "5"]) == 0
        assert read_checkpoint_metadata(str(tmp_path / "model-s5.kge"))["seeds"] == [5, 6]

    def test_odd_complex_size(self, data_dir, tmp_path, capsys):
        rc = main(["train", "--dataset", data_dir, "--model", "rotate", "--dim", "7", "--out", str(tmp_path)])
        assert rc == 1
        assert "odd size for complex geometry" in capsys.readouterr().err
        assert not (tmp_path / "model-s0.kge").exists()

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_flag(self):
        assert main(["train", "--bogus", "1"]) == 1

    def test_no_command(self):
        assert main([]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_runtime_error(self, data_dir, tmp_path):
        rc = main(["train", "--dataset", data_dir, "--out", str(tmp_path), "--model", "distmult",
                   "--dim", "4", "--lr", "1e308", "--batches", "1", "--max-epochs", "2"])
        assert rc == 3


class TestEval:
    def test_single(self, data_dir, trained, tmp_path):
        assert main(["eval", "--dataset", data_dir, "--checkpoint", str(trained / "model-s0.kge"),
                     "--out", str(tmp_path), "--ranks", "true"]) == 0
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        (entry,) = metrics["checkpoints"]
        assert 0 < entry["mrr"] <= 1 and len(entry["ranks"]) == len(load_dataset(data_dir).test)
        assert metrics["aggregates"][0]["single_run"]

    def test_glob_aggregates(self, data_dir, trained, tmp_path):
        assert main(["eval", "--dataset", data_dir, "--checkpoint", str(trained / "model-s*.kge"),
                     "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
        assert len(rows) == 1
        assert rows[0]["model"] == "MTransE" and rows[0]["k"] == "2" and rows[0]["seed_count"] == "2"

    def test_vocabulary_mismatch(self, trained, tmp_path):
        other = tmp_path / "other"
        assert main(["synth", "--entities", "61", "--pairs", "400", "--fan", "3",
                     "--test-fraction", "0.1", "--out", str(other)]) == 0
        assert main(["eval", "--dataset", str(other), "--checkpoint", str(trained / "model-s0.kge"),
                     "--out", str(tmp_path / "e")]) == 2

    def test_no_match(self, data_dir, tmp_path):
        assert main(["eval", "--dataset", data_dir, "--checkpoint", str(tmp_path / "*.kge")]) == 2

    def test_bad_split(self, data_dir, trained):
        assert main(["eval", "--dataset", data_dir, "--checkpoint", str(trained / "model-s0.kge"),
                     "--split", "train"]) == 1


class TestAnalyze:
    def test_outputs(self, data_dir, trained, tmp_path):
        assert main(["analyze", "--dataset", data_dir, "--checkpoint", str(trained / "model-s0.kge"),
                     "--out", str(tmp_path), "--min-support", "2"]) == 0
        cats = list(csv.DictReader(open(tmp_path / "categories.csv")))
        rules = list(csv.DictReader(open(tmp_path / "rules.csv")))
        metrics = list(csv.DictReader(open(tmp_path / "category_metrics.csv")))
        assert len(cats) == load_dataset(data_dir).n_relations
        assert [r["relation"] for r in rules] == ["symmetric"]
        assert [m["category"] for m in metrics] == ["1-1", "1-n", "n-1", "n-n", "symmetric"]

    def test_threshold_above_one(self, data_dir, tmp_path):
        assert main(["analyze", "--dataset", data_dir, "--out", str(tmp_path), "--sym-threshold", "1.01"]) == 0
        assert (tmp_path / "rules.csv").read_text().splitlines() == ["relation,support,confidence"]
        assert not (tmp_path / "category_metrics.csv").exists()

    def test_zero_category_threshold(self, data_dir, tmp_path):
        assert main(["analyze", "--dataset", data_dir, "--out", str(tmp_path), "--cat-threshold", "0"]) == 0
        cats = list(csv.DictReader(open(tmp_path / "categories.csv")))
        assert {c["category"] for c in cats} == {"n-n"}

    def test_bad_confidence_threshold(self, data_dir, tmp_path):
        assert main(["analyze", "--dataset", data_dir, "--out", str(tmp_path), "--sym-threshold", "0"]) == 1
