import json

import pytest

from psngame.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--agents", "3", "--count", "2", "--samples-per-scenario", "2", "--out", str(out)]) == 0
    return out / "dataset.json"


def test_gen_data_is_deterministic(tmp_path, dataset):
    out = tmp_path / "again"
    assert main(["gen-data", "--agents", "3", "--count", "2", "--samples-per-scenario", "2", "--out", str(out)]) == 0
    assert (out / "dataset.json").read_bytes() == dataset.read_bytes()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["config"]["agents"] == 3


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"kind": "linear", "count": 7, "agents": 2}))
    assert main(["gen-data", "--config", str(cfg), "--count", "5", "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "dataset.json").read_text())
    assert len(doc["samples"]) == 5 and len(doc["samples"][0]["goals"]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "p")]) == 2
    cfg.write_text(json.dumps({"colour": "red"}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 2


def test_train_two_epochs(tmp_path, dataset):
    out = tmp_path / "run"
    assert main(["train", "psn", "--data", str(dataset), "--epochs", "2", "--out", str(out)]) == 0
    rows = (out / "loss_curve.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,total,binary,sparsity,task") and len(rows) == 3
    assert (out / "checkpoint.json").is_file()
    again = tmp_path / "run2"
    assert main(["train", "psn", "--data", str(dataset), "--epochs", "2", "--out", str(again)]) == 0
    assert (again / "checkpoint.json").read_bytes() == (out / "checkpoint.json").read_bytes()


def test_train_rejects_agent_mismatch(tmp_path, dataset):
    out = tmp_path / "bad"
    assert main(["train", "psn", "--data", str(dataset), "--agents", "5", "--out", str(out)]) == 2
    assert not (out / "checkpoint.json").exists()
    assert main(["train", "psn", "--data", str(tmp_path / "nope.json"), "--out", str(out)]) == 2


def test_eval_three_methods(tmp_path):
    out = tmp_path / "ev"
    args = ["eval", "--count", "2", "--steps", "5", "--resamples", "20", "--methods", "all,knn:1,distance:1"]
    assert main(args + ["--out", str(out), "--workers", "1"]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert len(lines) == 4
    header = lines[0].split(",")
    row = dict(zip(header, lines[1].split(",")))
    assert row["method"] == "all" and float(row["consistency_mean"]) == 1.0


def test_eval_psn_without_checkpoint(tmp_path):
    assert main(["eval", "--methods", "psn-rank:1", "--count", "1", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--methods", "bogus", "--count", "1", "--out", str(tmp_path)]) == 2


def test_simulate_and_plot(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--agents", "3", "--steps", "5", "--method", "knn:1", "--out", str(sim)]) == 0
    trace = sim / "trace.jsonl"
    assert len(trace.read_text().splitlines()) == 6
    assert main(["plot", str(trace), "--out", str(tmp_path / "fig.svg")]) == 0
    svg = (tmp_path / "fig.svg").read_text()
    assert svg.startswith("<svg") and 'id="agent-0"' in svg
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["plot", str(empty), "--out", str(tmp_path / "e.svg")]) == 2
    assert main(["plot", str(tmp_path / "none.jsonl")]) == 2


def test_bad_arguments():
    assert main(["frobnicate"]) == 2
    assert main(["train", "psn"]) == 2
