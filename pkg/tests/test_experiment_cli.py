import csv
import io
import json

import numpy as np
import pytest

from cltr_lab import cli
from cltr_lab.experiment import (
    ExperimentSpec,
    SpecError,
    emit_results,
    load_results,
    parse_sim,
    run_experiment,
    verify_manifest,
    worker_count,
)

TINY_DATASET = {
    "n_queries": 80,
    "docs_per_query": 10,
    "feature_dim": 5,
    "relevant_fraction": 0.2,
    "k": 10,
    "init_sample": 20,
    "seed": 4,
}
TINY_TRAIN = {"steps": 60, "eval_every": 30, "batch_size": 64}


def tiny_spec(**over):
    d = {
        "sims": ["dcm_0.6_1.0"],
        "methods": ["pbm-ips", "cm-ips"],
        "repeats": 2,
        "clicks": 3000,
        "dataset": TINY_DATASET,
        "train": TINY_TRAIN,
    }
    d.update(over)
    return ExperimentSpec.from_dict(d)


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("CLTR_LAB_THREADS", "1")


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    import os

    os.environ["CLTR_LAB_THREADS"] = "1"
    result = run_experiment(tiny_spec(), out)
    return out, result


# --- spec validation ------------------------------------------------------


@pytest.mark.parametrize("bad", [
    {"repeats": 0},
    {"repeats": 1.5},
    {"methods": ["cm-ips(magic)"]},
    {"methods": ["pbm-ips", "pbm-ips(oracle)"]},
    {"sims": ["dcm_0.6"]},
    {"sims": []},
    {"sims": ["pbm_1.0", "pbm_1.0"]},
    {"selection": ["tanh"]},
    {"train": {"lr": -1.0}},
    {"train": {"momentum": 0.9}},
    {"colour": "blue"},
    {"sims": [{"label": "x", "params": {"kind": "dcm", "beta": 2.0, "eta": 1.0}}]},
])
def test_spec_rejects_invalid(bad):
    with pytest.raises(SpecError):
        tiny_spec(**bad)


def test_spec_requires_sims_and_methods():
    with pytest.raises(SpecError):
        ExperimentSpec.from_dict({"sims": ["pbm_1.0"]})


def test_sim_labels_parse():
    assert parse_sim("dcm_0.6_0.5") == {"kind": "dcm", "beta": 0.6, "eta": 0.5}
    assert parse_sim("pbm_2.0") == {"kind": "pbm", "eta": 2.0}
    assert parse_sim("ccm_1.0_0.5_0.5")["alpha3"] == 0.5


def test_spec_load_reports_unreadable(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text("{not json")
    with pytest.raises(SpecError):
        ExperimentSpec.load(p)


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("CLTR_LAB_THREADS", "3")
    assert worker_count(10) == 3
    assert worker_count(2) == 2
    monkeypatch.setenv("CLTR_LAB_THREADS", "lots")
    with pytest.raises(SpecError):
        worker_count(4)


# --- grid -----------------------------------------------------------------


def test_grid_shape(grid):
    _, result = grid
    assert not result.failed
    keys = sorted((c["sim"], c["method"], c["repeat"]) for c in result.cells)
    assert len(keys) == 6
    assert [k for k in keys if k[0] == "skyline"] == [("skyline", "full-info", 0), ("skyline", "full-info", 1)]
    assert {k[1] for k in keys if k[0] != "skyline"} == {"pbm-ips(oracle)", "cm-ips(oracle)"}
    for c in result.cells:
        assert 0.0 <= c["ndcg10"] <= 1.0


def test_methods_share_click_log(grid):
    _, result = grid
    by_repeat = {}
    for c in result.cells:
        if c["sim"] != "skyline":
            by_repeat.setdefault(c["repeat"], set()).add((c["n_sessions"], c["n_clicks"]))
    assert all(len(v) == 1 for v in by_repeat.values())


def test_repeats_draw_different_logs():
    from cltr_lab import experiment

    spec = tiny_spec()
    experiment._init_worker(spec.to_dict(), experiment.build_dataset(spec.dataset))
    _, a = experiment._click_log("dcm_0.6_1.0", 0)
    _, b = experiment._click_log("dcm_0.6_1.0", 1)
    assert [s.query_id for s in a] != [s.query_id for s in b]


def test_rerun_is_identical(grid, tmp_path):
    _, first = grid
    again = run_experiment(tiny_spec(), tmp_path)
    assert again.matrix() == first.matrix()


def test_manifest_verifies_and_detects_tampering(grid, tmp_path):
    out, _ = grid
    assert verify_manifest(out) == []
    manifest = json.loads((out / "manifest.json").read_text())
    for name in manifest["files"]:
        assert (out / name).exists()
    assert "results.csv" in manifest["files"]
    assert manifest["failed"] == []

    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "results.csv").write_text("tampered\n")
    assert verify_manifest(copy) == ["results.csv"]


def test_single_cell_rerun_is_bit_identical(grid, tmp_path):
    import shutil

    out, _ = grid
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cell = copy / "cells" / "dcm_0.6_1.0__cm-ips-oracle__r1.json"
    original = cell.read_bytes()
    cell.unlink()
    run_experiment(tiny_spec(), copy, only=[("dcm_0.6_1.0", "cm-ips(oracle)", 1)])
    assert cell.read_bytes() == original
    assert (copy / "results.csv").read_bytes() == (out / "results.csv").read_bytes()
    assert verify_manifest(copy) == []


# a continuation vector shorter than the lists passes validation but fails at simulation time
SHORT_SIM = [{"label": "short", "params": {"kind": "dcm", "lambda": [0.5, 0.5]}}]


def test_failing_cells_are_recorded(tmp_path):
    result = run_experiment(tiny_spec(repeats=1, methods=["no-ips", "cm-ips(mle)"], sims=SHORT_SIM), tmp_path)
    assert len(result.failed) == 2
    assert all("covers 2 ranks" in f["error"] for f in result.failed)
    ok = [c for c in result.cells if c["status"] == "ok"]
    assert [c["sim"] for c in ok] == ["skyline"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["failed"]) == 2
    assert verify_manifest(tmp_path) == []


# --- emission -------------------------------------------------------------


def test_emit_four_cells():
    matrix = [("s", "a", 0, 0.5), ("s", "a", 1, 0.7), ("s", "b", 0, 0.4), ("s", "b", 1, 0.45)]
    text, summary = emit_results(matrix)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 4
    assert list(rows[0]) == ["sim", "method", "repeat", "ndcg10"]
    assert summary["means"]["s"]["a"] == pytest.approx(0.6)
    assert summary["n"]["s"] == {"a": 2, "b": 2}
    assert summary["p_values"]["s"]["a"]["b"] == summary["p_values"]["s"]["b"]["a"]


def test_emit_rejects_empty():
    with pytest.raises(ValueError):
        emit_results([])


def test_summary_means_match_csv(grid):
    out, _ = grid
    rows = list(csv.DictReader(io.StringIO((out / "results.csv").read_text())))
    summary = json.loads((out / "summary.json").read_text())
    groups = {}
    for r in rows:
        groups.setdefault((r["sim"], r["method"]), []).append(float(r["ndcg10"]))
    for (sim, method), values in groups.items():
        assert summary["means"][sim][method] == pytest.approx(np.mean(values), abs=1e-12)
    pv = summary["p_values"]["dcm_0.6_1.0"]
    assert pv["pbm-ips(oracle)"]["cm-ips(oracle)"] == pv["cm-ips(oracle)"]["pbm-ips(oracle)"]


# --- command line ---------------------------------------------------------


def _spec_file(tmp_path, **over):
    spec = tiny_spec(**over).to_dict()
    spec["out"] = None
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec))
    return p


def test_cli_run_and_emit(grid, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", "--spec", str(_spec_file(tmp_path)), "--out", str(out)]) == 0
    assert (out / "results.csv").read_bytes() == (grid[0] / "results.csv").read_bytes()
    csv_path, summary_path = tmp_path / "r.csv", tmp_path / "s.json"
    assert cli.main(["emit", "--in", str(out), "--csv", str(csv_path), "--summary", str(summary_path)]) == 0
    assert csv_path.read_text() == (out / "results.csv").read_text()
    assert load_results(out).matrix()


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sims": ["dcm_0.6_1.0"], "methods": ["magic"]}))
    assert cli.main(["run", "--spec", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["run", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["frobnicate"]) == 2
    partial = _spec_file(tmp_path, repeats=1, methods=["no-ips"], sims=SHORT_SIM)
    assert cli.main(["run", "--spec", str(partial), "--out", str(tmp_path / "p")]) == 1
    assert "FAILED" in capsys.readouterr().err


def test_cli_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["prepare", "--synthetic", "--n-queries", "80", "--docs-per-query", "10",
                     "--feature-dim", "5", "--relevant-fraction", "0.2", "--k", "10",
                     "--init-sample", "20", "--out", str(data)]) == 0
    assert (data / "train.jsonl").exists() and (data / "initial_ranker.json").exists()
    log = tmp_path / "log.jsonl"
    assert cli.main(["simulate", "--model", "dcm", "--beta", "0.6", "--eta", "1.0", "--clicks", "2000",
                     "--data", str(data), "--out", str(log)]) == 0
    prop = tmp_path / "prop.json"
    assert cli.main(["propensity", "--method", "dcm-mle", "--log", str(log), "--k", "10",
                     "--out", str(prop)]) == 0
    assert json.loads(prop.read_text())["params"]["kind"] == "dcm"
    model = tmp_path / "model.json"
    assert cli.main(["train", "--mode", "ips", "--propensity", str(prop), "--log", str(log), "--data", str(data),
                     "--steps", "50", "--eval-every", "25", "--out", str(model),
                     "--curve", str(tmp_path / "curve.csv")]) == 0
    assert (tmp_path / "curve.csv").read_text().startswith("clicks_consumed,ndcg_at_10")
    report = tmp_path / "eval.csv"
    assert cli.main(["evaluate", "--model", str(model), "--data", str(data), "--out", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "query_id,ndcg10" and len(lines) > 1
    cands = tmp_path / "cands.json"
    cands.write_text(json.dumps([{"label": "PBM", "params": {"kind": "pbm", "eta": 1.0}},
                                 {"label": "CM", "params": json.loads(prop.read_text())["params"]}]))
    sel = tmp_path / "sel.json"
    assert cli.main(["select", "--log", str(log), "--candidates", str(cands), "--model", str(model),
                     "--data", str(data), "--out", str(sel)]) == 0
    assert json.loads(sel.read_text())["chosen"] in ("PBM", "CM")


def test_cli_train_ips_needs_propensity(tmp_path, capsys):
    data = tmp_path / "data"
    cli.main(["prepare", "--synthetic", "--n-queries", "40", "--docs-per-query", "8", "--feature-dim", "4",
              "--relevant-fraction", "0.3", "--k", "8", "--init-sample", "10", "--out", str(data)])
    assert cli.main(["train", "--mode", "ips", "--data", str(data), "--out", str(tmp_path / "m.json")]) == 2


def test_process_pool_matches_inline(grid, tmp_path, monkeypatch):
    monkeypatch.setenv("CLTR_LAB_THREADS", "2")
    pooled = run_experiment(tiny_spec(), tmp_path)
    assert pooled.matrix() == grid[1].matrix()
    assert (tmp_path / "results.csv").read_bytes() == (grid[0] / "results.csv").read_bytes()
