import csv
import json
import math

import pytest

from pricelevels.cli import (MATRIX_COLUMNS, STAGES, PipelineConfig, StageError, experiment_matrix, main,
                             run_pipeline, sha256)

SMALL = {
    "synth": {"contracts": 2, "n_ticks": 50_000},
    "model": {"grid": {"depth": [2, 3], "iterations": [20, 40], "learning_rate": [0.3]},
              "base": {"depth": 3, "iterations": 20, "learning_rate": 0.3}, "folds": 3},
    "explain": {"background": 10, "max_rows": 40, "top_k": 10},
    "seed": 5,
}


def small_config(**over):
    return PipelineConfig.from_dict({**json.loads(json.dumps(SMALL)), **over})


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    manifest = run_pipeline(small_config(), out_dir=out)
    return out, manifest


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_manifest_has_every_stage(pipeline):
    out, manifest = pipeline
    assert [e["stage"] for e in manifest["stages"]] == list(STAGES)
    for entry in manifest["stages"]:
        assert entry["outputs"]
        for rel, digest in entry["outputs"].items():
            assert sha256(out / rel) == digest
    assert (out / "manifest.json").exists()
    assert set(manifest["source"]["outputs"]) == {"events/SYN1.bin", "events/SYN1.ground_truth.csv",
                                                  "events/SYN2.bin", "events/SYN2.ground_truth.csv"}


def test_stage_inputs_are_upstream_outputs(pipeline):
    _, manifest = pipeline
    produced = dict(manifest["source"]["outputs"])
    for entry in manifest["stages"]:
        for rel, digest in entry["inputs"].items():
            assert produced.get(rel) == digest, rel
        produced.update(entry["outputs"])


def test_manifest_alone_reproduces_the_run(pipeline, tmp_path):
    out, manifest = pipeline
    cfg = PipelineConfig.from_dict(manifest["config"])
    again = run_pipeline(cfg, out_dir=tmp_path)
    assert again == manifest
    assert (tmp_path / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()


def test_rerunning_a_stage_keeps_hashes(pipeline):
    out, manifest = pipeline
    again = run_pipeline(small_config(), ["detect", "features"], out_dir=out)
    assert again == manifest


def test_deleting_downstream_leaves_upstream_alone(pipeline):
    out, manifest = pipeline
    for p in (out / "report").iterdir():
        p.unlink()
    again = run_pipeline(small_config(), ["ticks", "detect"], out_dir=out)
    before = {e["stage"]: e for e in manifest["stages"]}
    after = {e["stage"]: e for e in again["stages"]}
    assert after["ticks"] == before["ticks"] and after["detect"] == before["detect"]
    run_pipeline(small_config(), ["report"], out_dir=out)
    assert run_pipeline(small_config(), ["report"], out_dir=out) == manifest


def test_label_without_features_names_the_missing_stage(tmp_path):
    cfg = small_config()
    run_pipeline(cfg, ["ticks"], out_dir=tmp_path)
    with pytest.raises(StageError, match="run stage 'features' first"):
        run_pipeline(cfg, ["label"], out_dir=tmp_path)


def test_cli_failure_exit_code(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    assert main(["ticks", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 0
    assert main(["label", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "stage 'label'" in err and "features" in err


def test_unknown_config_key_rejected():
    with pytest.raises(ValueError, match="unknown config keys"):
        PipelineConfig.from_dict({**SMALL, "colour": 1})


def test_config_needs_a_data_source():
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"seed": 1})


def test_walk_forward_table(pipeline):
    out, _ = pipeline
    (row,) = read_csv(out / "train" / "walk_forward.csv")
    assert (row["train"], row["test"], row["rebound"]) == ("SYN1", "SYN2", "15")
    preds = read_csv(out / "train" / "SYN1__SYN2.predictions.csv")
    assert int(row["n_test"]) == len(preds)
    predicted = [p for p in preds if p["predicted"] == "1"]
    assert int(row["n_predicted"]) == len(predicted)
    if predicted:
        hits = sum(p["label"] == "1" for p in predicted)
        assert float(row["precision"]) == hits / len(predicted)


def test_backtest_report_matches_trades(pipeline):
    out, _ = pipeline
    rep = json.loads((out / "backtest" / "SYN2" / "report.json").read_text())
    trades = read_csv(out / "backtest" / "SYN2" / "trades.csv")
    cents = sum(round(float(t["net"]) * 100) for t in trades)
    assert round(rep["total_net"] * 100) == cents
    gross = sum(round(float(t["gross"]) * 100) for t in trades)
    assert cents == gross - 420 * len(trades)


def test_eval_subcommand(pipeline, capsys):
    out, _ = pipeline
    code = main(["eval", "--model", str(out / "train" / "SYN1.model.json"), "--data",
                 str(out / "labels" / "SYN2.csv"), "--thresholds", "0.5,0.9"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "threshold,precision,n_predicted" and len(lines) == 3


@pytest.fixture(scope="module")
def matrix(pipeline):
    out, _ = pipeline
    return out, experiment_matrix(small_config(), [5, 10, 15], out_dir=out)


def test_matrix_rows(matrix):
    _, path = matrix
    rows = read_csv(path)
    assert list(rows[0]) == list(MATRIX_COLUMNS)
    assert [(r["train"], r["test"], r["rebound"]) for r in rows] == [("SYN1", "SYN2", str(k)) for k in (5, 10, 15)]
    assert all(r["status"] == "ok" for r in rows)


def test_matrix_sharpe_matches_cell_outputs(matrix):
    out, path = matrix
    for r in read_csv(path):
        folder = out / "matrix" / f"rebound_{r['rebound']}" / "SYN1__SYN2"
        rep = json.loads((folder / "report.json").read_text())
        sharpe_rows = read_csv(folder / "sharpe.csv")
        on_disk = float(sharpe_rows[-1]["sharpe"]) if sharpe_rows and sharpe_rows[-1]["sharpe"] else None
        table = float(r["sharpe"]) if r["sharpe"] else None
        assert table == rep["sharpe"] == on_disk or (table is None and rep["sharpe"] is None)
        assert float(r["net"]) == rep["total_net"]
        assert int(r["trades"]) == len(read_csv(folder / "trades.csv"))


def test_matrix_is_reproducible(matrix, tmp_path):
    out, path = matrix
    cfg = small_config()
    run_pipeline(cfg, ["ticks", "detect", "features"], out_dir=tmp_path)
    again = experiment_matrix(cfg, [5, 10, 15], out_dir=tmp_path)
    assert again.read_bytes() == path.read_bytes()


def test_matrix_marks_failed_cells(pipeline, tmp_path):
    cfg = small_config(label={"cross_ticks": 3, "rebound_ticks": 15})
    run_pipeline(cfg, ["ticks", "detect", "features"], out_dir=tmp_path)
    (tmp_path / "features" / "SYN1.csv").write_text("broken\n")
    rows = read_csv(experiment_matrix(cfg, [5], out_dir=tmp_path))
    assert len(rows) == 1 and rows[0]["status"].startswith("failed")


def test_sharpe_is_finite_or_empty(pipeline):
    out, _ = pipeline
    for r in read_csv(out / "backtest" / "SYN2" / "sharpe.csv"):
        assert r["sharpe"] == "" or math.isfinite(float(r["sharpe"]))
