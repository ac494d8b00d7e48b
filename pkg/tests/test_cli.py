import csv
import json

import pytest

from tsqat.cli import main
from tsqat.config import ExperimentConfig
from tsqat.model import ModelConfig
from tsqat.training import TrainConfig


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_analyze_presets(capsys):
    code, out, _ = run(capsys, "analyze", "--preset", "all-aq")
    assert code == 0
    assert "total zero-point operations: 29417" in out
    assert "73.13 KB" in out and "3.015x" in out
    _, out, _ = run(capsys, "analyze", "--preset", "all-sq")
    assert "total zero-point operations: 0" in out
    _, out, _ = run(capsys, "analyze", "--preset", "all-sq", "--bits", "4")
    assert "4.541x" in out


def test_analyze_is_deterministic(capsys, tmp_path):
    _, a, _ = run(capsys, "analyze", "--preset", "sq+aq", "--layer-bits", "L8=8", "--bits", "4",
                  "--csv", str(tmp_path))
    _, b, _ = run(capsys, "analyze", "--preset", "sq+aq", "--layer-bits", "L8=8", "--bits", "4")
    assert a == b
    rows = list(csv.reader((tmp_path / "overhead.csv").open()))
    assert rows[-1] == ["total", "", "", "29417"]


def test_usage_errors(capsys):
    assert run(capsys, "analyze", "--preset", "sq+apq")[0] == 1
    assert run(capsys, "analyze", "--preset", "nope")[0] == 1
    assert run(capsys, "analyze", "--layer-bits", "L9=4")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "prepare", "--out", "x.npz")[0] == 1


def test_data_errors(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,PM1\n0,1\n")
    assert run(capsys, "prepare", "--input", str(bad), "--out", str(tmp_path / "d.npz"))[0] == 2
    assert run(capsys, "infer", "--packed", str(tmp_path / "missing.qat"),
               "--data", str(tmp_path / "d.npz"))[0] == 2
    junk = tmp_path / "junk.qat"
    junk.write_bytes(b"QATF" + b"\x00" * 20)
    assert run(capsys, "infer", "--packed", str(junk), "--data", str(tmp_path / "d.npz"))[0] == 2


@pytest.fixture
def small_setup(tmp_path, capsys):
    data = tmp_path / "data.npz"
    code, out, _ = run(capsys, "prepare", "--synthetic", "240", "--n", "8", "--test-fraction", "0.2",
                       "--out", str(data), "--input", str(tmp_path / "series.csv"))
    assert code == 0 and "train windows" in out
    cfg = ExperimentConfig(model=ModelConfig.square(m=7, n=8, d_model=8, num_heads=2),
                           training=TrainConfig(epochs=2, batch_size=32))
    cfg.save(tmp_path / "small.ini")
    return data, tmp_path / "small.ini"


def test_train_export_infer(capsys, tmp_path, small_setup):
    data, ini = small_setup
    run_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--data", str(data), "--config", str(ini), "--preset", "sq+apq",
                       "--threshold", "0.1", "--seed", "7", "--out", str(run_dir))
    assert code == 0
    summary = json.loads(out)
    assert summary["seed"] == 7
    assert {v for objs in summary["resolved_schemes"].values() for v in objs.values()} <= {"SQ", "AQ"}
    for name in ("config.ini", "metrics.csv", "apq_log.csv", "checkpoint.npz", "summary.json"):
        assert (run_dir / name).exists()
    log = list(csv.DictReader((run_dir / "apq_log.csv").open()))
    assert log and {r["scheme"] for r in log} <= {"SQ", "AQ"}
    assert all(r["scheme"] == "AQ" for r in log if r["layer"] == "L7" and r["object"] == "inputs")

    code, out, _ = run(capsys, "evaluate", "--run", str(run_dir), "--data", str(data))
    assert code == 0 and f"{summary['test_rmse']:.6f}" in out

    packed = tmp_path / "model.qat"
    assert run(capsys, "export", "--run", str(run_dir), "--out", str(packed))[0] == 0
    code, out, _ = run(capsys, "infer", "--packed", str(packed), "--data", str(data), "--run", str(run_dir),
                       "--predictions", str(tmp_path / "pred.csv"))
    assert code == 0 and "integer-path test RMSE" in out
    max_dev = float(out.split("max |int - fake-quant|:")[1].split()[0])
    assert max_dev < 1e-3


def test_train_replays_from_run_config(capsys, tmp_path, small_setup):
    data, ini = small_setup
    for tag in ("a", "b"):
        assert run(capsys, "train", "--data", str(data), "--config", str(ini), "--preset", "all-aq",
                   "--seed", "3", "--out", str(tmp_path / tag))[0] == 0
    replay = tmp_path / "replay"
    assert run(capsys, "train", "--data", str(data), "--config", str(tmp_path / "a" / "config.ini"),
               "--out", str(replay))[0] == 0
    a = (tmp_path / "a" / "metrics.csv").read_text()
    assert a == (tmp_path / "b" / "metrics.csv").read_text() == (replay / "metrics.csv").read_text()


def test_sweep_and_ablate(capsys, tmp_path, small_setup):
    data, ini = small_setup
    code, out, _ = run(capsys, "sweep", "--data", str(data), "--config", str(ini), "--preset", "sq+apq",
                       "--seeds", "2", "--epochs", "1", "--out", str(tmp_path / "sweep"))
    assert code == 0 and "least overhead" in out
    assert len((tmp_path / "sweep" / "sweep.csv").read_text().splitlines()) == 3
    code, out, _ = run(capsys, "ablate", "--data", str(data), "--config", str(ini), "--preset", "all-aq",
                       "--epochs", "1", "--layers", "L1", "L8", "--out", str(tmp_path / "abl"))
    assert code == 0 and "most sensitive layer" in out
    assert len((tmp_path / "abl" / "ablation.csv").read_text().splitlines()) == 3
