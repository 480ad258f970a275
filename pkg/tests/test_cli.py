import json
import os

import numpy as np
import pytest

from curvstep import cli


BLOB_CONFIG = {
    "network": [{"kind": "dense", "out": 4}, "tanh", {"kind": "dense", "out": 2}, "cross-entropy"],
    "dataset": {"kind": "blobs", "classes": 2, "per_class": 40, "dim": 4, "test_per_class": 10},
    "epochs": 1,
    "batch_size": 16,
    "seed": 0,
}


def write_config(tmp_path, doc=None):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc or BLOB_CONFIG))
    return str(path)


def test_train_missing_config_exits_2(tmp_path, capsys):
    code = cli.main(["train", "--config", str(tmp_path / "absent.json")])
    assert code == 2
    assert "cannot read config" in capsys.readouterr().err


def test_train_bad_config_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, dict(BLOB_CONFIG, mystery=1))
    assert cli.main(["train", "--config", path]) == 2


def test_train_writes_metrics_and_summary(tmp_path, capsys):
    path = write_config(tmp_path)
    code = cli.main(["train", "--config", path, "--out-dir", str(tmp_path)])
    assert code == 0
    metrics = tmp_path / "run_metrics.csv"
    summary = tmp_path / "run_summary.json"
    assert metrics.exists() and summary.exists()
    header = metrics.read_text().splitlines()[0]
    assert header.split(",") == list(
        ("epoch", "iteration", "train_loss", "effective_step", "ell", "r_k", "c_k",
         "c_tilde", "L_tilde", "dir_dot_grad", "q_n", "test_loss", "test_accuracy",
         "pass_units", "peak_activation_slots"))


def test_train_flag_overrides_reflected_in_summary(tmp_path):
    path = write_config(tmp_path)
    code = cli.main(["train", "--config", path, "--lambda", "1e-4", "--seed", "7",
                     "--schedule", "constant:0.25", "--out-dir", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "run_summary.json").read_text())
    assert summary["config"]["lambda"] == 1e-4
    assert summary["config"]["seed"] == 7
    assert summary["config"]["schedule"] == {"kind": "constant", "ell": 0.25}


def test_train_numeric_abort_exit_1(tmp_path, capsys):
    # a wild first step saturates every softmax: the next batch has exactly
    # one-hot probabilities, whose curvature form vanishes while the gradient
    # does not; with lambda = 0 that is the locally-linear failure mode
    doc = dict(BLOB_CONFIG, schedule={"kind": "constant", "ell": 1e200},
               epochs=2, beta3=0.0,
               dataset={"kind": "blobs", "classes": 2, "per_class": 40, "dim": 4,
                        "test_per_class": 10, "spread": 0.1},
               **{"lambda": 0.0})
    path = write_config(tmp_path, doc)
    code = cli.main(["train", "--config", path, "--out-dir", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err
    assert "numeric failure" in err
    assert "lambda" in err


def test_check_command_passes(capsys):
    assert cli.main(["check", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "all checks passed" in out


def test_check_layer_adjudication(capsys):
    assert cli.main(["check", "--layer", "normalizing"]) == 0
    out = capsys.readouterr().out
    assert "derived" in out and "printed" in out
    assert "adopted: derived" in out


def test_check_bad_sizes_exit_2(capsys):
    assert cli.main(["check", "--sizes", "4,nope"]) == 2


def test_bench_ratios(capsys):
    assert cli.main(["bench", "--layers", "8", "--width", "6"]) == 0
    out = capsys.readouterr().out
    modes = ("gradient_only", "plain_curvature", "checkpointed")
    lines = {ln.split()[0]: ln.split() for ln in out.splitlines() if ln.split() and ln.split()[0] in modes}
    assert float(lines["gradient_only"][2]) == 1.0
    assert float(lines["plain_curvature"][2]) == 1.5
    assert float(lines["checkpointed"][2]) == 2.0
    grad_peak = int(lines["gradient_only"][3])
    ck_peak = int(lines["checkpointed"][3])
    assert ck_peak <= grad_peak + 1
    assert "split" in out


def test_demo_newton(capsys):
    assert cli.main(["demo", "newton1d", "--theta0", "1.5", "--steps", "3"]) == 0
    out = capsys.readouterr().out
    values = [float(line.split()[-1]) for line in out.splitlines()]
    assert values[0] == pytest.approx(1.5)
    assert values[1] == pytest.approx(-3.375, rel=1e-10)
    assert values[2] == pytest.approx(38.443359375, rel=1e-10)
    assert values[3] == pytest.approx(-5.6815128662e4, rel=1e-6)


def test_demo_newton_contraction(capsys):
    assert cli.main(["demo", "newton1d", "--theta0", "0.5", "--steps", "4"]) == 0
    values = [float(line.split()[-1]) for line in capsys.readouterr().out.splitlines()]
    assert abs(values[-1]) < 1e-6


def test_demo_unknown_name_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["demo", "mystery"])
    assert exc.value.code == 2


def test_demo_stochastic_mean(capsys):
    assert cli.main(["demo", "stochastic-mean", "--steps", "3", "--batch-size", "4"]) == 0
    out = capsys.readouterr().out
    assert "population mean" in out
