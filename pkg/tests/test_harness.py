import json

import numpy as np
import pytest

from curvstep import harness as H
from curvstep import optim as O
from helpers import write_digit_idx


BLOB_CONFIG = {
    "network": [{"kind": "dense", "out": 8}, "tanh", {"kind": "dense", "out": 2}, "cross-entropy"],
    "dataset": {"kind": "blobs", "classes": 2, "per_class": 60, "dim": 6, "test_per_class": 20},
    "epochs": 2,
    "batch_size": 32,
    "seed": 5,
}


def test_unknown_config_keys_rejected():
    with pytest.raises(H.ConfigError):
        H.load_config(dict(BLOB_CONFIG, typo_key=1))
    with pytest.raises(H.ConfigError):
        H.load_config(dict(BLOB_CONFIG, schedule={"kind": "red", "bogus": 2}))
    with pytest.raises(H.ConfigError):
        H.load_config({"network": [], "dataset": {}})


def test_config_defaults_mirror_conventions():
    cfg = H.load_config(BLOB_CONFIG)
    assert cfg.beta3 == 0.9
    assert cfg.beta2 == 0.999
    assert cfg.eps == 1e-8
    assert cfg.lam == 1e-7
    assert cfg.batch_size == 32
    assert cfg.schedule.kind == "red"
    assert cfg.schedule.ell0 == 1.0
    assert cfg.schedule.eta == 0.5
    assert cfg.denom_const == 2.0


def test_momentum_defaults_scale_ell0():
    cfg = H.load_config(dict(BLOB_CONFIG, optimizer="momentum", beta1=0.9))
    assert cfg.schedule.ell0 == pytest.approx(0.1, rel=1e-12)
    assert cfg.abs_rule
    cfg = H.load_config(dict(BLOB_CONFIG, optimizer="momentum",
                             schedule={"kind": "red", "ell0": 0.7}))
    assert cfg.schedule.ell0 == 0.7


def test_zero_schedule_leaves_parameters_unchanged():
    cfg = H.load_config(dict(BLOB_CONFIG, schedule={"kind": "constant", "ell": 0.0}))
    res = H.train(cfg)
    fresh = H.build_network(cfg.network, (6,), 2, H.derive_seed(cfg.seed, 7))
    for (_, a), (_, b) in zip(res.params.segments, fresh.params.segments):
        assert np.array_equal(a.array, b.array)


def test_training_is_deterministic(tmp_path):
    rows1 = H.train(H.load_config(BLOB_CONFIG)).rows
    rows2 = H.train(H.load_config(BLOB_CONFIG)).rows
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    H.write_metrics_csv(rows1, str(p1))
    H.write_metrics_csv(rows2, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_metrics_rows_shape():
    res = H.train(H.load_config(BLOB_CONFIG))
    iter_rows = [r for r in res.rows if r.iteration is not None]
    epoch_rows = [r for r in res.rows if r.iteration is None]
    assert len(epoch_rows) == 2
    assert len(iter_rows) == res.summary["iterations"]
    for row in iter_rows:
        assert row.train_loss is not None
        assert row.pass_units == 3.0
        assert row.L_tilde >= row.c_k
        assert row.L_tilde >= row.c_tilde
    for row in epoch_rows:
        assert row.q_n == 1.0  # plain-gradient directions always descend
        assert row.test_loss is not None
        assert row.test_accuracy is not None


def test_checkpointed_rows_match_plain():
    plain = H.train(H.load_config(BLOB_CONFIG)).rows
    ck = H.train(H.load_config(dict(BLOB_CONFIG, executor="checkpointed"))).rows
    assert len(plain) == len(ck)
    for a, b in zip(plain, ck):
        if a.iteration is None:
            assert a.train_loss == b.train_loss
            continue
        for field in ("train_loss", "effective_step", "ell", "r_k", "c_k",
                      "c_tilde", "L_tilde", "dir_dot_grad"):
            va, vb = getattr(a, field), getattr(b, field)
            assert va == pytest.approx(vb, rel=1e-12), field
        assert b.pass_units == 4.0


def test_train_loss_includes_regularization():
    cfg = H.load_config(dict(BLOB_CONFIG, schedule={"kind": "constant", "ell": 0.0},
                             **{"lambda": 1.0}))
    res = H.train(cfg)
    net = H.build_network(cfg.network, (6,), 2, H.derive_seed(cfg.seed, 7))
    from curvstep.tensor import norm_sq
    reg = 0.5 * norm_sq(net.params)
    assert res.rows[0].train_loss > reg  # loss plus the (large) penalty term


def test_rmsprop_mode_runs_and_descends():
    cfg = H.load_config(dict(BLOB_CONFIG, optimizer="rmsprop", epochs=3))
    res = H.train(cfg)
    epoch_rows = [r for r in res.rows if r.iteration is None]
    assert all(r.q_n == 1.0 for r in epoch_rows)
    assert res.summary["final_train_loss"] < res.summary["initial_train_loss"]


def test_momentum_mode_uses_absolute_step():
    cfg = H.load_config(dict(BLOB_CONFIG, optimizer="momentum", epochs=3))
    res = H.train(cfg)
    for row in res.rows:
        if row.iteration is not None and row.effective_step is not None:
            assert row.effective_step >= 0.0


def test_robbins_monro_clamps_effective_step():
    sched = {"kind": "constant", "ell": 1.0,
             "robbins_monro": {"alpha": 1e-6, "beta": 1e-3, "delta": 0.7}}
    cfg = H.load_config(dict(BLOB_CONFIG, schedule=sched))
    res = H.train(cfg)
    for row in res.rows:
        if row.iteration is None or row.effective_step is None:
            continue
        k = row.iteration + 1
        band = row.effective_step * k ** 0.7
        assert 1e-6 - 1e-15 <= band <= 1e-3 + 1e-15


def test_idx_dataset_with_split(tmp_path):
    images, labels = write_digit_idx(120, 9, str(tmp_path))
    cfg = H.load_config({
        "network": [{"kind": "dense", "out": 10}, "cross-entropy"],
        "dataset": {"kind": "idx", "images": images, "labels": labels,
                    "limit": 100, "test_fraction": 0.2},
        "epochs": 1,
        "batch_size": 32,
        "seed": 0,
    })
    res = H.train(cfg)
    assert res.summary["iterations"] == 3  # 80 train samples in batches of 32


def test_memory_capacity_grows_effective_batch():
    cfg = H.load_config(dict(BLOB_CONFIG, memory_capacity=64, batch_size=16, epochs=1))
    res = H.train(cfg)
    assert res.summary["iterations"] > 0


# ---------------------------------------------------------------------------
# demos and smoothing

def test_newton_demo_matches_cubing_map():
    traj = H.demo_newton_1d(1.5, 3)
    expect = [1.5, -3.375, 38.443359375]
    for got, want in zip(traj, expect):
        assert got == pytest.approx(want, rel=1e-10)


def test_newton_demo_contraction_branch():
    traj = H.demo_newton_1d(0.5, 3)
    assert traj[1] == pytest.approx(-0.125, rel=1e-10)
    assert abs(traj[-1]) < 1e-6


def test_newton_demo_period_two_boundary():
    traj = H.demo_newton_1d(1.0, 4)
    for k, value in enumerate(traj):
        assert abs(value) == pytest.approx(1.0, rel=1e-10)
        assert value == pytest.approx((-1.0) ** k, rel=1e-10)


def test_stochastic_mean_lands_on_batch_mean():
    out = H.demo_stochastic_mean(40, 3, 8, 6, seed=3)
    for theta, mean in zip(out["trajectory"], out["batch_means"]):
        assert np.max(np.abs(theta - mean)) < 1e-12


def test_stochastic_mean_full_batch_converges_immediately():
    out = H.demo_stochastic_mean(16, 2, 16, 4, seed=1)
    for theta in out["trajectory"]:
        assert np.max(np.abs(theta - out["population_mean"])) < 1e-12


def test_ema_report():
    assert H.ema_report([2.0, 2.0, 2.0]).tolist() == [2.0, 2.0, 2.0]
    impulse = H.ema_report([1.0, 0.0, 0.0])
    assert impulse.tolist() == pytest.approx([1.0, 0.99, 0.9801], rel=1e-12)
    ident = H.ema_report([3.0, 1.0, 4.0], factor=0.0)
    assert ident.tolist() == [3.0, 1.0, 4.0]
    with pytest.raises(ValueError):
        H.ema_report([])


def test_epoch_seeds_differ_by_epoch():
    assert H.derive_seed(0, 0) != H.derive_seed(0, 1)
    assert H.derive_seed(0, 1) == H.derive_seed(0, 1)
