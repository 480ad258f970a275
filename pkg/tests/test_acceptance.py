"""Acceptance suite: one test per criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines.  Every tolerance is pinned here; nothing is deferred to calibration.
"""

import time

import numpy as np
import pytest

from curvstep import checks
from curvstep import engine as E
from curvstep import harness as H
from curvstep import layers as L
from curvstep import optim as O
from curvstep import rescale as R
from curvstep.tensor import BatchView, ParamVec, Tensor, axpy, inner, norm_sq, scale
from helpers import mnist_paths_or_synthetic


@pytest.fixture(scope="module")
def oracle_nets():
    return checks.make_oracle_nets(0)


def _passed(n, text):
    print(f"ACCEPTANCE {n:2d} PASS - {text}")


def test_criterion_01_gradient_oracle(oracle_nets):
    started = time.perf_counter()
    kinds = set()
    for name, net, batch in oracle_nets:
        kinds.update(spec.kind for spec in net.layers)
        assert net.layer_count <= 6
        assert net.params.size <= 2000
        _, tape = E.run_forward(net, batch)
        grad, _ = E.run_backward(net, tape)
        err = checks.rel_err_vec(grad, checks.fd_gradient(net, batch, eps=1e-5))
        assert err <= 1e-6, (name, err)
    assert {"dense", "conv2d", "bias", "activation", "centering", "normalizing",
            "loss_mse", "loss_cross_entropy"} <= kinds
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0
    _passed(1, f"backprop gradient vs central differences <= 1e-6 on 5 nets ({elapsed:.1f}s)")


def test_criterion_02_curvature_oracle(oracle_nets):
    rng = np.random.default_rng(2)
    worst = 0.0
    for name, net, batch in oracle_nets:
        _, tape = E.run_forward(net, batch)
        E.run_backward(net, tape)
        for _ in range(5):
            d = checks.rand_like(net.params, rng)
            qform, _ = E.tangent_curvature(net, tape, d)
            got = float(np.mean(qform.array))
            want = checks.fd_second_directional(net, batch, d, tau=1e-4)
            err = checks.rel_err(got, want, floor=1e-6)
            assert err <= 1e-4, (name, got, want, err)
            worst = max(worst, err)
    _passed(2, f"directional curvature vs second differences <= 1e-4 (worst {worst:.2e})")


def test_criterion_03_hvp_consistency(oracle_nets):
    rng = np.random.default_rng(3)
    for name, net, batch in oracle_nets:
        _, tape = E.run_forward(net, batch)
        E.run_backward(net, tape)
        u = checks.rand_like(net.params, rng)
        v = checks.rand_like(net.params, rng)
        hu = E.hessian_vector_product(net, tape, u)
        hv = E.hessian_vector_product(net, tape, v)
        qform, _ = E.tangent_curvature(net, tape, u)
        assert checks.rel_err(inner(hu, u), float(np.mean(qform.array)), floor=1e-9) <= 1e-9, name
        assert checks.rel_err(inner(hu, v), inner(u, hv), floor=1e-9) <= 1e-9, name
    _passed(3, "hvp quadratic form and symmetry <= 1e-9")


def test_criterion_04_duality(oracle_nets):
    rng = np.random.default_rng(4)
    for name, net, batch in oracle_nets:
        _, tape = E.run_forward(net, batch)
        grad, _ = E.run_backward(net, tape)
        for _ in range(5):
            d = checks.rand_like(net.params, rng)
            _, ddg = E.tangent_curvature(net, tape, d)
            assert checks.rel_err(ddg, inner(grad, d)) <= 1e-10, name
    _passed(4, "tangent-pass gradient overlap equals inner(grad, dir) <= 1e-10")


def test_criterion_05_cost_accounting():
    for layers in (4, 6, 10, 16, 32):
        specs = []
        for i in range(layers - 1):
            specs.append(L.dense((6,), 6) if i % 2 == 0 else L.activation("tanh", (6,)))
        specs.append(L.mse_loss((6,)))
        net = E.init_network(specs, layers)
        rng = np.random.default_rng(layers + 1)
        batch = BatchView(Tensor.of(rng.normal(size=(4, 6))),
                          Tensor.of(rng.normal(size=(4, 6))), 4)
        d = checks.rand_like(net.params, rng)
        costs = E.measure_costs(net, batch, d)
        base = costs["gradient_only"].pass_units
        assert costs["gradient_only"].pass_units / base == 1.0
        assert costs["plain_curvature"].pass_units / base == 1.5
        assert costs["checkpointed"].pass_units / base == 2.0
        assert costs["checkpointed"].peak_activation_slots <= (layers + 1) // 2 + 1

        _, tape = E.run_forward(net, batch)
        grad, _ = E.run_backward(net, tape)
        qform, _ = E.tangent_curvature(net, tape, d)
        ck = E.run_checkpointed(net, batch, lambda _g: d)
        assert checks.rel_err_vec(ck.grad, grad) <= 1e-12
        denom = max(np.max(np.abs(qform.array)), 1e-30)
        assert float(np.max(np.abs(ck.per_sample_qform.array - qform.array))) / denom <= 1e-12
    _passed(5, "pass-unit ratios exactly (1.0, 1.5, 2.0); peak slots <= ceil(n/2)+1; outputs equal")


def test_criterion_06_newton_map_anchor():
    for theta0 in (1.5, -1.5, 0.5, -0.5, 1.0):
        traj = H.demo_newton_1d(theta0, 5)
        for prev, nxt in zip(traj, traj[1:]):
            want = -prev ** 3
            assert abs(nxt - want) <= 1e-10 * max(1.0, abs(want))
    diverging = H.demo_newton_1d(1.5, 5)
    assert any(abs(t) > 1e10 for t in diverging[: 5 + 1])
    converging = H.demo_newton_1d(0.5, 10)
    assert any(abs(t) < 1e-6 for t in converging[: 10 + 1])
    _passed(6, "one-step map -t^3 <= 1e-10; divergence at 1.5, convergence at 0.5")


def test_criterion_07_stochastic_mean_anchor():
    out = H.demo_stochastic_mean(64, 3, 8, 12, seed=7, theta0=10.0)
    for theta, mean in zip(out["trajectory"], out["batch_means"]):
        assert np.max(np.abs(theta - mean)) <= 1e-12
    _passed(7, "every iterate lands on the exact batch mean <= 1e-12")


def test_criterion_08_scale_invariance():
    scales = (0.01, 1.0, 100.0)
    net = E.init_network([L.dense((6,), 8), L.activation("tanh", (8,)),
                          L.dense((8,), 2), L.cross_entropy_loss(2)], 80)
    rng = np.random.default_rng(81)
    lam, denom, ell = 1e-7, 2.0, 1.0
    states = {s: R.RescaleState(beta3=0.9) for s in scales}
    worst = 0.0
    for _ in range(100):
        inputs = rng.normal(size=(16, 6))
        targets = rng.integers(0, 2, size=16).astype(np.float64)
        batch = BatchView(Tensor.of(inputs), Tensor.of(targets), 16)
        _, tape = E.run_forward(net, batch)
        grad_loss, _ = E.run_backward(net, tape)
        g = axpy(lam, net.params, grad_loss)
        updates = {}
        for s in scales:
            d = scale(s, g)
            qform, ddg_tan = E.tangent_curvature(net, tape, d)
            ddg = ddg_tan + lam * inner(d, net.params)
            states[s], out = R.rescale_step(states[s], qform, ddg, norm_sq(d), lam, denom)
            updates[s] = scale(ell * out.r_k, d)
        ref = updates[1.0]
        ref_norm = np.sqrt(norm_sq(ref))
        for s in scales:
            diff = axpy(-1.0, ref, updates[s])
            worst = max(worst, np.sqrt(norm_sq(diff)) / ref_norm)
        net = net.with_params(O.step_params(net.params, 1.0, ref))
    assert worst <= 1e-12
    _passed(8, f"update vector invariant to direction scaling over 100 iterations (worst {worst:.2e})")


def test_criterion_09_rescale_micro_anchors():
    assert R.batch_curvature(np.array([4.0, -2.0]), 2.0) == 1.5
    for beta3 in (0.0, 0.5, 0.9, 0.999):
        for c1 in (2.0, 0.3, 7.7e-3):
            _, c_tilde, _ = R.update_estimate(R.RescaleState(beta3=beta3), c1)
            assert c_tilde == c1  # exact at k = 1
    cfg = H.load_config({
        "network": [{"kind": "dense", "out": 8}, "tanh", {"kind": "dense", "out": 2}, "cross-entropy"],
        "dataset": {"kind": "blobs", "classes": 2, "per_class": 80, "dim": 5, "test_per_class": 10},
        "epochs": 3, "batch_size": 32, "seed": 9,
    })
    rows = [r for r in H.train(cfg).rows if r.iteration is not None]
    assert rows
    for row in rows:
        assert row.L_tilde >= row.c_k
        assert row.L_tilde >= row.c_tilde
    _passed(9, "abs-inside-mean 1.5 anchor; exact k=1 bias correction; L-tilde dominance per iteration")


def test_criterion_10_schedules():
    red = O.red_schedule(1.0, 0.5, 10)
    assert O.schedule_value(red, 10) == 0.5 * 1.0
    values = [O.schedule_value(red, e) for e in range(11)]
    assert all(b < a for a, b in zip(values, values[1:]))
    ran = O.annealing_schedule([(1.0, 5), (0.5, 13), (2.0, 2)])
    for epoch in (18, 19, 38, 39):
        assert O.schedule_value(ran, epoch) == 2.0
    assert O.schedule_value(ran, 0) == 1.0
    assert O.schedule_value(ran, 17) == 0.5
    _passed(10, "red decay hits eta*ell0 exactly; annealing hyperexploration slots give 2.0")


def test_criterion_11_desk_scale_training(tmp_path):
    started = time.perf_counter()
    cfg = H.load_config({
        "network": [{"kind": "dense", "out": 16}, "tanh", {"kind": "dense", "out": 2}, "cross-entropy"],
        "dataset": {"kind": "blobs", "classes": 2, "per_class": 500, "dim": 16, "test_per_class": 100},
        "epochs": 5, "batch_size": 256, "seed": 0,
    })
    res = H.train(cfg)
    blob_elapsed = time.perf_counter() - started
    assert res.summary["final_train_loss"] < 0.5 * res.summary["initial_train_loss"]
    for row in res.rows:
        if row.iteration is None:
            assert row.q_n == 1.0
    assert blob_elapsed < 30.0

    started = time.perf_counter()
    images, labels = mnist_paths_or_synthetic(6600, 12345, str(tmp_path))
    cfg = H.load_config({
        "network": [{"kind": "dense", "out": 64}, "tanh", {"kind": "dense", "out": 10}, "cross-entropy"],
        "dataset": {"kind": "idx", "images": images, "labels": labels,
                    "limit": 6600, "test_fraction": 0.0909},
        "epochs": 2, "batch_size": 256, "seed": 0,
    })
    res = H.train(cfg)
    digit_elapsed = time.perf_counter() - started
    losses = [r.train_loss for r in res.rows if r.iteration is not None]
    smooth = H.ema_report(losses, 0.99)
    assert all(b < a for a, b in zip(smooth, smooth[1:]))
    assert digit_elapsed < 300.0
    _passed(11, f"blob run halves the loss in {blob_elapsed:.1f}s; "
               f"6k-digit run monotone smoothed loss in {digit_elapsed:.1f}s")


def test_criterion_12_small_batch_pathology():
    # identical budgets = identical update counts: 128 rescaled steps each
    def run(batch_size, epochs, memory):
        cfg = H.load_config({
            "network": [{"kind": "dense", "out": 64}, "cross-entropy"],
            "dataset": {"kind": "blobs", "classes": 64, "per_class": 32, "dim": 16,
                        "test_per_class": 2, "spread": 2.0},
            "epochs": epochs, "batch_size": batch_size, "seed": 0,
            "memory_capacity": memory,
        })
        res = H.train(cfg)
        assert res.summary["iterations"] == 128
        return res.summary["final_train_loss"]

    full = run(256, 16, None)
    small = run(16, 1, None)
    recovered = run(16, 1, 256)
    assert small > full
    gap = small - full
    assert small - recovered >= 0.5 * gap
    _passed(12, f"batch 16 worse than 256 ({small:.4f} vs {full:.4f}); "
                f"memory recovers {(small - recovered) / gap:.0%} of the gap")
