import numpy as np
import pytest

from curvstep.rescale import (
    RescaleState,
    VanishingCurvatureError,
    ZeroDirectionError,
    batch_curvature,
    rescale_factor,
    rescale_step,
    update_estimate,
)


def test_batch_curvature_absolute_value_inside_mean():
    assert batch_curvature(np.array([4.0, -2.0]), 2.0) == 1.5
    # taking the absolute value outside instead would give 0.5
    assert batch_curvature(np.array([4.0, -2.0]), 2.0) != 0.5


def test_batch_curvature_regularization_floor():
    assert batch_curvature(np.zeros(8), 1.0, lam=1e-4) == 1e-4


def test_batch_curvature_rejects_zero_direction():
    with pytest.raises(ZeroDirectionError):
        batch_curvature(np.array([1.0]), 0.0)


def test_update_estimate_first_step_exact():
    state = RescaleState(beta3=0.9)
    state, c_tilde, l_tilde = update_estimate(state, 2.0)
    assert state.k == 1
    assert state.c_hat == pytest.approx(0.2, rel=1e-15)
    assert c_tilde == 2.0  # bias correction cancels exactly at k = 1
    assert l_tilde == 2.0


def test_update_estimate_hand_replay():
    # independent scalar replay of the recurrence
    beta3 = 0.9
    c_hat = beta3 * (0.1 * 2.0)  # after c1=2 then decay
    c_hat += (1.0 - beta3) * 0.0
    expect_c_tilde = c_hat / (1.0 - beta3 ** 2)

    state = RescaleState(beta3=0.9)
    state, _, _ = update_estimate(state, 2.0)
    state, c_tilde, l_tilde = update_estimate(state, 0.0)
    assert c_tilde == pytest.approx(expect_c_tilde, rel=1e-15)
    assert c_tilde == pytest.approx(0.18 / 0.19, rel=1e-12)
    assert l_tilde == c_tilde


def test_beta3_zero_disables_averaging():
    state = RescaleState(beta3=0.0)
    for c in (3.0, 0.5, 7.0):
        state, c_tilde, l_tilde = update_estimate(state, c)
        assert c_tilde == c
        assert l_tilde == c


def test_l_tilde_dominates():
    rng = np.random.default_rng(0)
    state = RescaleState(beta3=0.9)
    for _ in range(50):
        c = float(rng.uniform(0.0, 5.0))
        state, c_tilde, l_tilde = update_estimate(state, c)
        assert l_tilde >= c
        assert l_tilde >= c_tilde


def test_rescale_factor_examples():
    assert rescale_factor(4.0, 4.0, 1.0, 2.0) == 0.5
    assert rescale_factor(4.0, 4.0, 1.0, 1.0) == 1.0


def test_rescale_factor_one_dim_quadratic():
    # J = 0.5 a t^2 with direction = gradient: factor is 1 / (D a)
    for a in (0.5, 2.0, 7.0):
        for denom in (1.0, 2.0):
            g = a * 1.7
            assert rescale_factor(g * g, g * g, a, denom) == pytest.approx(1.0 / (denom * a), rel=1e-15)


def test_rescale_factor_vanishing_curvature():
    with pytest.raises(VanishingCurvatureError) as err:
        rescale_factor(1.0, 1.0, 0.0, 2.0)
    assert "lambda" in str(err.value)


def test_direction_scale_invariance():
    # scaling the direction by s scales the quadratic forms and norm by s^2
    # and the gradient overlap by s; r picks up 1/s, so r(s d) * (s d) = r(d) d
    rng = np.random.default_rng(1)
    for s in (0.01, 1.0, 100.0):
        base = RescaleState(beta3=0.9)
        scaled = RescaleState(beta3=0.9)
        for _ in range(30):
            q = rng.normal(size=16)
            g_dot_d = abs(rng.normal()) + 0.1
            dn2 = abs(rng.normal()) + 0.5
            base, out = rescale_step(base, q, g_dot_d, dn2, 0.0, 2.0)
            scaled, out_s = rescale_step(scaled, s * s * q, s * g_dot_d, s * s * dn2, 0.0, 2.0)
            assert out_s.r_k * s == pytest.approx(out.r_k, rel=1e-12)
            assert scaled.c_hat == pytest.approx(base.c_hat, rel=1e-12)


def test_rescale_step_composes():
    state = RescaleState(beta3=0.9)
    state, out = rescale_step(state, np.array([4.0, -2.0]), 4.0, 2.0, 0.0, 2.0)
    assert out.c_k == 1.5
    assert out.c_tilde == 1.5
    assert out.L_tilde == 1.5
    assert out.r_k == pytest.approx(4.0 / (2.0 * 2.0 * 1.5), rel=1e-15)


def test_state_validation():
    with pytest.raises(ValueError):
        RescaleState(beta3=1.0)
    with pytest.raises(ValueError):
        RescaleState(c_hat=-1.0)
    with pytest.raises(ValueError):
        update_estimate(RescaleState(), -0.5)
