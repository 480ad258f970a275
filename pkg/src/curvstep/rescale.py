"""Learning-rate rescaling from per-sample directional curvature.

Given the per-sample quadratic forms along the update direction, the batch
curvature is the mean of their absolute values (absolute value *inside* the
batch average, so negative samples cannot cancel positive ones) divided by the
squared direction norm, shifted by the L2-regularization weight.  A
bias-corrected exponential moving average plus a max with the instantaneous
value stabilizes the estimate, and the rescaling factor is the one-dimensional
optimal step of the resulting quadratic model.

The whole pipeline is degree-0 homogeneous in the direction: rescaling an
approximate preconditioner by any factor leaves the update vector unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor


class ZeroDirectionError(ValueError):
    """Curvature along the zero direction is undefined."""


class VanishingCurvatureError(ArithmeticError):
    """The locally-linear failure mode: estimated curvature is zero, so the
    rescaled step would be infinite.  Surfaced, never silently clamped;
    L2 regularization (lambda > 0) removes it."""


@dataclass(frozen=True)
class RescaleState:
    """Running curvature average: raw accumulator, step counter, decay factor."""

    c_hat: float = 0.0
    k: int = 0
    beta3: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.beta3 < 1.0:
            raise ValueError(f"beta3 must be in [0, 1), got {self.beta3}")
        if self.c_hat < 0.0:
            raise ValueError("c_hat accumulates absolute values and cannot be negative")


@dataclass(frozen=True)
class RescaleOutput:
    """One iteration's curvature numbers and the resulting factor."""

    c_k: float
    c_tilde: float
    L_tilde: float
    r_k: float


def batch_curvature(per_sample_qform, dir_norm_sq: float, lam: float = 0.0) -> float:
    """Mean absolute per-sample quadratic form over the squared direction norm,
    plus the regularization shift."""
    if dir_norm_sq <= 0.0:
        raise ZeroDirectionError("direction norm is zero")
    values = per_sample_qform.data if isinstance(per_sample_qform, Tensor) else np.asarray(per_sample_qform, dtype=np.float64)
    return float(np.mean(np.abs(values))) / dir_norm_sq + lam


def update_estimate(state: RescaleState, c_k: float) -> tuple[RescaleState, float, float]:
    """Advance the moving average by one accepted value.

    Returns (new state, bias-corrected average c_tilde, stabilized L_tilde).
    At the first step the bias correction cancels exactly, so c_tilde == c_k
    bit for bit.
    """
    if c_k < 0.0:
        raise ValueError("curvature estimates are absolute values, got a negative")
    c_hat = state.beta3 * state.c_hat + (1.0 - state.beta3) * c_k
    k = state.k + 1
    if k == 1 or state.beta3 == 0.0:
        c_tilde = c_k if k == 1 else c_hat
    else:
        c_tilde = c_hat / (1.0 - state.beta3 ** k)
    l_tilde = max(c_tilde, c_k)
    return replace(state, c_hat=c_hat, k=k), c_tilde, l_tilde


def rescale_factor(dir_dot_grad: float, dir_norm_sq: float, l_tilde: float,
                   denom_const: float = 2.0) -> float:
    """The data- and direction-adaptive step scale.

    dir_dot_grad > 0 is the caller's contract for descent directions; momentum
    callers may relax it and take the absolute value of the result.
    """
    if dir_norm_sq <= 0.0:
        raise ZeroDirectionError("direction norm is zero")
    if l_tilde == 0.0:
        raise VanishingCurvatureError(
            "estimated curvature is zero (locally linear objective); "
            "enable L2 regularization (lambda > 0) to bound the step"
        )
    return dir_dot_grad / (denom_const * dir_norm_sq * l_tilde)


def rescale_step(state: RescaleState, per_sample_qform, dir_dot_grad: float,
                 dir_norm_sq: float, lam: float = 0.0,
                 denom_const: float = 2.0) -> tuple[RescaleState, RescaleOutput]:
    """One full iteration of the rescaling pipeline."""
    c_k = batch_curvature(per_sample_qform, dir_norm_sq, lam)
    state, c_tilde, l_tilde = update_estimate(state, c_k)
    r_k = rescale_factor(dir_dot_grad, dir_norm_sq, l_tilde, denom_const)
    return state, RescaleOutput(c_k, c_tilde, l_tilde, r_k)
