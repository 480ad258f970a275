"""Update directions, step schedules, and the parameter update.

Directions: plain gradient, a diagonal second-moment preconditioner, and
bias-corrected momentum (optionally composed with the preconditioner).
Momentum directions are not guaranteed descent directions; callers in that
mode take the absolute value of the step.

Schedules give the user learning rate as a function of the epoch: exponential
decay from ell0 to eta*ell0 over the run, a repeating annealing pattern,
cosine decay, or a constant.  An optional clamp forces the effective step into
a k^-delta band so stochastic convergence conditions hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .tensor import ParamVec, combine, inner


@dataclass(frozen=True)
class PrecondState:
    """Second-moment and first-moment accumulators with one shared counter."""

    v_hat: ParamVec
    g_hat: ParamVec
    k: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: ParamVec, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "PrecondState":
        zero = params.zeros_like()
        return PrecondState(zero, zero, 0, beta1, beta2, eps)


def direction_sgd(g: ParamVec) -> ParamVec:
    """Identity preconditioner: the direction is the gradient itself."""
    return g


def _bias_corrected(acc: ParamVec, raw: ParamVec, beta: float, k: int) -> ParamVec:
    # k == 1 returns the raw input exactly: the correction cancels bit for bit
    if k == 1:
        return raw
    if beta == 0.0:
        return acc
    corr = 1.0 - beta ** k
    return acc.map(lambda a: a / corr)


def direction_rmsprop(state: PrecondState, g: ParamVec) -> tuple[PrecondState, ParamVec]:
    """Entrywise g / (sqrt(v-tilde) + eps) with bias-corrected second moment.

    inner(direction, g) is a sum of g^2/(sqrt(v)+eps) terms, hence never
    negative, and zero only for a zero gradient.
    """
    b2 = state.beta2
    v_hat = combine(state.v_hat, g, lambda v, gr: b2 * v + (1.0 - b2) * gr * gr)
    k = state.k + 1
    v_tilde = _bias_corrected(v_hat, g.map(lambda gr: gr * gr), b2, k)
    eps = state.eps
    direction = combine(g, v_tilde, lambda gr, v: gr / (np.sqrt(v) + eps))
    return replace(state, v_hat=v_hat, k=k), direction


def direction_momentum(state: PrecondState, g: ParamVec,
                       precond: str = "identity") -> tuple[PrecondState, ParamVec]:
    """Bias-corrected momentum direction, optionally preconditioned.

    Not guaranteed to be a descent direction; the caller logs the per-epoch
    descent fraction instead of enforcing positivity.
    """
    if precond not in ("identity", "rmsprop"):
        raise ValueError(f"unknown preconditioner {precond!r}")
    b1, b2 = state.beta1, state.beta2
    g_hat = combine(state.g_hat, g, lambda m, gr: b1 * m + (1.0 - b1) * gr)
    k = state.k + 1
    g_tilde = _bias_corrected(g_hat, g, b1, k)
    v_hat = state.v_hat
    if precond == "rmsprop":
        v_hat = combine(state.v_hat, g, lambda v, gr: b2 * v + (1.0 - b2) * gr * gr)
        v_tilde = _bias_corrected(v_hat, g.map(lambda gr: gr * gr), b2, k)
        eps = state.eps
        direction = combine(g_tilde, v_tilde, lambda m, v: m / (np.sqrt(v) + eps))
    else:
        direction = g_tilde
    return replace(state, g_hat=g_hat, v_hat=v_hat, k=k), direction


@dataclass(frozen=True)
class RobbinsMonro:
    """Band alpha <= step * k^delta <= beta enforcing a decaying step."""

    alpha: float
    beta: float
    delta: float

    def __post_init__(self):
        if not 0.5 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0.5, 1), got {self.delta}")
        if not 0.0 < self.alpha <= self.beta:
            raise ValueError("need 0 < alpha <= beta")


@dataclass(frozen=True)
class ScheduleSpec:
    """Learning-rate schedule: one of red | annealing | cosine | constant.

    red: ell0 * eta^(epoch/total_epochs); hits eta*ell0 exactly at the end.
    annealing: repeating (ell, epochs) pattern, changes at epoch boundaries.
    cosine: ell_min + (ell0-ell_min)(1+cos(pi*epoch/N))/2, clamped past N.
    constant: ell0 everywhere.
    """

    kind: str
    ell0: float = 1.0
    eta: float = 0.5
    total_epochs: int = 1
    ell_min: float = 0.0
    pattern: tuple[tuple[float, int], ...] = ()
    robbins_monro: Optional[RobbinsMonro] = None

    def __post_init__(self):
        if self.kind not in ("red", "annealing", "cosine", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "red" and not 0.0 < self.eta <= 1.0:
            raise ValueError(f"red schedule needs 0 < eta <= 1, got {self.eta}")
        if self.kind == "annealing":
            if not self.pattern:
                raise ValueError("annealing schedule needs a pattern")
            for ell, epochs in self.pattern:
                if ell <= 0.0 or epochs <= 0:
                    raise ValueError("annealing entries need ell > 0 and epochs > 0")
        elif self.kind == "constant":
            if self.ell0 < 0.0:
                raise ValueError("constant schedule needs ell >= 0")
        elif self.ell0 <= 0.0:
            raise ValueError("ell0 must be positive")


def red_schedule(ell0: float, eta: float, total_epochs: int,
                 robbins_monro: Optional[RobbinsMonro] = None) -> ScheduleSpec:
    return ScheduleSpec("red", ell0=ell0, eta=eta, total_epochs=int(total_epochs), robbins_monro=robbins_monro)


def annealing_schedule(pattern, robbins_monro: Optional[RobbinsMonro] = None) -> ScheduleSpec:
    return ScheduleSpec("annealing", pattern=tuple((float(e), int(n)) for e, n in pattern),
                        robbins_monro=robbins_monro)


def cosine_schedule(ell0: float, ell_min: float, total_epochs: int,
                    robbins_monro: Optional[RobbinsMonro] = None) -> ScheduleSpec:
    return ScheduleSpec("cosine", ell0=ell0, ell_min=ell_min, total_epochs=int(total_epochs),
                        robbins_monro=robbins_monro)


def constant_schedule(ell: float, robbins_monro: Optional[RobbinsMonro] = None) -> ScheduleSpec:
    # ell == 0 is allowed: a no-op control run
    return ScheduleSpec("constant", ell0=float(ell), robbins_monro=robbins_monro)


def schedule_value(spec: ScheduleSpec, epoch: int) -> float:
    """The user learning rate for a given epoch (constant within the epoch)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if spec.kind == "constant":
        return spec.ell0
    if spec.kind == "red":
        return spec.ell0 * spec.eta ** (epoch / spec.total_epochs)
    if spec.kind == "cosine":
        t = min(epoch, spec.total_epochs)
        return spec.ell_min + 0.5 * (spec.ell0 - spec.ell_min) * (1.0 + math.cos(math.pi * t / spec.total_epochs))
    period = sum(n for _, n in spec.pattern)
    e = epoch % period
    for ell, n in spec.pattern:
        if e < n:
            return ell
        e -= n
    raise AssertionError("unreachable")


def clamp_robbins_monro(step: float, k: int, alpha: float, beta: float, delta: float) -> float:
    """Clamp so that step * k^delta lands in [alpha, beta]."""
    if k < 1:
        raise ValueError("iteration counter must be >= 1")
    if not 0.5 < delta < 1.0:
        raise ValueError(f"delta must be in (0.5, 1), got {delta}")
    decay = k ** delta
    return min(max(step, alpha / decay), beta / decay)


def apply_update(theta: ParamVec, ell: float, r_k: float, direction: ParamVec,
                 abs_rule: bool = False) -> ParamVec:
    """theta - ell * rho * direction with rho = |r_k| under the absolute-value rule."""
    rho = abs(r_k) if abs_rule else r_k
    return step_params(theta, ell * rho, direction)


def step_params(theta: ParamVec, effective_step: float, direction: ParamVec) -> ParamVec:
    return combine(theta, direction, lambda t, d: t - effective_step * d)


def descent_fraction(dir_dot_grads) -> float:
    """Share of iterations whose direction had non-negative overlap with the gradient."""
    values = np.asarray(list(dir_dot_grads), dtype=np.float64)
    if values.size == 0:
        raise ValueError("descent fraction needs a non-empty epoch")
    return float(np.mean(values >= 0.0))
