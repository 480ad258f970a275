"""Layer stages and their five maps.

Every stage provides: a forward map, the adjoint on its input, the adjoint on
its parameters, a tangent (directional-derivative) map, and its second-order
contribution to the directional curvature.  All arrays carry a leading sample
axis; parameter-free stages take theta=None.

Linear and convolutional stages are two instances of the same assignment form
y[i] = sum_k,j theta[k] x[j] 1_{ijk}, so their adjoints, tangents and
second-order terms share one derivation.  Centering/normalizing stages take
their statistics over the batch (and trailing spatial axes when present), per
feature channel, which is the decomposed batch-norm convention.  Loss stages
map to one scalar per sample and close the chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

ACTIVATION_NAMES = ("tanh", "softplus", "elu")
LOSS_KINDS = ("loss_mse", "loss_cross_entropy")


class ContractError(RuntimeError):
    """An operation was called outside its contract (wrong stage, missing store)."""


class DegenerateStatisticsError(ValueError):
    """Batch statistics requested over fewer than two samples."""


@dataclass(frozen=True)
class LayerSpec:
    """One network stage: kind, shapes, and kind-specific settings."""

    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    param_shape: Optional[tuple[int, ...]] = None
    act: Optional[str] = None
    softplus_beta: float = 1.0
    eps_norm: float = 1e-5

    @property
    def has_params(self) -> bool:
        return self.param_shape is not None

    @property
    def is_loss(self) -> bool:
        return self.kind in LOSS_KINDS


@dataclass
class LayerSaved:
    """Stored forward values for one stage: the input plus derived caches.

    aux is recomputable from x_in (and the stage's theta/target), which is what
    lets the checkpointed executor rebuild stores from a boundary value.
    """

    x_in: np.ndarray
    aux: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# constructors

def dense(in_shape, out_dim: int) -> LayerSpec:
    in_shape = _shape(in_shape)
    return LayerSpec("dense", in_shape, (int(out_dim),), param_shape=(int(out_dim),) + in_shape)


def conv2d(in_shape, out_channels: int, kernel: tuple[int, int]) -> LayerSpec:
    c, h, w = _shape(in_shape)
    kh, kw = int(kernel[0]), int(kernel[1])
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kernel} exceeds input plane {(h, w)}")
    out_shape = (int(out_channels), h - kh + 1, w - kw + 1)
    return LayerSpec("conv2d", (c, h, w), out_shape, param_shape=(int(out_channels), c, kh, kw))


def bias(shape, param_shape=None) -> LayerSpec:
    shape = _shape(shape)
    pshape = shape if param_shape is None else _shape(param_shape)
    try:
        np.broadcast_shapes(pshape, shape)
    except ValueError as exc:
        raise ShapeError(f"bias parameters {pshape} do not broadcast over {shape}") from exc
    return LayerSpec("bias", shape, shape, param_shape=pshape)


def activation(name: str, shape, softplus_beta: float = 1.0) -> LayerSpec:
    if name not in ACTIVATION_NAMES:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATION_NAMES}")
    shape = _shape(shape)
    return LayerSpec("activation", shape, shape, act=name, softplus_beta=float(softplus_beta))


def centering(shape) -> LayerSpec:
    shape = _shape(shape)
    if len(shape) < 1:
        raise ShapeError("centering needs at least one feature axis")
    return LayerSpec("centering", shape, shape)


def normalizing(shape, eps_norm: float = 1e-5) -> LayerSpec:
    shape = _shape(shape)
    if len(shape) < 1:
        raise ShapeError("normalizing needs at least one feature axis")
    return LayerSpec("normalizing", shape, shape, eps_norm=float(eps_norm))


def mse_loss(shape) -> LayerSpec:
    return LayerSpec("loss_mse", _shape(shape), ())


def cross_entropy_loss(classes: int) -> LayerSpec:
    return LayerSpec("loss_cross_entropy", (int(classes),), ())


def _shape(s) -> tuple[int, ...]:
    if isinstance(s, int):
        return (s,)
    return tuple(int(v) for v in s)


# ---------------------------------------------------------------------------
# elementwise activations: value, first and second derivative

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def act_value(spec: LayerSpec, x: np.ndarray) -> np.ndarray:
    if spec.act == "tanh":
        return np.tanh(x)
    if spec.act == "softplus":
        b = spec.softplus_beta
        z = b * x
        # overflow guard: for large z, log1p(exp(z))/b == x to double precision
        safe = np.log1p(np.exp(np.minimum(z, 30.0))) / b
        return np.where(z > 30.0, x, safe)
    if spec.act == "elu":
        return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))
    raise ContractError(f"not an activation layer: {spec.kind}/{spec.act}")


def act_slope(spec: LayerSpec, x: np.ndarray) -> np.ndarray:
    if spec.act == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if spec.act == "softplus":
        return _sigmoid(spec.softplus_beta * x)
    if spec.act == "elu":
        return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))
    raise ContractError(f"not an activation layer: {spec.kind}/{spec.act}")


def act_curvature(spec: LayerSpec, x: np.ndarray) -> np.ndarray:
    if spec.act == "tanh":
        t = np.tanh(x)
        return -2.0 * t * (1.0 - t * t)
    if spec.act == "softplus":
        s = _sigmoid(spec.softplus_beta * x)
        return spec.softplus_beta * s * (1.0 - s)
    if spec.act == "elu":
        # only C1 at the origin; take the right-limit 0 there
        return np.where(x >= 0.0, 0.0, np.exp(np.minimum(x, 0.0)))
    raise ContractError(f"not an activation layer: {spec.kind}/{spec.act}")


# ---------------------------------------------------------------------------
# assignment-form primitives shared by dense and conv2d

def _assign_apply(spec: LayerSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y[i] = sum theta[k] x[j] 1_{ijk}."""
    if spec.kind == "dense":
        axes = (tuple(range(1, x.ndim)), tuple(range(1, theta.ndim)))
        return np.tensordot(x, theta, axes=axes)
    kh, kw = spec.param_shape[2], spec.param_shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.einsum("bcuvij,ocij->bouv", windows, theta)


def _assign_adjoint_input(spec: LayerSpec, theta: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    """Adjoint of x -> apply(theta, x)."""
    if spec.kind == "dense":
        return np.tensordot(xhat, theta, axes=([1], [0]))
    kh, kw = spec.param_shape[2], spec.param_shape[3]
    padded = np.pad(xhat, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return np.einsum("bouvij,ocij->bcuv", windows, theta[:, :, ::-1, ::-1])


def _assign_adjoint_param(spec: LayerSpec, x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    """Adjoint of theta -> apply(theta, x); sums over the batch."""
    if spec.kind == "dense":
        return np.tensordot(xhat, x, axes=([0], [0]))
    kh, kw = spec.param_shape[2], spec.param_shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.einsum("bouv,bcuvij->ocij", xhat, windows)


def _unbroadcast(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum arr down to `shape`, undoing numpy broadcasting."""
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and arr.shape[ax] != 1:
            arr = arr.sum(axis=ax, keepdims=True)
    return arr


def _stats_axes(batched_ndim: int) -> tuple[int, ...]:
    # statistics per feature channel (axis 1), over batch and trailing axes
    return (0,) + tuple(range(2, batched_ndim))


def _feature_axes(batched_ndim: int) -> tuple[int, ...]:
    return tuple(range(1, batched_ndim))


# ---------------------------------------------------------------------------
# shape checks

def _check_x(spec: LayerSpec, x: np.ndarray, what: str = "input"):
    if x.shape[1:] != spec.in_shape:
        raise ShapeError(f"{spec.kind} {what} has feature shape {x.shape[1:]}, expected {spec.in_shape}")


def _check_xhat(spec: LayerSpec, xhat: np.ndarray):
    want = spec.out_shape
    if xhat.shape[1:] != want:
        raise ShapeError(f"{spec.kind} output adjoint has feature shape {xhat.shape[1:]}, expected {want}")


def _check_theta(spec: LayerSpec, theta: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if not spec.has_params:
        if theta is not None:
            raise ContractError(f"{spec.kind} layer takes no parameters")
        return None
    if theta is None:
        raise ContractError(f"{spec.kind} layer needs parameters of shape {spec.param_shape}")
    if theta.shape != spec.param_shape:
        raise ShapeError(f"{spec.kind} parameters have shape {theta.shape}, expected {spec.param_shape}")
    return theta


# ---------------------------------------------------------------------------
# the five maps

def forward(spec: LayerSpec, x: np.ndarray, theta: Optional[np.ndarray] = None,
            target: Optional[np.ndarray] = None) -> tuple[np.ndarray, LayerSaved]:
    _check_x(spec, x)
    theta = _check_theta(spec, theta)
    kind = spec.kind

    if kind in ("dense", "conv2d"):
        return _assign_apply(spec, theta, x), LayerSaved(x)
    if kind == "bias":
        return x + np.broadcast_to(theta, spec.in_shape), LayerSaved(x)
    if kind == "activation":
        return act_value(spec, x), LayerSaved(x)
    if kind == "centering":
        mean = x.mean(axis=_stats_axes(x.ndim), keepdims=True)
        return x - mean, LayerSaved(x)
    if kind == "normalizing":
        if x.shape[0] < 2:
            raise DegenerateStatisticsError("normalizing needs at least two samples in the batch")
        gamma = 1.0 / np.sqrt(np.mean(x * x, axis=_stats_axes(x.ndim), keepdims=True) + spec.eps_norm)
        return gamma * x, LayerSaved(x, {"gamma": gamma})
    if kind == "loss_mse":
        if target is None or target.shape != x.shape:
            raise ShapeError(f"mse target shape {None if target is None else target.shape} != {x.shape}")
        diff = x - target
        loss = 0.5 * np.sum(diff * diff, axis=_feature_axes(x.ndim))
        return loss, LayerSaved(x, {"target": target})
    if kind == "loss_cross_entropy":
        if target is None or target.shape != (x.shape[0],):
            raise ShapeError("cross-entropy target must be one class id per sample")
        ids = target.astype(np.int64)
        if ids.min() < 0 or ids.max() >= spec.in_shape[0]:
            raise ShapeError("class id out of range")
        z = x - x.max(axis=1, keepdims=True)
        ez = np.exp(z)
        denom = ez.sum(axis=1, keepdims=True)
        p = ez / denom
        loss = np.log(denom[:, 0]) - z[np.arange(x.shape[0]), ids]
        return loss, LayerSaved(x, {"p": p, "target": target})
    raise ContractError(f"unknown layer kind {kind!r}")


def adjoint_input(spec: LayerSpec, saved: LayerSaved, xhat_next: np.ndarray,
                  theta: Optional[np.ndarray] = None) -> np.ndarray:
    x = saved.x_in
    _check_xhat(spec, xhat_next)
    kind = spec.kind

    if kind in ("dense", "conv2d"):
        return _assign_adjoint_input(spec, _check_theta(spec, theta), xhat_next)
    if kind == "bias":
        return xhat_next
    if kind == "activation":
        return act_slope(spec, x) * xhat_next
    if kind == "centering":
        return xhat_next - xhat_next.mean(axis=_stats_axes(x.ndim), keepdims=True)
    if kind == "normalizing":
        gamma = saved.aux["gamma"]
        g3 = gamma ** 3
        return gamma * xhat_next - x * np.mean(g3 * x * xhat_next, axis=_stats_axes(x.ndim), keepdims=True)
    if kind == "loss_mse":
        diff = x - saved.aux["target"]
        return diff * _per_sample(xhat_next, x.ndim)
    if kind == "loss_cross_entropy":
        p = saved.aux["p"]
        ids = saved.aux["target"].astype(np.int64)
        grad = p.copy()
        grad[np.arange(x.shape[0]), ids] -= 1.0
        return grad * _per_sample(xhat_next, x.ndim)
    raise ContractError(f"unknown layer kind {kind!r}")


def adjoint_param(spec: LayerSpec, saved: LayerSaved, xhat_next: np.ndarray) -> np.ndarray:
    """Batch-summed parameter adjoint; raises on parameter-free stages."""
    if not spec.has_params:
        raise ContractError(f"{spec.kind} layer has no parameters")
    _check_xhat(spec, xhat_next)
    if spec.kind in ("dense", "conv2d"):
        return _assign_adjoint_param(spec, saved.x_in, xhat_next)
    if spec.kind == "bias":
        return _unbroadcast(xhat_next.sum(axis=0), spec.param_shape)
    raise ContractError(f"unknown parameterized kind {spec.kind!r}")


def tangent(spec: LayerSpec, saved: LayerSaved, xdot: np.ndarray,
            thetadot: Optional[np.ndarray] = None, theta: Optional[np.ndarray] = None) -> np.ndarray:
    x = saved.x_in
    _check_x(spec, xdot, "tangent")
    kind = spec.kind

    if kind in ("dense", "conv2d"):
        _check_theta(spec, theta)
        _check_theta(spec, thetadot)
        return _assign_apply(spec, theta, xdot) + _assign_apply(spec, thetadot, x)
    if kind == "bias":
        _check_theta(spec, thetadot)
        return xdot + np.broadcast_to(thetadot, spec.in_shape)
    if kind == "activation":
        return act_slope(spec, x) * xdot
    if kind == "centering":
        return xdot - xdot.mean(axis=_stats_axes(x.ndim), keepdims=True)
    if kind == "normalizing":
        gamma = saved.aux["gamma"]
        axes = _stats_axes(x.ndim)
        gdot = -np.mean(xdot * x, axis=axes, keepdims=True) * gamma ** 3
        return gamma * xdot + gdot * x
    if kind == "loss_mse":
        diff = x - saved.aux["target"]
        return np.sum(diff * xdot, axis=_feature_axes(x.ndim))
    if kind == "loss_cross_entropy":
        p = saved.aux["p"]
        ids = saved.aux["target"].astype(np.int64)
        return np.sum(p * xdot, axis=1) - xdot[np.arange(x.shape[0]), ids]
    raise ContractError(f"unknown layer kind {kind!r}")


def second_order_contribution(spec: LayerSpec, saved: LayerSaved, xdot: np.ndarray,
                              thetadot: Optional[np.ndarray], xhat_next: np.ndarray,
                              theta: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-sample half quadratic form of this stage along (xdot, thetadot).

    Affine stages (bias, centering) contribute exactly zero.  For the
    batch-coupled normalizing stage the per-sample attribution follows the
    sample index of the output entries being summed.
    """
    x = saved.x_in
    _check_x(spec, xdot, "tangent")
    _check_xhat(spec, xhat_next)
    nsamples = x.shape[0]
    kind = spec.kind

    if kind in ("dense", "conv2d"):
        mixed = _assign_apply(spec, _check_theta(spec, thetadot), xdot)
        return np.sum(xhat_next * mixed, axis=_feature_axes(mixed.ndim))
    if kind in ("bias", "centering"):
        return np.zeros(nsamples)
    if kind == "activation":
        term = act_curvature(spec, x) * xdot * xdot * xhat_next
        return 0.5 * np.sum(term, axis=_feature_axes(x.ndim))
    if kind == "normalizing":
        return _normalizing_curvature(spec, saved, xdot, xhat_next, squared_mean=True)
    if kind == "loss_mse":
        return 0.5 * np.sum(xdot * xdot, axis=_feature_axes(x.ndim)) * xhat_next
    if kind == "loss_cross_entropy":
        p = saved.aux["p"]
        s1 = np.sum(p * xdot * xdot, axis=1)
        s2 = np.sum(p * xdot, axis=1)
        return 0.5 * (s1 - s2 * s2) * xhat_next
    raise ContractError(f"unknown layer kind {kind!r}")


def _normalizing_curvature(spec: LayerSpec, saved: LayerSaved, xdot: np.ndarray,
                           xhat_next: np.ndarray, squared_mean: bool) -> np.ndarray:
    """Two candidate second-order terms for the normalizing stage.

    squared_mean=True is the re-derived formula (second derivative of the
    scale factor along the tangent curve); False reproduces the alternative
    with an unsquared mixed moment.  `check --layer normalizing` adjudicates
    the two against a finite-difference oracle; the derived one passes and is
    the engine default.
    """
    x = saved.x_in
    gamma = saved.aux["gamma"]
    axes = _stats_axes(x.ndim)
    p_mom = np.mean(xdot * x, axis=axes, keepdims=True)
    d_mom = np.mean(xdot * xdot, axis=axes, keepdims=True)
    g3, g5 = gamma ** 3, gamma ** 5
    gdot = -p_mom * g3
    if squared_mean:
        gddot = 3.0 * p_mom * p_mom * g5 - d_mom * g3
        term = (gdot * xdot + 0.5 * gddot * x) * xhat_next
    else:
        gddot = 3.0 * p_mom * g5 - d_mom * g3
        term = 0.5 * (gdot * xdot + gddot * x) * xhat_next
    return np.sum(term, axis=_feature_axes(x.ndim))


def normalizing_curvature_candidates(spec: LayerSpec, saved: LayerSaved, xdot: np.ndarray,
                                     xhat_next: np.ndarray) -> dict[str, np.ndarray]:
    """Both normalizing-stage curvature candidates, keyed for the check report."""
    return {
        "derived": _normalizing_curvature(spec, saved, xdot, xhat_next, squared_mean=True),
        "printed": _normalizing_curvature(spec, saved, xdot, xhat_next, squared_mean=False),
    }


def second_order_adjoints(spec: LayerSpec, saved: LayerSaved, xdot: np.ndarray,
                          thetadot: Optional[np.ndarray], xhat_next: np.ndarray,
                          theta: Optional[np.ndarray] = None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Riesz representers (A, B) of (a, b) -> <Hess_F (xdot,thetadot) x (a,b), xhat>.

    B is None for parameter-free stages.  Affine stages return zeros.
    """
    x = saved.x_in
    _check_x(spec, xdot, "tangent")
    _check_xhat(spec, xhat_next)
    kind = spec.kind

    if kind in ("dense", "conv2d"):
        _check_theta(spec, thetadot)
        a_vec = _assign_adjoint_input(spec, thetadot, xhat_next)
        b_vec = _assign_adjoint_param(spec, xdot, xhat_next)
        return a_vec, b_vec
    if kind == "bias":
        return np.zeros_like(x), np.zeros(spec.param_shape)
    if kind == "centering":
        return np.zeros_like(x), None
    if kind == "activation":
        return act_curvature(spec, x) * xdot * xhat_next, None
    if kind == "normalizing":
        gamma = saved.aux["gamma"]
        axes = _stats_axes(x.ndim)
        g3, g5 = gamma ** 3, gamma ** 5
        p_mom = np.mean(x * xdot, axis=axes, keepdims=True)
        q_mom = np.mean(xdot * xhat_next, axis=axes, keepdims=True)
        r_mom = np.mean(x * xhat_next, axis=axes, keepdims=True)
        gdot = -p_mom * g3
        a_vec = gdot * xhat_next - g3 * (q_mom * x + r_mom * xdot) + 3.0 * g5 * p_mom * r_mom * x
        return a_vec, None
    if kind == "loss_mse":
        return xdot * _per_sample(xhat_next, x.ndim), None
    if kind == "loss_cross_entropy":
        p = saved.aux["p"]
        s2 = np.sum(p * xdot, axis=1, keepdims=True)
        return _per_sample(xhat_next, x.ndim) * (p * xdot - p * s2), None
    raise ContractError(f"unknown layer kind {kind!r}")


def _per_sample(xhat: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-sample scalar adjoint so it broadcasts over feature axes."""
    return xhat.reshape((-1,) + (1,) * (ndim - 1))
