"""Execution engine: forward, backward, tangent-curvature, Hessian-vector
products, and the memory-bounded checkpointed schedule with cost accounting.

A network is a flat list of stages ending in a loss stage.  The plain pipeline
stores every forward value X and every backward value X-hat; the checkpointed
pipeline splits the net at an index L, recomputes the upper half, and keeps at
most about one net's worth of stores resident at the price of one extra sweep.

Cost units: one sweep (forward, backward or tangent) over the whole net counts
1.0 pass unit, accumulated per layer so partial sweeps are exact fractions.
Memory is counted in stored tensors (an x_s or an x-hat_s each count 1) and
reported in slots of one layer's full store, i.e. ceil(stored/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import layers as L
from .tensor import BatchView, ParamVec, ShapeError, Tensor


class NumericError(ArithmeticError):
    """Non-finite value produced during a pass; carries the first offending layer."""

    def __init__(self, layer_id: int, message: str):
        super().__init__(message)
        self.layer_id = layer_id


@dataclass(frozen=True)
class Network:
    """Ordered stages ending in a loss stage, plus their parameters."""

    layers: tuple[L.LayerSpec, ...]
    params: ParamVec

    def theta(self, s: int) -> Optional[np.ndarray]:
        spec = self.layers[s]
        if not spec.has_params:
            return None
        return self.params.segment(s).array

    def with_params(self, params: ParamVec) -> "Network":
        return Network(self.layers, params)

    @property
    def layer_count(self) -> int:
        return len(self.layers)


def validate_network(layer_specs) -> tuple[L.LayerSpec, ...]:
    specs = tuple(layer_specs)
    if not specs:
        raise ShapeError("network needs at least one stage")
    if not specs[-1].is_loss:
        raise ShapeError("last stage must be a loss stage")
    for i, spec in enumerate(specs[:-1]):
        if spec.is_loss:
            raise ShapeError(f"loss stage at position {i} is not last")
        nxt = specs[i + 1]
        if spec.out_shape != nxt.in_shape:
            raise ShapeError(
                f"stage {i} ({spec.kind}) emits {spec.out_shape} but stage {i + 1} "
                f"({nxt.kind}) expects {nxt.in_shape}"
            )
    for i, spec in enumerate(specs):
        # the batch-norm decomposition: centering and normalizing come as an
        # adjacent pair (optionally followed by a diagonal linear and a bias)
        if spec.kind == "centering" and (i + 1 == len(specs) or specs[i + 1].kind != "normalizing"):
            raise ShapeError(f"centering stage {i} must be followed by a normalizing stage")
        if spec.kind == "normalizing" and (i == 0 or specs[i - 1].kind != "centering"):
            raise ShapeError(f"normalizing stage {i} must follow a centering stage")
    return specs


def init_network(layer_specs, seed: int) -> Network:
    """Build a network with seeded parameter initialization.

    Dense/conv weights draw from N(0, 1/fan_in); bias parameters start at zero.
    """
    specs = validate_network(layer_specs)
    rng = np.random.default_rng(seed)
    segments = []
    for s, spec in enumerate(specs):
        if not spec.has_params:
            continue
        if spec.kind == "bias":
            segments.append((s, Tensor.zeros(spec.param_shape)))
        else:
            fan_in = int(np.prod(spec.param_shape[1:]))
            w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=spec.param_shape)
            segments.append((s, Tensor.of(w)))
    return Network(specs, ParamVec.of(segments))


class CostMeter:
    """Pass and residency accounting for one engine run.

    Counters never decrease; parameter and gradient storage are excluded.
    """

    def __init__(self, layer_count: int):
        self.layer_count = layer_count
        self.layer_units = 0
        self.resident_stores = 0
        self.peak_stores = 0
        self.transfers = 0

    def add_layer_passes(self, k: int):
        self.layer_units += k

    def alloc(self, k: int = 1):
        self.resident_stores += k
        if self.resident_stores > self.peak_stores:
            self.peak_stores = self.resident_stores

    def free(self, k: int = 1):
        self.resident_stores -= k

    def add_transfer(self):
        self.transfers += 1

    @property
    def pass_units(self) -> float:
        return self.layer_units / self.layer_count

    @property
    def peak_activation_slots(self) -> int:
        return (self.peak_stores + 1) // 2


class TapeStore:
    """Per-layer stores for one batch: forward values X and backward values X-hat.

    xhat[s] holds the adjoint at the *output* of stage s (x-hat_{s+1}).
    """

    def __init__(self, layer_count: int, meter: Optional[CostMeter] = None):
        self.saved: list[Optional[L.LayerSaved]] = [None] * layer_count
        self.xhat: list[Optional[np.ndarray]] = [None] * layer_count
        self.meter = meter

    def store_saved(self, s: int, value: L.LayerSaved):
        if self.saved[s] is None and self.meter is not None:
            self.meter.alloc()
        self.saved[s] = value

    def free_saved(self, s: int):
        if self.saved[s] is not None and self.meter is not None:
            self.meter.free()
        self.saved[s] = None

    def store_xhat(self, s: int, value: np.ndarray):
        if self.xhat[s] is None and self.meter is not None:
            self.meter.alloc()
        self.xhat[s] = value

    def free_xhat(self, s: int):
        if self.xhat[s] is not None and self.meter is not None:
            self.meter.free()
        self.xhat[s] = None

    @property
    def residency(self) -> list[tuple[bool, bool]]:
        return [(sv is not None, xh is not None) for sv, xh in zip(self.saved, self.xhat)]

    def need_saved(self, s: int) -> L.LayerSaved:
        if self.saved[s] is None:
            raise L.ContractError(f"stage {s} forward store is not resident")
        return self.saved[s]

    def need_xhat(self, s: int) -> np.ndarray:
        if self.xhat[s] is None:
            raise L.ContractError(f"stage {s} backward store is not resident")
        return self.xhat[s]


def _forward_one(net: Network, s: int, x: np.ndarray, targets: np.ndarray):
    spec = net.layers[s]
    y, saved = L.forward(spec, x, net.theta(s), target=targets if spec.is_loss else None)
    if not np.all(np.isfinite(y)):
        raise NumericError(s, f"non-finite value produced by stage {s} ({spec.kind})")
    return y, saved


def run_forward(net: Network, batch: BatchView, meter: Optional[CostMeter] = None,
                tape: Optional[TapeStore] = None) -> tuple[Tensor, TapeStore]:
    """Forward sweep; stores every stage's forward values on the tape."""
    n = net.layer_count
    if tape is None:
        tape = TapeStore(n, meter)
    if meter is not None:
        meter.add_transfer()
    x = batch.inputs.array
    targets = batch.targets.array
    for s in range(n):
        y, saved = _forward_one(net, s, x, targets)
        tape.store_saved(s, saved)
        x = y
    if meter is not None:
        meter.add_layer_passes(n)
    return Tensor.of(x), tape


def run_backward(net: Network, tape: TapeStore, store_xhat: bool = True) -> tuple[ParamVec, TapeStore]:
    """Backward sweep from the stored forward values.

    Returns the batch-mean gradient of the loss (no regularization term) and
    leaves the backward values resident for the tangent-curvature pass.
    """
    n = net.layer_count
    nsamples = tape.need_saved(0).x_in.shape[0]
    xh = np.ones(nsamples)
    gsums: dict[int, np.ndarray] = {}
    for s in range(n - 1, -1, -1):
        saved = tape.need_saved(s)
        if store_xhat:
            tape.store_xhat(s, xh)
        spec = net.layers[s]
        if spec.has_params:
            gsums[s] = L.adjoint_param(spec, saved, xh)
        xh = L.adjoint_input(spec, saved, xh, theta=net.theta(s))
    if tape.meter is not None:
        tape.meter.add_layer_passes(n)
    return _grad_from_sums(net, gsums, nsamples), tape


def _grad_from_sums(net: Network, gsums: dict[int, np.ndarray], nsamples: int) -> ParamVec:
    segments = []
    for s, _ in net.params.segments:
        segments.append((s, Tensor.of(gsums[s] / nsamples)))
    return ParamVec(tuple(segments))


def _dir_theta(direction: ParamVec, s: int, spec: L.LayerSpec) -> Optional[np.ndarray]:
    if not spec.has_params:
        return None
    return direction.segment(s).array


def tangent_curvature(net: Network, tape: TapeStore, direction: ParamVec) -> tuple[Tensor, float]:
    """Tangent sweep along `direction` over a tape holding X and X-hat.

    Returns the per-sample directional quadratic form (the full form, i.e.
    twice the accumulated half-contributions) and the directional derivative
    of the batch loss, recovered from the tangent at the output.
    """
    n = net.layer_count
    first = tape.need_saved(0)
    nsamples = first.x_in.shape[0]
    xdot = np.zeros_like(first.x_in)
    acc = np.zeros(nsamples)
    for s in range(n):
        spec = net.layers[s]
        saved = tape.need_saved(s)
        xh = tape.need_xhat(s)
        thdot = _dir_theta(direction, s, spec)
        acc = acc + L.second_order_contribution(spec, saved, xdot, thdot, xh, theta=net.theta(s))
        xdot = L.tangent(spec, saved, xdot, thdot, theta=net.theta(s))
    if tape.meter is not None:
        tape.meter.add_layer_passes(n)
    return Tensor.of(2.0 * acc), float(np.mean(xdot))


def hessian_vector_product(net: Network, tape: TapeStore, direction: ParamVec) -> ParamVec:
    """Batch-mean Hessian-vector product along `direction`.

    Runs one tangent sweep to get every stage's input tangent, then a reversed
    sweep seeded with zero that collects the second-order adjoints.
    """
    n = net.layer_count
    first = tape.need_saved(0)
    nsamples = first.x_in.shape[0]
    xdots: list[np.ndarray] = []
    xdot = np.zeros_like(first.x_in)
    for s in range(n):
        spec = net.layers[s]
        xdots.append(xdot)
        xdot = L.tangent(spec, tape.need_saved(s), xdot, _dir_theta(direction, s, spec), theta=net.theta(s))

    xtilde = np.zeros(nsamples)
    gsums: dict[int, np.ndarray] = {}
    for s in range(n - 1, -1, -1):
        spec = net.layers[s]
        saved = tape.need_saved(s)
        a_vec, b_vec = L.second_order_adjoints(
            spec, saved, xdots[s], _dir_theta(direction, s, spec), tape.need_xhat(s), theta=net.theta(s)
        )
        if spec.has_params:
            gsums[s] = L.adjoint_param(spec, saved, xtilde) + b_vec
        xtilde = L.adjoint_input(spec, saved, xtilde, theta=net.theta(s)) + a_vec
    return _grad_from_sums(net, gsums, nsamples)


def choose_split(net: Network) -> int:
    """Split index balancing the cumulative stored-activation sizes of the two
    halves; ties break toward the smaller index."""
    n = net.layer_count
    if n < 2:
        raise ShapeError("checkpointing needs at least two stages")
    sizes = [int(np.prod(spec.in_shape)) if spec.in_shape else 1 for spec in net.layers]
    total = sum(sizes)
    best, best_gap = 1, None
    prefix = 0
    for split in range(1, n):
        prefix += sizes[split - 1]
        gap = abs(2 * prefix - total)
        if best_gap is None or gap < best_gap:
            best, best_gap = split, gap
    return best


@dataclass
class CheckpointRun:
    """Everything the checkpointed schedule produces for one batch."""

    loss_per_sample: Tensor
    grad: ParamVec
    direction: ParamVec
    per_sample_qform: Tensor
    dir_dot_grad: float
    meter: CostMeter


def run_checkpointed(net: Network, batch: BatchView,
                     dir_provider: Callable[[ParamVec], ParamVec],
                     split: Optional[int] = None) -> CheckpointRun:
    """Gradient + per-sample curvature with the divide-and-conquer schedule.

    The upper half's backward runs twice (once unstored for the gradient, once
    stored for the tangent) so that at most about one net's worth of stores is
    ever resident.  `dir_provider` is invoked exactly once, after the gradient
    is complete.  Outputs match the plain pipeline bit for bit: every stage
    computation sees identical inputs, only the ordering across stage
    boundaries differs.
    """
    n = net.layer_count
    split = choose_split(net) if split is None else int(split)
    if not 0 < split < n:
        raise ShapeError(f"split must be inside (0, {n}), got {split}")

    meter = CostMeter(n)
    tape = TapeStore(n, meter)
    meter.add_transfer()
    targets = batch.targets.array
    nsamples = batch.sample_count

    # full forward, everything stored
    x = batch.inputs.array
    for s in range(n):
        y, saved = _forward_one(net, s, x, targets)
        tape.store_saved(s, saved)
        x = y
    loss_ps = Tensor.of(x)
    meter.add_layer_passes(n)

    # upper backward: gradient pieces only, stores consumed as we go;
    # the boundary input x_split survives as a checkpoint value
    gsums: dict[int, np.ndarray] = {}
    xh = np.ones(nsamples)
    x_mid: Optional[np.ndarray] = None
    for s in range(n - 1, split - 1, -1):
        spec = net.layers[s]
        saved = tape.need_saved(s)
        if spec.has_params:
            gsums[s] = L.adjoint_param(spec, saved, xh)
        xh = L.adjoint_input(spec, saved, xh, theta=net.theta(s))
        if s == split:
            x_mid = saved.x_in
            meter.alloc()
        tape.free_saved(s)
    meter.add_layer_passes(n - split)
    tape.store_xhat(split - 1, xh)

    # lower backward, stored for the tangent sweep
    for s in range(split - 1, -1, -1):
        spec = net.layers[s]
        saved = tape.need_saved(s)
        if tape.xhat[s] is None:
            tape.store_xhat(s, xh)
        xh = tape.xhat[s]
        if spec.has_params:
            gsums[s] = L.adjoint_param(spec, saved, xh)
        xh = L.adjoint_input(spec, saved, xh, theta=net.theta(s))
    meter.add_layer_passes(split)

    grad = _grad_from_sums(net, gsums, nsamples)
    meter.add_transfer()
    direction = dir_provider(grad)
    for (i, a), (j, b) in zip(direction.segments, net.params.segments):
        if i != j or a.shape != b.shape:
            raise ShapeError("direction does not match the parameter layout")

    # tangent over the lower half, consuming its stores; keep the boundary tangent
    xdot = np.zeros_like(tape.need_saved(0).x_in)
    acc = np.zeros(nsamples)
    for s in range(split):
        spec = net.layers[s]
        saved = tape.need_saved(s)
        thdot = _dir_theta(direction, s, spec)
        acc = acc + L.second_order_contribution(spec, saved, xdot, thdot, tape.need_xhat(s), theta=net.theta(s))
        xdot = L.tangent(spec, saved, xdot, thdot, theta=net.theta(s))
    meter.add_layer_passes(split)
    meter.alloc()  # boundary tangent xdot_split retained
    for s in range(split):
        tape.free_saved(s)
        tape.free_xhat(s)

    # recompute the upper half: forward stored, backward stored, tangent
    x = x_mid
    for s in range(split, n):
        y, saved = _forward_one(net, s, x, targets)
        tape.store_saved(s, saved)
        if s == split:
            meter.free()  # checkpoint value now lives inside the stage store
        x = y
    meter.add_layer_passes(n - split)

    xh = np.ones(nsamples)
    for s in range(n - 1, split - 1, -1):
        tape.store_xhat(s, xh)
        xh = L.adjoint_input(net.layers[s], tape.need_saved(s), xh, theta=net.theta(s))
    meter.add_layer_passes(n - split)

    meter.free()  # boundary tangent becomes the working value
    for s in range(split, n):
        spec = net.layers[s]
        saved = tape.need_saved(s)
        thdot = _dir_theta(direction, s, spec)
        acc = acc + L.second_order_contribution(spec, saved, xdot, thdot, tape.need_xhat(s), theta=net.theta(s))
        xdot = L.tangent(spec, saved, xdot, thdot, theta=net.theta(s))
        tape.free_saved(s)
        tape.free_xhat(s)
    meter.add_layer_passes(n - split)

    return CheckpointRun(loss_ps, grad, direction, Tensor.of(2.0 * acc), float(np.mean(xdot)), meter)


def measure_costs(net: Network, batch: BatchView, direction: ParamVec,
                  split: Optional[int] = None) -> dict:
    """Pass/memory accounting of the three execution modes on one batch."""
    grad_meter = CostMeter(net.layer_count)
    _, tape = run_forward(net, batch, meter=grad_meter)
    run_backward(net, tape, store_xhat=False)

    plain_meter = CostMeter(net.layer_count)
    _, tape = run_forward(net, batch, meter=plain_meter)
    run_backward(net, tape)
    tangent_curvature(net, tape, direction)

    used_split = choose_split(net) if split is None else int(split)
    ck = run_checkpointed(net, batch, lambda _grad: direction, split=used_split)

    return {
        "split": used_split,
        "gradient_only": grad_meter,
        "plain_curvature": plain_meter,
        "checkpointed": ck.meter,
    }
