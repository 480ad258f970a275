"""Experiment harness: config parsing, the training loop, metrics emission,
and the two one-dimensional replay demos.

One metrics row is emitted per iteration and one summary row per epoch.  The
iteration rows carry the batch loss (regularization term included) and every
rescaling quantity; the epoch rows carry the descent fraction, full-train
loss, and held-out metrics.  Epoch seeds derive deterministically from the
run seed and the epoch index, so runs replay exactly.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as D
from . import engine as E
from . import layers as L
from . import optim as O
from . import rescale as R
from .tensor import BatchView, ParamVec, Tensor, axpy, inner, norm_sq


class ConfigError(ValueError):
    """Malformed run configuration."""


class DescentContractError(RuntimeError):
    """A non-momentum mode produced an ascent direction."""


# ---------------------------------------------------------------------------
# configuration

_CONFIG_KEYS = {
    "network", "dataset", "optimizer", "schedule", "epochs", "batch_size", "seed",
    "beta1", "beta2", "beta3", "eps", "lambda", "denom_const", "executor",
    "memory_capacity",
}

_OPTIMIZERS = ("sgd", "rmsprop", "momentum", "momentum-rmsprop")
_EXECUTORS = ("plain", "checkpointed")


@dataclass(frozen=True)
class RunConfig:
    """A full experiment description."""

    network: tuple
    dataset: dict
    epochs: int
    schedule: O.ScheduleSpec
    optimizer: str = "sgd"
    batch_size: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    beta3: float = 0.9
    eps: float = 1e-8
    lam: float = 1e-7
    denom_const: float = 2.0
    executor: str = "plain"
    memory_capacity: Optional[int] = None
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def abs_rule(self) -> bool:
        return self.optimizer.startswith("momentum")


def load_config(source) -> RunConfig:
    """Build a RunConfig from a dict or a JSON file path; unknown keys rejected."""
    if isinstance(source, (str,)):
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        doc = dict(source)
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("network", "dataset", "epochs"):
        if key not in doc:
            raise ConfigError(f"missing required config key {key!r}")

    optimizer = doc.get("optimizer", "sgd")
    if optimizer not in _OPTIMIZERS:
        raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}, got {optimizer!r}")
    executor = doc.get("executor", "plain")
    if executor not in _EXECUTORS:
        raise ConfigError(f"executor must be one of {_EXECUTORS}, got {executor!r}")

    epochs = int(doc["epochs"])
    if epochs < 0:
        raise ConfigError("epochs must be non-negative")
    beta1 = float(doc.get("beta1", 0.9))
    schedule = _parse_schedule(doc.get("schedule", {"kind": "red"}), epochs, optimizer, beta1)

    memory_capacity = doc.get("memory_capacity")
    return RunConfig(
        network=tuple(_normalize_arch_entry(e) for e in doc["network"]),
        dataset=dict(doc["dataset"]),
        epochs=epochs,
        schedule=schedule,
        optimizer=optimizer,
        batch_size=int(doc.get("batch_size", 256)),
        seed=int(doc.get("seed", 0)),
        beta1=beta1,
        beta2=float(doc.get("beta2", 0.999)),
        beta3=float(doc.get("beta3", 0.9)),
        eps=float(doc.get("eps", 1e-8)),
        lam=float(doc.get("lambda", 1e-7)),
        denom_const=float(doc.get("denom_const", 2.0)),
        executor=executor,
        memory_capacity=None if memory_capacity in (None, 0) else int(memory_capacity),
        raw=dict(doc),
    )


def _parse_schedule(doc, epochs: int, optimizer: str, beta1: float) -> O.ScheduleSpec:
    doc = dict(doc)
    kind = doc.pop("kind", "red")
    rm = doc.pop("robbins_monro", None)
    robbins = O.RobbinsMonro(float(rm["alpha"]), float(rm["beta"]), float(rm["delta"])) if rm else None
    default_ell0 = (1.0 - beta1) if optimizer.startswith("momentum") else 1.0
    try:
        if kind == "red":
            spec = O.red_schedule(float(doc.pop("ell0", default_ell0)), float(doc.pop("eta", 0.5)),
                                  int(doc.pop("total_epochs", max(epochs, 1))), robbins)
        elif kind == "constant":
            spec = O.constant_schedule(float(doc.pop("ell", doc.pop("ell0", default_ell0))), robbins)
        elif kind == "cosine":
            spec = O.cosine_schedule(float(doc.pop("ell0", default_ell0)), float(doc.pop("ell_min", 0.0)),
                                     int(doc.pop("total_epochs", max(epochs, 1))), robbins)
        elif kind == "annealing":
            spec = O.annealing_schedule(doc.pop("pattern"), robbins)
        else:
            raise ConfigError(f"unknown schedule kind {kind!r}")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad schedule: {exc}") from exc
    if doc:
        raise ConfigError(f"unknown schedule keys: {sorted(doc)}")
    return spec


_ARCH_STRINGS = {"tanh", "elu", "bias", "centering", "normalizing", "mse", "cross-entropy"}


def _normalize_arch_entry(entry) -> dict:
    if isinstance(entry, str):
        if entry not in _ARCH_STRINGS and entry != "softplus":
            raise ConfigError(f"unknown layer shorthand {entry!r}")
        return {"kind": entry}
    if isinstance(entry, dict):
        e = dict(entry)
        if "kind" not in e:
            raise ConfigError(f"layer entry needs a 'kind': {entry}")
        return e
    raise ConfigError(f"bad layer entry: {entry!r}")


def build_network(arch, in_shape, class_count: Optional[int], seed: int) -> E.Network:
    """Instantiate layer specs from architecture entries, tracking shapes."""
    shape = tuple(in_shape)
    specs = []
    for e in arch:
        e = _normalize_arch_entry(e)
        kind = e["kind"]
        if kind == "dense":
            specs.append(L.dense(shape, int(e["out"])))
        elif kind == "conv2d":
            specs.append(L.conv2d(shape, int(e["out_channels"]), tuple(e.get("kernel", (3, 3)))))
        elif kind == "bias":
            pshape = e.get("param_shape")
            if pshape is None and len(shape) == 3:
                pshape = (shape[0], 1, 1)  # per-channel bias on image planes
            specs.append(L.bias(shape, pshape))
        elif kind in ("tanh", "elu"):
            specs.append(L.activation(kind, shape))
        elif kind == "softplus":
            specs.append(L.activation("softplus", shape, softplus_beta=float(e.get("beta", 1.0))))
        elif kind == "centering":
            specs.append(L.centering(shape))
        elif kind == "normalizing":
            specs.append(L.normalizing(shape, eps_norm=float(e.get("eps", 1e-5))))
        elif kind == "mse":
            specs.append(L.mse_loss(shape))
        elif kind == "cross-entropy":
            classes = int(e.get("classes", class_count or 0))
            if classes <= 0:
                raise ConfigError("cross-entropy stage needs a class count")
            if shape != (classes,):
                raise ConfigError(f"cross-entropy expects {classes} logits, network emits {shape}")
            specs.append(L.cross_entropy_loss(classes))
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
        shape = specs[-1].out_shape
    return E.init_network(specs, seed)


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from integer parts (run seed, epoch index, ...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _load_datasets(config: RunConfig) -> tuple[D.Dataset, D.Dataset]:
    doc = dict(config.dataset)
    kind = doc.pop("kind", None)
    if kind == "blobs":
        classes = int(doc.pop("classes"))
        dim = int(doc.pop("dim"))
        per_class = int(doc.pop("per_class"))
        test_per_class = int(doc.pop("test_per_class", 50))
        spread = float(doc.pop("spread", 3.0))
        if doc:
            raise ConfigError(f"unknown blobs keys: {sorted(doc)}")
        # one draw, split per class, so both splits share the same centers
        full = D.synthetic_blobs(classes, per_class + test_per_class, dim,
                                 derive_seed(config.seed, 101), center_spread=spread)
        block = per_class + test_per_class
        train_idx = np.concatenate([np.arange(c * block, c * block + per_class) for c in range(classes)])
        test_idx = np.concatenate([np.arange(c * block + per_class, (c + 1) * block) for c in range(classes)])
        def take(idx):
            return D.Dataset(Tensor.of(full.inputs.array[idx]), Tensor.of(full.targets.array[idx]), classes)
        return take(train_idx), take(test_idx)
    if kind == "idx":
        ds = D.load_idx(doc.pop("images"), doc.pop("labels"))
        limit = doc.pop("limit", None)
        if limit is not None:
            ds = D.Dataset(Tensor.of(ds.inputs.array[: int(limit)]),
                           Tensor.of(ds.targets.array[: int(limit)]), ds.class_count)
        if "test_images" in doc:
            test = D.load_idx(doc.pop("test_images"), doc.pop("test_labels"))
            tlimit = doc.pop("test_limit", None)
            if tlimit is not None:
                test = D.Dataset(Tensor.of(test.inputs.array[: int(tlimit)]),
                                 Tensor.of(test.targets.array[: int(tlimit)]), test.class_count)
        else:
            frac = float(doc.pop("test_fraction", 0.1))
            n = ds.sample_count
            order = np.random.default_rng(derive_seed(config.seed, 303)).permutation(n)
            cut = max(1, int(n * frac))
            test_idx, train_idx = order[:cut], order[cut:]
            test = D.Dataset(Tensor.of(ds.inputs.array[test_idx]), Tensor.of(ds.targets.array[test_idx]), ds.class_count)
            ds = D.Dataset(Tensor.of(ds.inputs.array[train_idx]), Tensor.of(ds.targets.array[train_idx]), ds.class_count)
        if doc:
            raise ConfigError(f"unknown idx keys: {sorted(doc)}")
        return ds, test
    raise ConfigError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# metrics

METRICS_HEADER = (
    "epoch", "iteration", "train_loss", "effective_step", "ell", "r_k", "c_k",
    "c_tilde", "L_tilde", "dir_dot_grad", "q_n", "test_loss", "test_accuracy",
    "pass_units", "peak_activation_slots",
)


@dataclass
class MetricsRow:
    """One training-log row; epoch-summary rows leave `iteration` unset."""

    epoch: int
    iteration: Optional[int] = None
    train_loss: Optional[float] = None
    effective_step: Optional[float] = None
    ell: Optional[float] = None
    r_k: Optional[float] = None
    c_k: Optional[float] = None
    c_tilde: Optional[float] = None
    L_tilde: Optional[float] = None
    dir_dot_grad: Optional[float] = None
    q_n: Optional[float] = None
    test_loss: Optional[float] = None
    test_accuracy: Optional[float] = None
    pass_units: Optional[float] = None
    peak_activation_slots: Optional[int] = None

    def as_csv(self) -> list[str]:
        out = []
        for name in METRICS_HEADER:
            v = getattr(self, name)
            out.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        return out


def write_metrics_csv(rows, path: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())


def write_summary_json(summary: dict, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class TrainResult:
    rows: list
    params: ParamVec
    summary: dict


# ---------------------------------------------------------------------------
# evaluation

def _forward_body(net: E.Network, inputs: np.ndarray) -> np.ndarray:
    x = inputs
    for s in range(net.layer_count - 1):
        spec = net.layers[s]
        x, _ = L.forward(spec, x, net.theta(s))
    return x


def evaluate(net: E.Network, ds: D.Dataset, lam: float) -> tuple[float, Optional[float]]:
    """Regularized mean loss and, for classifiers, accuracy over a dataset.

    Evaluated in one batch so batch-coupled stages see the whole split.
    """
    logits = _forward_body(net, ds.inputs.array)
    loss_spec = net.layers[-1]
    loss, _ = L.forward(loss_spec, logits, target=ds.targets.array)
    total = float(np.mean(loss)) + (0.5 * lam * norm_sq(net.params) if lam != 0.0 else 0.0)
    accuracy = None
    if loss_spec.kind == "loss_cross_entropy":
        pred = logits.argmax(axis=1)
        accuracy = float(np.mean(pred == ds.targets.array.astype(np.int64)))
    return total, accuracy


# ---------------------------------------------------------------------------
# the training loop

def train(config: RunConfig) -> TrainResult:
    started = time.perf_counter()
    train_ds, test_ds = _load_datasets(config)
    in_shape = train_ds.inputs.shape[1:]
    net = build_network(config.network, in_shape, train_ds.class_count, derive_seed(config.seed, 7))

    resc = R.RescaleState(beta3=config.beta3)
    precond = O.PrecondState.init(net.params, config.beta1, config.beta2, config.eps)
    memory = D.FeatureMemory(config.memory_capacity) if config.memory_capacity else None
    initial_train, _ = evaluate(net, train_ds, config.lam)

    rows: list[MetricsRow] = []
    iteration = 0
    for epoch in range(config.epochs):
        ell = O.schedule_value(config.schedule, epoch)
        overlaps: list[float] = []
        for batch in D.batches(train_ds, config.batch_size, derive_seed(config.seed, epoch)):
            if memory is not None:
                batch = D.memory_push_assemble(memory, batch)
            try:
                net, resc, precond, row = _train_step(
                    config, net, batch, resc, precond, ell, iteration)
            except R.VanishingCurvatureError as exc:
                raise R.VanishingCurvatureError(
                    f"iteration {iteration}: {exc}") from exc
            except E.NumericError as exc:
                raise E.NumericError(exc.layer_id, f"iteration {iteration}: {exc}") from exc
            row.epoch = epoch
            rows.append(row)
            overlaps.append(row.dir_dot_grad)
            iteration += 1
        full_loss, _ = evaluate(net, train_ds, config.lam)
        test_loss, test_acc = evaluate(net, test_ds, config.lam)
        rows.append(MetricsRow(
            epoch=epoch, train_loss=full_loss, ell=ell,
            q_n=O.descent_fraction(overlaps) if overlaps else None,
            test_loss=test_loss, test_accuracy=test_acc,
        ))

    final_train, _ = evaluate(net, train_ds, config.lam)
    final_test, final_acc = evaluate(net, test_ds, config.lam)
    summary = {
        "config": config.raw,
        "iterations": iteration,
        "initial_train_loss": initial_train,
        "final_train_loss": final_train,
        "final_test_loss": final_test,
        "final_test_accuracy": final_acc,
        "wall_time_s": time.perf_counter() - started,
    }
    return TrainResult(rows, net.params, summary)


def _direction_for(config: RunConfig, precond: O.PrecondState, g: ParamVec):
    if config.optimizer == "sgd":
        return precond, O.direction_sgd(g)
    if config.optimizer == "rmsprop":
        return O.direction_rmsprop(precond, g)
    if config.optimizer == "momentum":
        return O.direction_momentum(precond, g, "identity")
    return O.direction_momentum(precond, g, "rmsprop")


def _train_step(config: RunConfig, net: E.Network, batch: BatchView,
                resc: R.RescaleState, precond: O.PrecondState,
                ell: float, iteration: int):
    lam = config.lam
    holder: dict = {}

    def provider(grad_loss: ParamVec) -> ParamVec:
        g = axpy(lam, net.params, grad_loss) if lam != 0.0 else grad_loss
        new_precond, direction = _direction_for(config, holder["precond"], g)
        holder.update(g=g, precond=new_precond, direction=direction)
        return direction

    holder["precond"] = precond
    if config.executor == "checkpointed":
        ck = E.run_checkpointed(net, batch, provider)
        loss_ps, grad_loss = ck.loss_per_sample, ck.grad
        qform, ddg_tan, meter = ck.per_sample_qform, ck.dir_dot_grad, ck.meter
        direction = ck.direction
    else:
        meter = E.CostMeter(net.layer_count)
        tape = E.TapeStore(net.layer_count, meter)
        loss_ps, tape = E.run_forward(net, batch, meter=meter, tape=tape)
        grad_loss, _ = E.run_backward(net, tape)
        meter.add_transfer()
        direction = provider(grad_loss)
        qform, ddg_tan = E.tangent_curvature(net, tape, direction)

    g = holder["g"]
    precond = holder["precond"]
    train_loss = float(np.mean(loss_ps.array)) + (0.5 * lam * norm_sq(net.params) if lam != 0.0 else 0.0)
    overlap = inner(g, direction)
    dir_norm = norm_sq(direction)

    if not config.abs_rule and overlap < 0.0:
        raise DescentContractError(
            f"iteration {iteration}: direction has negative overlap {overlap} with the gradient"
        )

    row = MetricsRow(epoch=-1, iteration=iteration, train_loss=train_loss, ell=ell,
                     dir_dot_grad=overlap, pass_units=meter.pass_units,
                     peak_activation_slots=meter.peak_activation_slots)

    if overlap == 0.0 or dir_norm == 0.0:
        # zero-gradient batch: zero step, rescale state untouched
        row.effective_step = 0.0
        row.r_k = 0.0
        return net, resc, precond, row

    ddg_full = ddg_tan + (lam * inner(direction, net.params) if lam != 0.0 else 0.0)
    resc, out = R.rescale_step(resc, qform, ddg_full, dir_norm, lam, config.denom_const)
    rho = abs(out.r_k) if config.abs_rule else out.r_k
    effective = ell * rho
    if config.schedule.robbins_monro is not None:
        rm = config.schedule.robbins_monro
        effective = O.clamp_robbins_monro(effective, iteration + 1, rm.alpha, rm.beta, rm.delta)
    params = O.step_params(net.params, effective, direction)

    row.effective_step = effective
    row.r_k = out.r_k
    row.c_k = out.c_k
    row.c_tilde = out.c_tilde
    row.L_tilde = out.L_tilde
    row.dir_dot_grad = ddg_full
    return net.with_params(params), resc, precond, row


# ---------------------------------------------------------------------------
# replay demos

def demo_newton_1d(theta0: float, steps: int, denom_const: float = 2.0) -> list[float]:
    """Rescaled descent on J(t) = sqrt(1 + t^2), deterministic single-sample
    mode with beta3 = 0, lambda = 0, plain gradient direction and ell = D.

    Under those settings one update is exactly t -> -t^3, the classical
    diverge-if-|t|>1 map of this objective.
    """
    state = R.RescaleState(beta3=0.0)
    theta = ParamVec.of([(0, [float(theta0)])])
    traj = [float(theta0)]
    for _ in range(steps):
        t = theta.segment(0).data[0]
        u = 1.0 + t * t
        g = ParamVec.of([(0, [t / math.sqrt(u)])])
        direction = O.direction_sgd(g)
        dn2 = norm_sq(direction)
        if dn2 == 0.0:
            traj.append(t)
            continue
        qform = [dn2 * u ** -1.5]  # exact quadratic form of this objective
        state, out = R.rescale_step(state, np.array(qform), inner(direction, g), dn2,
                                    lam=0.0, denom_const=denom_const)
        theta = O.apply_update(theta, denom_const, out.r_k, direction)
        traj.append(float(theta.segment(0).data[0]))
    return traj


def demo_stochastic_mean(n_samples: int, dim: int, batch_size: int, steps: int,
                         seed: int = 0, theta0: float = 10.0, beta3: float = 0.9,
                         denom_const: float = 2.0) -> dict:
    """Rescaled descent on the mean-estimation objective 0.5 E||t - X||^2.

    Runs the full engine (bias stage on zero inputs + squared loss) with
    ell = D; every iterate lands exactly on the current batch mean.
    """
    rng = np.random.default_rng(seed)
    population = rng.normal(0.0, 1.0, size=(n_samples, dim)) + rng.normal(0.0, 2.0, size=(1, dim))
    specs = [L.bias((dim,)), L.mse_loss((dim,))]
    net = E.Network(E.validate_network(specs), ParamVec.of([(0, np.full(dim, float(theta0)))]))
    resc = R.RescaleState(beta3=beta3)
    trajectory, batch_means = [], []
    for k in range(steps):
        idx = rng.choice(n_samples, size=min(batch_size, n_samples), replace=False)
        batch = BatchView(Tensor.zeros((len(idx), dim)), Tensor.of(population[idx]), len(idx))
        loss_ps, tape = E.run_forward(net, batch)
        grad, _ = E.run_backward(net, tape)
        direction = O.direction_sgd(grad)
        qform, ddg = E.tangent_curvature(net, tape, direction)
        dn2 = norm_sq(direction)
        if dn2 == 0.0:
            trajectory.append(net.params.segment(0).array.copy())
            batch_means.append(population[idx].mean(axis=0))
            continue
        resc, out = R.rescale_step(resc, qform, ddg, dn2, lam=0.0, denom_const=denom_const)
        params = O.apply_update(net.params, denom_const, out.r_k, direction)
        net = net.with_params(params)
        trajectory.append(net.params.segment(0).array.copy())
        batch_means.append(population[idx].mean(axis=0))
    return {
        "trajectory": trajectory,
        "batch_means": batch_means,
        "population_mean": population.mean(axis=0),
    }


def ema_report(series, factor: float = 0.99) -> np.ndarray:
    """Exponential smoothing for display; the first value passes through."""
    values = np.asarray(list(series), dtype=np.float64)
    if values.size == 0:
        raise ValueError("ema_report needs a non-empty series")
    out = np.empty_like(values)
    out[0] = values[0]
    for i in range(1, values.size):
        out[i] = factor * out[i - 1] + (1.0 - factor) * values[i]
    return out
