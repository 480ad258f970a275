"""Finite-difference and identity oracles for stages and composite networks.

The oracles only ever evaluate forward passes, so they are independent of the
backward/tangent machinery they judge.  `run_all_checks` drives every stage
kind and a family of seeded composite nets through gradient, tangent,
curvature, duality, Hessian-vector and checkpoint-parity checks and reports
the worst relative error of each against its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from . import layers as L
from .tensor import BatchView, ParamVec, Tensor, axpy, inner


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return f"{verdict:4s} {self.name:38s} max rel err {self.max_rel_err:9.3e}  (tol {self.tolerance:.1e})"


def batch_loss(net: E.Network, batch: BatchView) -> float:
    loss_ps, _ = E.run_forward(net, batch)
    return float(np.mean(loss_ps.array))


def rand_like(params: ParamVec, rng: np.random.Generator) -> ParamVec:
    return ParamVec.of([(i, rng.normal(size=t.shape)) for i, t in params.segments])


def _shift(params: ParamVec, seg: int, flat: int, delta: float) -> ParamVec:
    out = []
    for idx, (i, t) in enumerate(params.segments):
        arr = t.array.copy()
        if idx == seg:
            arr.reshape(-1)[flat] += delta
        out.append((i, arr))
    return ParamVec.of(out)


def fd_gradient(net: E.Network, batch: BatchView, eps: float = 1e-5) -> ParamVec:
    """Central-difference gradient of the batch loss, one coordinate at a time."""
    grads = []
    for seg, (i, t) in enumerate(net.params.segments):
        g = np.zeros(t.size)
        for flat in range(t.size):
            up = batch_loss(net.with_params(_shift(net.params, seg, flat, eps)), batch)
            dn = batch_loss(net.with_params(_shift(net.params, seg, flat, -eps)), batch)
            g[flat] = (up - dn) / (2.0 * eps)
        grads.append((i, g.reshape(t.shape)))
    return ParamVec.of(grads)


def fd_second_directional(net: E.Network, batch: BatchView, direction: ParamVec,
                          tau: float = 1e-4) -> float:
    """Second central difference of the batch loss along a direction."""
    mid = batch_loss(net, batch)
    up = batch_loss(net.with_params(axpy(tau, direction, net.params)), batch)
    dn = batch_loss(net.with_params(axpy(-tau, direction, net.params)), batch)
    return (up - 2.0 * mid + dn) / (tau * tau)


def rel_err_vec(got: ParamVec, want: ParamVec) -> float:
    num = 0.0
    den = 0.0
    for (_, a), (_, b) in zip(got.segments, want.segments):
        num += float(np.sum((a.array - b.array) ** 2))
        den += float(np.sum(b.array ** 2))
    return np.sqrt(num) / max(np.sqrt(den), 1e-30)


def rel_err(got: float, want: float, floor: float = 1e-12) -> float:
    return abs(got - want) / max(abs(want), floor)


# ---------------------------------------------------------------------------
# composite oracle nets

def make_oracle_nets(seed: int = 0) -> list[tuple[str, E.Network, BatchView]]:
    """Five small seeded nets covering every stage kind."""
    rng = np.random.default_rng(seed)
    out = []

    def batch_for(net: E.Network, nsamples: int) -> BatchView:
        inputs = rng.normal(size=(nsamples,) + net.layers[0].in_shape)
        loss = net.layers[-1]
        if loss.kind == "loss_cross_entropy":
            targets = rng.integers(0, loss.in_shape[0], size=nsamples).astype(np.float64)
        else:
            targets = rng.normal(size=(nsamples,) + loss.in_shape)
        return BatchView(Tensor.of(inputs), Tensor.of(targets), nsamples)

    net = E.init_network([L.dense((6,), 5), L.activation("tanh", (5,)),
                          L.dense((5,), 4), L.mse_loss((4,))], seed + 11)
    out.append(("dense-tanh-mse", net, batch_for(net, 5)))

    net = E.init_network([L.dense((5,), 4), L.bias((4,)), L.activation("softplus", (4,), 5.0),
                          L.dense((4,), 3), L.cross_entropy_loss(3)], seed + 23)
    out.append(("dense-softplus-xent", net, batch_for(net, 6)))

    net = E.init_network([L.conv2d((2, 5, 5), 3, (3, 3)), L.activation("elu", (3, 3, 3)),
                          L.dense((3, 3, 3), 4), L.mse_loss((4,))], seed + 37)
    out.append(("conv-elu-mse", net, batch_for(net, 3)))

    net = E.init_network([L.dense((4,), 4), L.centering((4,)), L.normalizing((4,), 1e-3),
                          L.activation("tanh", (4,)), L.dense((4,), 3), L.mse_loss((3,))], seed + 41)
    out.append(("batchnorm-chain", net, batch_for(net, 6)))

    net = E.init_network([L.dense((3,), 8), L.activation("tanh", (8,)), L.bias((8,)),
                          L.dense((8,), 6), L.activation("softplus", (6,), 2.0),
                          L.cross_entropy_loss(6)], seed + 53)
    out.append(("deep-mixed", net, batch_for(net, 4)))
    return out


def elu_margin(net: E.Network, batch: BatchView) -> float:
    """Smallest |pre-activation| feeding an elu stage; finite differences near
    the elu kink are unreliable because its curvature jumps there."""
    x = batch.inputs.array
    margin = np.inf
    for s in range(net.layer_count):
        spec = net.layers[s]
        if spec.kind == "activation" and spec.act == "elu":
            margin = min(margin, float(np.min(np.abs(x))))
        if spec.is_loss:
            break
        x, _ = L.forward(spec, x, net.theta(s))
    return margin


# ---------------------------------------------------------------------------
# network-level checks

def check_gradients(nets, eps: float = 1e-5, tol: float = 1e-6) -> CheckResult:
    worst = 0.0
    for _, net, batch in nets:
        _, tape = E.run_forward(net, batch)
        grad, _ = E.run_backward(net, tape)
        worst = max(worst, rel_err_vec(grad, fd_gradient(net, batch, eps)))
    return CheckResult("gradient vs central differences", worst, tol)


def check_curvature(nets, tau: float = 1e-4, tol: float = 1e-4, ndirs: int = 5,
                    seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, net, batch in nets:
        _, tape = E.run_forward(net, batch)
        E.run_backward(net, tape)
        for _ in range(ndirs):
            d = rand_like(net.params, rng)
            qform, _ = E.tangent_curvature(net, tape, d)
            got = float(np.mean(qform.array))
            want = fd_second_directional(net, batch, d, tau)
            worst = max(worst, rel_err(got, want, floor=1e-6))
    return CheckResult("curvature vs second differences", worst, tol)


def check_duality(nets, tol: float = 1e-10, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, net, batch in nets:
        _, tape = E.run_forward(net, batch)
        grad, _ = E.run_backward(net, tape)
        for _ in range(3):
            d = rand_like(net.params, rng)
            _, ddg = E.tangent_curvature(net, tape, d)
            worst = max(worst, rel_err(ddg, inner(grad, d)))
    return CheckResult("tangent/gradient duality", worst, tol)


def check_hvp(nets, tol: float = 1e-9, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, net, batch in nets:
        _, tape = E.run_forward(net, batch)
        E.run_backward(net, tape)
        u = rand_like(net.params, rng)
        v = rand_like(net.params, rng)
        hu = E.hessian_vector_product(net, tape, u)
        hv = E.hessian_vector_product(net, tape, v)
        qform, _ = E.tangent_curvature(net, tape, u)
        worst = max(worst, rel_err(inner(hu, u), float(np.mean(qform.array)), floor=1e-9))
        worst = max(worst, rel_err(inner(hu, v), inner(u, hv), floor=1e-9))
    return CheckResult("hvp consistency and symmetry", worst, tol)


def check_checkpoint_parity(nets, tol: float = 1e-12, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, net, batch in nets:
        d = rand_like(net.params, rng)
        _, tape = E.run_forward(net, batch)
        grad, _ = E.run_backward(net, tape)
        qform, ddg = E.tangent_curvature(net, tape, d)
        ck = E.run_checkpointed(net, batch, lambda _g: d)
        worst = max(worst, rel_err_vec(ck.grad, grad))
        worst = max(worst, float(np.max(np.abs(ck.per_sample_qform.array - qform.array))
                                 / max(np.max(np.abs(qform.array)), 1e-30)))
        worst = max(worst, rel_err(ck.dir_dot_grad, ddg))
    return CheckResult("checkpointed == plain", worst, tol)


# ---------------------------------------------------------------------------
# stage-level checks

def layer_cases(seed: int = 0) -> list[tuple[str, L.LayerSpec, np.ndarray, np.ndarray, np.ndarray]]:
    """(name, spec, theta, x, target) for every stage kind."""
    rng = np.random.default_rng(seed)
    cases = []

    def add(name, spec, nsamples=4, theta=None, target=None):
        x = rng.normal(size=(nsamples,) + spec.in_shape)
        if name.startswith("elu"):
            x = np.where(np.abs(x) < 0.05, x + 0.2, x)  # keep off the kink
        cases.append((name, spec, theta, x, target))

    add("dense", L.dense((4,), 3), theta=rng.normal(size=(3, 4)))
    add("dense-flatten", L.dense((2, 3, 3), 4), theta=rng.normal(size=(4, 2, 3, 3)))
    add("conv2d", L.conv2d((2, 5, 4), 3, (3, 2)), theta=rng.normal(size=(3, 2, 3, 2)))
    add("bias", L.bias((5,)), theta=rng.normal(size=(5,)))
    add("bias-broadcast", L.bias((2, 3, 3), (2, 1, 1)), theta=rng.normal(size=(2, 1, 1)))
    add("tanh", L.activation("tanh", (6,)))
    add("softplus", L.activation("softplus", (6,), 5.0))
    add("elu", L.activation("elu", (6,)))
    add("centering", L.centering((5,)))
    add("normalizing", L.normalizing((5,), 1e-3), nsamples=6)
    add("mse", L.mse_loss((4,)), target=rng.normal(size=(4, 4)))
    add("xent", L.cross_entropy_loss(5), target=rng.integers(0, 5, size=4).astype(np.float64))
    return cases


def _rand_xhat(spec: L.LayerSpec, nsamples: int, rng) -> np.ndarray:
    if spec.is_loss:
        return rng.normal(size=nsamples)
    return rng.normal(size=(nsamples,) + spec.out_shape)


def check_layer_adjoints(cases, tol: float = 1e-10, seed: int = 5) -> CheckResult:
    """<adjoint(x-hat), v> must equal <x-hat, tangent(v)> for both adjoints."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, spec, theta, x, target in cases:
        y, saved = L.forward(spec, x, theta, target=target)
        xhat = _rand_xhat(spec, x.shape[0], rng)
        v = rng.normal(size=x.shape)
        lhs = float(np.vdot(L.adjoint_input(spec, saved, xhat, theta=theta), v))
        tan = L.tangent(spec, saved, v, np.zeros(spec.param_shape) if spec.has_params else None, theta=theta)
        rhs = float(np.vdot(xhat, tan))
        worst = max(worst, rel_err(lhs, rhs, floor=1e-9))
        if spec.has_params:
            w = rng.normal(size=spec.param_shape)
            lhs = float(np.vdot(L.adjoint_param(spec, saved, xhat), w))
            tan = L.tangent(spec, saved, np.zeros_like(x), w, theta=theta)
            rhs = float(np.vdot(xhat, tan))
            worst = max(worst, rel_err(lhs, rhs, floor=1e-9))
    return CheckResult("stage adjoint identities", worst, tol)


def check_layer_tangent_fd(cases, tau: float = 1e-5, tol: float = 1e-6, seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, spec, theta, x, target in cases:
        _, saved = L.forward(spec, x, theta, target=target)
        v = rng.normal(size=x.shape)
        w = rng.normal(size=spec.param_shape) if spec.has_params else None
        tan = L.tangent(spec, saved, v, w, theta=theta)
        up, _ = L.forward(spec, x + tau * v, None if theta is None else theta + tau * w, target=target)
        dn, _ = L.forward(spec, x - tau * v, None if theta is None else theta - tau * w, target=target)
        fd = (up - dn) / (2.0 * tau)
        worst = max(worst, float(np.linalg.norm(tan - fd) / max(np.linalg.norm(fd), 1e-9)))
    return CheckResult("stage tangent vs central differences", worst, tol)


def _stage_qform(spec, theta, x, target, xhat, v, w, tau=None):
    """Exact (or, with tau, finite-difference) quadratic form
    <Hess_F (v,w) x (v,w), xhat> of one stage."""
    if tau is None:
        _, saved = L.forward(spec, x, theta, target=target)
        return 2.0 * float(np.sum(L.second_order_contribution(spec, saved, v, w, xhat, theta=theta)))
    def phi(t):
        y, _ = L.forward(spec, x + t * v, None if theta is None else theta + t * w, target=target)
        return float(np.vdot(xhat, y))
    return (phi(tau) - 2.0 * phi(0.0) + phi(-tau)) / (tau * tau)


def _fd_noise(spec, theta, x, target, xhat, tau: float) -> float:
    """Cancellation-noise level of the second central difference: the affine
    stages have an exactly-zero quadratic form and finite differences can only
    see them to this resolution."""
    y, _ = L.forward(spec, x, theta, target=target)
    phi0 = abs(float(np.vdot(xhat, y)))
    return 16.0 * np.finfo(float).eps * max(phi0, 1.0) / (tau * tau)


def check_layer_soc_fd(cases, tau: float = 1e-4, tol: float = 1e-5, seed: int = 7) -> CheckResult:
    """Stage quadratic form vs second differences, in excess of the oracle's
    own cancellation noise."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, spec, theta, x, target in cases:
        xhat = _rand_xhat(spec, x.shape[0], rng)
        v = rng.normal(size=x.shape)
        w = rng.normal(size=spec.param_shape) if spec.has_params else None
        got = _stage_qform(spec, theta, x, target, xhat, v, w)
        want = _stage_qform(spec, theta, x, target, xhat, v, w, tau=tau)
        noise = _fd_noise(spec, theta, x, target, xhat, tau)
        excess = max(0.0, abs(got - want) - noise)
        worst = max(worst, excess / max(abs(want), 1e-5))
    return CheckResult("stage second-order vs second differences", worst, tol)


def check_layer_soa(cases, tol: float = 1e-10, nprobes: int = 10, seed: int = 8) -> CheckResult:
    """second_order_adjoints must satisfy its defining implicit equation.

    The right-hand side is recovered by polarizing the (exact) quadratic form,
    so this is an identity check, not a finite-difference one.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, spec, theta, x, target in cases:
        _, saved = L.forward(spec, x, theta, target=target)
        xhat = _rand_xhat(spec, x.shape[0], rng)
        v = rng.normal(size=x.shape)
        w = rng.normal(size=spec.param_shape) if spec.has_params else None
        a_vec, b_vec = L.second_order_adjoints(spec, saved, v, w, xhat, theta=theta)
        for _ in range(nprobes):
            pa = rng.normal(size=x.shape)
            pb = rng.normal(size=spec.param_shape) if spec.has_params else None
            lhs = float(np.vdot(a_vec, pa))
            if b_vec is not None and pb is not None:
                lhs += float(np.vdot(b_vec, pb))
            q_uv = _stage_qform(spec, theta, x, target, xhat, v, w)
            q_pp = _stage_qform(spec, theta, x, target, xhat, pa,
                                pb if spec.has_params else None)
            vs = v + pa
            ws = (w + pb) if spec.has_params else None
            q_sum = _stage_qform(spec, theta, x, target, xhat, vs, ws)
            rhs = 0.5 * (q_sum - q_uv - q_pp)
            worst = max(worst, rel_err(lhs, rhs, floor=1e-7))
    return CheckResult("stage second-order adjoint equation", worst, tol)


def adjudicate_normalizing(seed: int = 0, tau: float = 1e-4) -> dict:
    """Finite-difference adjudication of the two normalizing-stage curvature
    candidates; returns each candidate's worst relative error."""
    rng = np.random.default_rng(seed)
    spec = L.normalizing((5,), 1e-3)
    errors = {"derived": 0.0, "printed": 0.0}
    for _ in range(5):
        x = rng.normal(size=(6, 5)) + 0.5
        xhat = rng.normal(size=(6, 5))
        v = rng.normal(size=(6, 5))
        _, saved = L.forward(spec, x)
        want = _stage_qform(spec, None, x, None, xhat, v, None, tau=tau)
        cands = L.normalizing_curvature_candidates(spec, saved, v, xhat)
        for key, r in cands.items():
            errors[key] = max(errors[key], rel_err(2.0 * float(np.sum(r)), want, floor=1e-6))
    return errors


# ---------------------------------------------------------------------------

def run_all_checks(seed: int = 0, widths=()) -> list[CheckResult]:
    nets = make_oracle_nets(seed)
    for w in widths:
        w = int(w)
        net = E.init_network([L.dense((w,), w), L.activation("tanh", (w,)),
                              L.dense((w,), w), L.mse_loss((w,))], seed + w)
        rng = np.random.default_rng(seed + w + 1)
        batch = BatchView(Tensor.of(rng.normal(size=(4, w))), Tensor.of(rng.normal(size=(4, w))), 4)
        nets.append((f"tanh-net-{w}", net, batch))
    cases = layer_cases(seed)
    return [
        check_layer_adjoints(cases),
        check_layer_tangent_fd(cases),
        check_layer_soc_fd(cases),
        check_layer_soa(cases),
        check_gradients(nets),
        check_curvature(nets),
        check_duality(nets),
        check_hvp(nets),
        check_checkpoint_parity(nets),
    ]
