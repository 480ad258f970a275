"""Command-line surface: train runs, validation checks, cost benchmarks, demos.

Exit codes: 0 success, 1 numeric failure, 2 usage or I/O error.  Flags
override config-file values, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checks as C
from . import engine as E
from . import harness as H
from . import layers as L
from . import rescale as R
from .tensor import BatchView, Tensor

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2


def _parse_schedule_flag(text: str) -> dict:
    kind, _, rest = text.partition(":")
    args = [a for a in rest.split(",") if a] if rest else []
    try:
        if kind == "constant":
            return {"kind": "constant", "ell": float(args[0])}
        if kind == "red":
            out = {"kind": "red"}
            if args:
                out["ell0"] = float(args[0])
            if len(args) > 1:
                out["eta"] = float(args[1])
            return out
        if kind == "cosine":
            return {"kind": "cosine", "ell0": float(args[0]), "ell_min": float(args[1])}
        if kind == "annealing":
            pattern = []
            for part in args:
                ell, _, epochs = part.partition("x")
                pattern.append([float(ell), int(epochs)])
            return {"kind": "annealing", "pattern": pattern}
    except (IndexError, ValueError) as exc:
        raise H.ConfigError(f"bad --schedule value {text!r}: {exc}") from exc
    raise H.ConfigError(f"unknown schedule kind {kind!r} in --schedule")


def cmd_train(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.lam is not None:
            doc["lambda"] = args.lam
        if args.beta3 is not None:
            doc["beta3"] = args.beta3
        if args.denom_const is not None:
            doc["denom_const"] = args.denom_const
        if args.executor is not None:
            doc["executor"] = args.executor
        if args.schedule is not None:
            doc["schedule"] = _parse_schedule_flag(args.schedule)
        config = H.load_config(doc)
    except H.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        result = H.train(config)
    except (R.VanishingCurvatureError, R.ZeroDirectionError, E.NumericError, H.DescentContractError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.config))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.config))[0]
    metrics_path = os.path.join(out_dir, f"{stem}_metrics.csv")
    summary_path = os.path.join(out_dir, f"{stem}_summary.json")
    H.write_metrics_csv(result.rows, metrics_path)
    H.write_summary_json(result.summary, summary_path)
    print(f"wrote {metrics_path}")
    print(f"wrote {summary_path}")
    print(f"final train loss {result.summary['final_train_loss']:.6g}, "
          f"test loss {result.summary['final_test_loss']:.6g}")
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        widths = [int(w) for w in args.sizes.split(",") if w] if args.sizes else []
        if any(w < 1 for w in widths):
            raise ValueError("sizes must be positive")
    except ValueError as exc:
        print(f"error: bad --sizes: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if args.layer == "normalizing":
        errors = C.adjudicate_normalizing(args.seed)
        print("normalizing-stage curvature candidates vs finite differences:")
        for key in ("derived", "printed"):
            verdict = "PASSES" if errors[key] <= 1e-5 else "fails"
            print(f"  {key:8s} max rel err {errors[key]:9.3e}  -> {verdict}")
        ok = errors["derived"] <= 1e-5
        print(f"adopted: derived ({'ok' if ok else 'PROBLEM'})")
        return EXIT_OK if ok else EXIT_NUMERIC

    results = C.run_all_checks(args.seed, widths)
    for res in results:
        print(res.line())
    if all(r.passed for r in results):
        print("all checks passed")
        return EXIT_OK
    print("some checks FAILED", file=sys.stderr)
    return EXIT_NUMERIC


def _bench_net(layer_count: int, width: int, seed: int) -> tuple[E.Network, BatchView]:
    """Uniform-width net with the requested stage count (loss included)."""
    if layer_count < 2:
        raise ValueError("bench needs at least 2 stages")
    specs = []
    for i in range(layer_count - 1):
        if i % 2 == 0:
            specs.append(L.dense((width,), width))
        else:
            specs.append(L.activation("tanh", (width,)))
    specs.append(L.mse_loss((width,)))
    net = E.init_network(specs, seed)
    rng = np.random.default_rng(seed + 1)
    batch = BatchView(Tensor.of(rng.normal(size=(8, width))),
                      Tensor.of(rng.normal(size=(8, width))), 8)
    return net, batch


def cmd_bench(args) -> int:
    try:
        net, batch = _bench_net(args.layers, args.width, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    direction = C.rand_like(net.params, np.random.default_rng(args.seed + 2))
    costs = E.measure_costs(net, batch, direction)
    base = costs["gradient_only"].pass_units
    print(f"stages: {args.layers}  width: {args.width}  split: {costs['split']}")
    print(f"{'mode':18s} {'pass_units':>10s} {'ratio':>6s} {'peak_slots':>10s} {'transfers':>9s}")
    for key in ("gradient_only", "plain_curvature", "checkpointed"):
        m = costs[key]
        print(f"{key:18s} {m.pass_units:10.3f} {m.pass_units / base:6.3f} "
              f"{m.peak_activation_slots:10d} {m.transfers:9d}")
    return EXIT_OK


def cmd_demo(args) -> int:
    if args.name == "newton1d":
        traj = H.demo_newton_1d(args.theta0, args.steps, args.denom_const)
        for k, t in enumerate(traj):
            print(f"step {k:3d}  theta {t: .10e}")
        return EXIT_OK
    result = H.demo_stochastic_mean(args.samples, args.dim, args.batch_size,
                                    args.steps, seed=args.seed,
                                    denom_const=args.denom_const)
    for k, (theta, mean) in enumerate(zip(result["trajectory"], result["batch_means"])):
        gap = float(np.max(np.abs(theta - mean)))
        print(f"step {k:3d}  |theta - batch mean| {gap:.3e}")
    print(f"population mean (first coords): {result['population_mean'][:4]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvstep",
                                     description="curvature-rescaled training engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--beta3", type=float)
    p.add_argument("--denom-const", dest="denom_const", type=float)
    p.add_argument("--schedule")
    p.add_argument("--executor", choices=("plain", "checkpointed"))
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("check", help="finite-difference and identity validation suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", help="comma-separated widths for extra oracle nets")
    p.add_argument("--layer", choices=("normalizing",),
                   help="report the stage-formula adjudication instead")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("bench", help="pass/memory accounting of the three executors")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("demo", help="one-dimensional replay demos")
    p.add_argument("name", choices=("newton1d", "stochastic-mean"))
    p.add_argument("--theta0", type=float, default=1.5)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--denom-const", dest="denom_const", type=float, default=2.0)
    p.set_defaults(fn=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
