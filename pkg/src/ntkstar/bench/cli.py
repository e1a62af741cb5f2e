"""``bench`` command line entry point."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from ..core import SQUARED_ERROR, TrainConfig
from ..features import OmegaSampler, sample_ensemble
from ..kernel import KernelSpec, kernel_eval, mc_kernel_estimate
from ..trainers import KernelMachine, train_finite_frozen
from ..transport import QuadratureGrid, alpha_sweep, canonical_instances
from .datasets import generate_dataset
from .harness import ConfigError, RunConfig, run_experiment

MIN_SLOPE = 1.9
MASS_TOL = 1e-10
Z_LIMIT = 5.0
ORACLE_TOL = 1e-9


def _cmd_run(args) -> int:
    try:
        config = RunConfig.load(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    manifest = run_experiment(config, args.out)
    for cell in manifest["cells"]:
        loss = cell["final_eval_loss"] if cell["final_eval_loss"] is not None else cell["final_train_loss"]
        print(f"{cell['model_kind']:>18} width={cell['width']:>5} seed={cell['seed']} {cell['status']} loss={loss}")
    return 0 if manifest["failed_cells"] == 0 else 1


def _cmd_transport(args) -> int:
    alphas = [args.alpha_max / 2**k for k in range(args.levels)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    with open(out / "transport_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "alpha", "error", "slope", "mass_error"])
        for inst in canonical_instances():
            r = alpha_sweep(inst, alphas, QuadratureGrid(inst.rho.dim, points_per_axis=args.points))
            for a, e in zip(r["alphas"], r["errors"]):
                w.writerow([r["instance"], repr(a), repr(e), repr(r["slope"]), repr(r["mass_error"])])
            passed = r["slope"] >= MIN_SLOPE and r["mass_error"] <= MASS_TOL
            ok &= passed
            print(f"{r['instance']:<24} slope={r['slope']:.4f} mass_err={r['mass_error']:.2e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def _cmd_kernel_verify(args) -> int:
    if args.kind != "relu":
        print("only the relu closed form is available", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    spec = KernelSpec.analytic_relu()
    ok = True
    with open(out / "kernel_verify.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "analytic", "mc_mean", "mc_stderr", "z"])
        for p in range(args.pairs):
            x, x2 = rng.standard_normal((2, args.dim))
            exact = kernel_eval(spec, x, x2)
            mean, se = mc_kernel_estimate("relu", OmegaSampler(args.dim, args.seed + 1 + p), x, x2, args.samples)
            z = (mean - exact) / se
            ok &= abs(z) <= Z_LIMIT
            w.writerow([p, repr(exact), repr(mean), repr(se), repr(z)])
            print(f"pair {p}: analytic={exact:.6f} mc={mean:.6f} +- {se:.1e} z={z:+.2f}")
    return 0 if ok else 1


def oracle_check(width: int, steps: int, mode: str, seed: int, n_train: int = 20, dim: int = 4) -> float:
    """Max relative gap between a kernel machine and its explicit model."""
    train = generate_dataset("TeacherRegression", n_train, seed, dim, 2, "train")
    held = generate_dataset("TeacherRegression", 10, seed, dim, 2, "eval")
    ens = sample_ensemble(OmegaSampler(dim, seed), "relu", width)
    alpha = 0.1 if mode == "sgd" else 1e-2
    config = TrainConfig(alpha=alpha, steps=steps, seed=seed)
    explicit = train_finite_frozen(ens, train, SQUARED_ERROR, mode, config, width_scaled=True)
    machine = KernelMachine(KernelSpec.empirical(ens), config, mode).fit(train)
    worst = 0.0
    for X in (train.X, held.X):
        a, b = machine.predict(X), explicit.predict(X)
        worst = max(worst, float(np.max(np.abs(a - b)) / np.max(np.abs(b))))
    return worst


def _cmd_oracle(args) -> int:
    err = oracle_check(args.width, args.steps, args.mode, args.seed)
    print(f"max relative error: {err:.3e}")
    return 0 if err <= ORACLE_TOL else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Frozen-feature kernel benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a width-sweep experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("transport-sweep", help="head-reweighting vs parameter transport")
    p.add_argument("--alpha-max", type=float, default=1e-2)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--points", type=int, default=2001, help="quadrature points per axis")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_transport)

    p = sub.add_parser("kernel-verify", help="Monte Carlo check of the closed-form kernel")
    p.add_argument("--kind", default="relu")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_kernel_verify)

    p = sub.add_parser("oracle-check", help="kernel machine vs explicit model")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--mode", choices=["sgd", "adamstar"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
