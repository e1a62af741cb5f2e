"""Width-sweep experiment runner.

A run trains every (seed, width, model kind) cell on one task and writes

* ``loss_curves.csv``  - train/eval loss every ``eval_every`` steps and at the end
* ``final_losses.csv`` - the last row of every finished cell
* ``plot.svg``         - final loss against width, one line per model kind
* ``manifest.json``    - config echo, fingerprints, per-cell outcome and timing

Both CSV files share the column order of :data:`CSV_COLUMNS`. Absent values
(no eval split, wall time not recorded) are empty fields. The analytic-kernel
cells use the width label ``inf``.

Feature ensembles are serialized for fingerprinting as the ASCII line
``NTKENS1``, then ``"<kind> <S> <H>"``, each newline-terminated, followed by
``H*S`` little-endian float64 values in row-major order. The manifest records
the sha256 of that blob per (seed, width).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import SQUARED_ERROR, DivergenceError, TrainConfig, mean_loss
from ..features import FeatureKind, OmegaSampler, feature_matrix, sample_ensemble
from ..kernel import KernelSpec, gram, kernel_matrix
from ..trainers import (
    KernelMachine,
    KernelMode,
    kernel_config_for_width,
    train_finite_frozen,
    train_finite_mlp_full,
)
from .datasets import Task, generate_dataset

CSV_COLUMNS = [
    "run_id",
    "task",
    "model_kind",
    "width",
    "seed",
    "step",
    "train_loss",
    "eval_loss",
    "wall_ms",
]

MODEL_KINDS = (
    "MlpUnfrozen",
    "MlpFrozen",
    "KernelSgd",
    "KernelAdamStar",
    "MlpFrozenAdam",
    "MlpFrozenAdamStar",
)
KERNEL_KINDS = ("KernelSgd", "KernelAdamStar")
INF = "inf"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Experiment grid. ``adam_alpha`` is the per-parameter ADAM step of the
    explicit models; kernel ADAM* cells use the equivalent kernel step at
    their width (``infinite_adam_width`` stands in for the analytic cells)."""

    task: str = "TeacherRegression"
    widths: tuple = (64, 256)
    model_kinds: tuple = ("MlpFrozen", "KernelSgd")
    seeds: tuple = (0,)
    steps: int = 100
    n_train: int = 100
    n_eval: int = 100
    input_dim: int = 4
    output_dim: int = 1
    feature_kind: str = "relu"
    sgd_alpha: float = 1e-1
    adam_alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    eval_every: int = 10
    include_infinite: bool = False
    infinite_adam_width: int | None = None
    record_wall_ms: bool = False
    run_id: str | None = None

    def __post_init__(self):
        Task.parse(self.task)
        FeatureKind.parse(self.feature_kind)
        widths = tuple(int(w) for w in self.widths)
        if not widths and not self.include_infinite:
            raise ConfigError("need at least one width")
        if any(w < 1 for w in widths) or list(widths) != sorted(widths):
            raise ConfigError("widths must be positive and sorted ascending")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "model_kinds", tuple(self.model_kinds))
        unknown = set(self.model_kinds) - set(MODEL_KINDS)
        if unknown:
            raise ConfigError(f"unknown model kinds {sorted(unknown)}")
        if not self.model_kinds or not self.seeds:
            raise ConfigError("model_kinds and seeds must be non-empty")
        if self.n_train < 1 or self.n_eval < 0 or self.steps < 1 or self.eval_every < 1:
            raise ConfigError("n_train, steps, eval_every must be >= 1 and n_eval >= 0")
        if self.include_infinite and FeatureKind.parse(self.feature_kind) is not FeatureKind.RELU_DOT:
            raise ConfigError("the infinite-width kernel needs relu features")
        # validates alpha, betas, epsilon
        self.train_config("sgd")
        self.train_config("adam")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["seeds"] = list(self.seeds)
        d["model_kinds"] = list(self.model_kinds)
        return d

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def train_config(self, family: str, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            alpha=self.sgd_alpha if family == "sgd" else self.adam_alpha,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            steps=self.steps,
            seed=seed,
        )

    def cells(self) -> list[tuple[int, object, str]]:
        out = []
        for seed in self.seeds:
            for w in self.widths:
                for kind in self.model_kinds:
                    out.append((seed, w, kind))
            if self.include_infinite:
                for kind in self.model_kinds:
                    if kind in KERNEL_KINDS:
                        out.append((seed, INF, kind))
        return out


@dataclass
class CellResult:
    seed: int
    width: object
    model_kind: str
    rows: list = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    wall_ms: float = 0.0

    @property
    def final(self):
        return self.rows[-1] if self.rows else None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _Context:
    """Datasets, ensembles and Gram matrices shared by the cells of a run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.train = {}
        self.eval = {}
        self.ensembles = {}
        self.grams = {}
        self.eval_kernels = {}
        c = config
        for seed in c.seeds:
            self.train[seed] = generate_dataset(c.task, c.n_train, seed, c.input_dim, c.output_dim, "train")
            self.eval[seed] = (
                generate_dataset(c.task, c.n_eval, seed, c.input_dim, c.output_dim, "eval")
                if c.n_eval
                else None
            )
            if c.widths:
                # one ensemble at the widest width; narrower ones are prefixes
                top = sample_ensemble(OmegaSampler(c.input_dim, seed), c.feature_kind, c.widths[-1])
                for w in c.widths:
                    self.ensembles[seed, w] = top.prefix(w)
            needs_kernel = any(k in KERNEL_KINDS for k in c.model_kinds)
            if needs_kernel:
                specs = {w: KernelSpec.empirical(self.ensembles[seed, w]) for w in c.widths}
                if c.include_infinite:
                    specs[INF] = KernelSpec.analytic_relu()
                for w, spec in specs.items():
                    self.grams[seed, w] = (spec, gram(spec, self.train[seed]))
                    if self.eval[seed] is not None:
                        self.eval_kernels[seed, w] = kernel_matrix(spec, self.eval[seed].X, self.train[seed].X)


def _run_cell(ctx: _Context, run_id: str, seed: int, width, kind: str) -> CellResult:
    c = ctx.config
    train, ev = ctx.train[seed], ctx.eval[seed]
    res = CellResult(seed, width, kind)
    start = time.perf_counter()

    def record(t, train_pred, eval_pred):
        if t % c.eval_every and t != c.steps:
            return
        tl = mean_loss(SQUARED_ERROR, train_pred(), train.Y)
        el = None if ev is None else mean_loss(SQUARED_ERROR, eval_pred(), ev.Y)
        wall = round((time.perf_counter() - start) * 1000.0, 3) if c.record_wall_ms else None
        res.rows.append([run_id, c.task, kind, str(width), seed, t, tl, el, wall])

    try:
        if kind in KERNEL_KINDS:
            spec, G = ctx.grams[seed, width]
            if kind == "KernelSgd":
                mode, cfg = KernelMode.SGD, c.train_config("sgd", seed)
            else:
                mode = KernelMode.ADAM_STAR
                ref = width if width != INF else (c.infinite_adam_width or max(c.widths, default=1))
                cfg = kernel_config_for_width(c.train_config("adam", seed), ref)
            machine = KernelMachine(spec, cfg, mode, SQUARED_ERROR).prime(train, G)
            K_eval = ctx.eval_kernels.get((seed, width))
            machine.fit(
                train,
                on_step=lambda t, m: record(t, m.predict_train, lambda: m.predict(ev.X, K=K_eval)),
            )
        elif kind == "MlpUnfrozen":
            ens = ctx.ensembles[seed, width]
            train_finite_mlp_full(
                ens,
                train,
                SQUARED_ERROR,
                "adam",
                c.train_config("adam", seed),
                on_step=lambda t, m: record(t, lambda: m.predict(train.X), lambda: m.predict(ev.X)),
            )
        else:
            ens = ctx.ensembles[seed, width]
            opt = {"MlpFrozen": "sgd", "MlpFrozenAdam": "adam", "MlpFrozenAdamStar": "adamstar"}[kind]
            family = "sgd" if opt == "sgd" else "adam"
            root_h = np.sqrt(ens.width)
            phi_train = feature_matrix(ens, train)
            phi_eval = feature_matrix(ens, ev) if ev is not None else None
            train_finite_frozen(
                ens,
                train,
                SQUARED_ERROR,
                opt,
                c.train_config(family, seed),
                on_step=lambda t, m: record(t, lambda: phi_train @ m.M / root_h, lambda: phi_eval @ m.M / root_h),
            )
    except DivergenceError as exc:
        res.status = "failed"
        res.error = str(exc)
    res.wall_ms = (time.perf_counter() - start) * 1000.0
    return res


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode()


def bench_threads(default: int = 1) -> int:
    raw = os.environ.get("BENCH_THREADS")
    if not raw:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError("BENCH_THREADS must be >= 1")
    return n


def run_experiment(config: RunConfig, output_dir, threads: int | None = None) -> dict:
    """Run every cell of ``config`` and write the run artifacts to ``output_dir``."""
    from .plot import emit_plot

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = bench_threads() if threads is None else threads
    run_id = config.resolved_run_id()
    ctx = _Context(config)
    cells = config.cells()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda cell: _run_cell(ctx, run_id, *cell), cells))
    else:
        results = [_run_cell(ctx, run_id, *cell) for cell in cells]

    curves = [row for r in results for row in r.rows]
    finals = [r.final for r in results if r.status == "ok" and r.final is not None]
    _atomic_write(out / "loss_curves.csv", _csv_bytes(curves))
    _atomic_write(out / "final_losses.csv", _csv_bytes(finals))
    svg = emit_plot(out / "final_losses.csv", None)
    _atomic_write(out / "plot.svg", svg.encode())

    manifest = {
        "run_id": run_id,
        "config": config.to_dict(),
        "threads": threads,
        "ensembles": {
            f"seed={s},width={w}": e.fingerprint for (s, w), e in sorted(ctx.ensembles.items())
        },
        "grams": {
            f"seed={s},width={w}": g.fingerprint for (s, w), (_, g) in sorted(ctx.grams.items(), key=str)
        },
        "datasets": {
            f"seed={s}": {
                "train": ctx.train[s].fingerprint,
                "eval": None if ctx.eval[s] is None else ctx.eval[s].fingerprint,
            }
            for s in config.seeds
        },
        "cells": [
            {
                "model_kind": r.model_kind,
                "width": str(r.width),
                "seed": r.seed,
                "data_seed": r.seed,
                "ensemble_seed": r.seed,
                "status": r.status,
                "error": r.error,
                "final_step": None if r.final is None else r.final[5],
                "final_train_loss": None if r.final is None else r.final[6],
                "final_eval_loss": None if r.final is None else r.final[7],
                "wall_ms": round(r.wall_ms, 3),
            }
            for r in results
        ],
        "failed_cells": sum(r.status != "ok" for r in results),
        "artifacts": ["loss_curves.csv", "final_losses.csv", "plot.svg", "manifest.json"],
    }
    _atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())
    return manifest
