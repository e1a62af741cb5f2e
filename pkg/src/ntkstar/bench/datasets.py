"""Synthetic desk-scale tasks."""

from __future__ import annotations

import enum

import numpy as np

from ..core import Dataset
from ..features import FeatureEnsemble, FeatureKind

TEACHER_WIDTH = 32

_SPLITS = {"train": 0, "eval": 1}


class Task(enum.Enum):
    TEACHER_REGRESSION = "TeacherRegression"
    SINUSOID_REGRESSION = "SinusoidRegression"
    TWO_CLUSTER_CLASSIFICATION = "TwoClusterClassification"

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, cls):
            return value
        for t in cls:
            if value in (t.value, t.name):
                return t
        raise ValueError(f"unknown task {value!r}")


def teacher(seed: int, input_dim: int, output_dim: int) -> tuple[FeatureEnsemble, np.ndarray]:
    """Random two-layer tanh teacher as (first layer, head).

    Targets are ``tanh(x @ W.T) @ a / sqrt(width)``, i.e. a frozen-feature
    model with ``M = a``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    W = rng.standard_normal((TEACHER_WIDTH, input_dim)) / np.sqrt(input_dim)
    a = rng.standard_normal((TEACHER_WIDTH, output_dim))
    return FeatureEnsemble(W, FeatureKind.TANH_DOT), a


def generate_dataset(
    task,
    n: int,
    seed: int,
    input_dim: int = 4,
    output_dim: int = 1,
    split: str = "train",
) -> Dataset:
    task = Task.parse(task)
    if n < 1:
        raise ValueError("n must be >= 1")
    if input_dim < 1 or output_dim < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLITS[split]]))
    name = f"{task.value}-{split}-{seed}"

    if task is Task.TEACHER_REGRESSION:
        W, a = teacher(seed, input_dim, output_dim)
        X = rng.standard_normal((n, input_dim))
        Y = np.tanh(X @ W.omegas.T) @ a / np.sqrt(W.width)
        return Dataset(X, Y, name)

    if task is Task.SINUSOID_REGRESSION:
        if input_dim != 1 or output_dim != 1:
            raise ValueError("sinusoid task is one-dimensional")
        X = rng.uniform(-2.0, 2.0, size=(n, 1))
        return Dataset(X, np.sin(3.0 * X), name)

    if output_dim != 1:
        raise ValueError("two-cluster task has a single output")
    # cluster geometry depends on the seed only, so splits share it
    geo = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    direction = geo.standard_normal(input_dim)
    direction /= np.linalg.norm(direction)
    labels = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    X = labels[:, None] * 1.5 * direction + 0.5 * rng.standard_normal((n, input_dim))
    return Dataset(X, labels[:, None], name)
