"""Shared types, losses and training configuration."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class DivergenceError(FloatingPointError):
    """Raised when training produces a non-finite value."""

    def __init__(self, step: int, what: str = "value"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


class InvalidWidthError(ValueError):
    pass


class InvalidSampleCountError(ValueError):
    pass


def as_vector(a, name: str = "array") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered set of training pairs.

    Rows of ``X`` and ``Y`` are examples; their order defines the online step
    sequence (step ``t`` uses row ``(t - 1) % N``).
    """

    X: np.ndarray
    Y: np.ndarray
    name: str = "dataset"
    _fingerprint: str = field(default="", init=False, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        if X.ndim != 2 or Y.ndim != 2:
            raise DimensionError("X and Y must be 2-D")
        if X.shape[0] == 0:
            raise ValueError("dataset must be non-empty")
        if X.shape[0] != Y.shape[0]:
            raise DimensionError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset entries must be finite")
        X = np.ascontiguousarray(X)
        Y = np.ascontiguousarray(Y)
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        h = hashlib.sha256()
        h.update(np.asarray(X.shape, dtype="<i8").tobytes())
        h.update(X.astype("<f8").tobytes())
        object.__setattr__(self, "_fingerprint", h.hexdigest())

    @classmethod
    def from_examples(cls, examples, name: str = "dataset") -> "Dataset":
        examples = list(examples)
        if not examples:
            raise ValueError("dataset must be non-empty")
        return cls(
            np.stack([as_vector(e.x) for e in examples]),
            np.stack([as_vector(e.y) for e in examples]),
            name,
        )

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Example:
        return Example(self.X[i], self.Y[i])

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def output_dim(self) -> int:
        return self.Y.shape[1]

    @property
    def fingerprint(self) -> str:
        """sha256 over the inputs only; the kernel never sees targets."""
        return self._fingerprint

    def step_index(self, t: int) -> int:
        """Row used at 1-indexed training step ``t``."""
        return (t - 1) % len(self)


class LossKind(enum.Enum):
    SQUARED_ERROR = "squared_error"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.SQUARED_ERROR


SQUARED_ERROR = LossSpec()


def _check_pair(f, y):
    f = as_vector(f, "f")
    y = as_vector(y, "y")
    if f.shape != y.shape:
        raise DimensionError(f"prediction has length {f.size}, target {y.size}")
    return f, y


def loss_value(loss: LossSpec, f, y) -> float:
    """Half squared error ``0.5 * ||f - y||^2``."""
    f, y = _check_pair(f, y)
    if loss.kind is LossKind.SQUARED_ERROR:
        r = f - y
        return 0.5 * float(r @ r)
    raise NotImplementedError(loss.kind)


def loss_grad(loss: LossSpec, f, y) -> np.ndarray:
    f, y = _check_pair(f, y)
    if loss.kind is LossKind.SQUARED_ERROR:
        return f - y
    raise NotImplementedError(loss.kind)


def mean_loss(loss: LossSpec, F: np.ndarray, Y: np.ndarray) -> float:
    """Average per-example loss over the rows of ``F`` and ``Y``."""
    F = np.asarray(F, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if F.shape != Y.shape:
        raise DimensionError(f"predictions {F.shape} vs targets {Y.shape}")
    if loss.kind is LossKind.SQUARED_ERROR:
        return float(0.5 * np.mean(np.sum((F - Y) ** 2, axis=1)))
    raise NotImplementedError(loss.kind)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be an integer >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
