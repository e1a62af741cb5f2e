"""The frozen-feature kernel ``Theta(x, x') = E_w[g_w(x) g_w(x')]``.

Three routes to the same quantity are provided: the exact mean over a finite
ensemble, the order-1 arc-cosine closed form for ReLU features with standard
Gaussian parameters, and plain Monte Carlo over fresh parameter draws.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Dataset, DimensionError, InvalidSampleCountError, as_vector
from .features import (
    FeatureEnsemble,
    FeatureKind,
    OmegaSampler,
    _activate,
    _preactivation,
    feature_matrix,
)


class KernelVariant(enum.Enum):
    EMPIRICAL = "empirical"
    ANALYTIC_RELU_GAUSSIAN = "analytic_relu_gaussian"


@dataclass(frozen=True, eq=False)
class KernelSpec:
    variant: KernelVariant
    ensemble: FeatureEnsemble | None = None

    def __post_init__(self):
        if self.variant is KernelVariant.EMPIRICAL and self.ensemble is None:
            raise ValueError("empirical kernel needs an ensemble")

    @classmethod
    def empirical(cls, ensemble: FeatureEnsemble) -> "KernelSpec":
        return cls(KernelVariant.EMPIRICAL, ensemble)

    @classmethod
    def analytic_relu(cls) -> "KernelSpec":
        return cls(KernelVariant.ANALYTIC_RELU_GAUSSIAN)

    @property
    def dim(self) -> int | None:
        return None if self.ensemble is None else self.ensemble.dim

    @property
    def fingerprint(self) -> str:
        if self.variant is KernelVariant.EMPIRICAL:
            return "empirical:" + self.ensemble.fingerprint
        return self.variant.value

    def _check(self, X: np.ndarray):
        if self.dim is not None and X.shape[-1] != self.dim:
            raise DimensionError(f"inputs have dimension {X.shape[-1]}, kernel expects {self.dim}")


def _arccos_relu(dot, na, nb):
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.clip(dot / denom, -1.0, 1.0)
    phi = np.arccos(cos)
    val = denom * (np.sin(phi) + (np.pi - phi) * cos) / (2.0 * np.pi)
    return np.where(denom > 0, val, 0.0)


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    x = as_vector(x, "x")
    x2 = as_vector(x2, "x2")
    if x.shape != x2.shape:
        raise DimensionError(f"x has length {x.size}, x2 has {x2.size}")
    spec._check(x)
    if spec.variant is KernelVariant.EMPIRICAL:
        g = feature_matrix(spec.ensemble, np.stack([x, x2]))
        return float(np.dot(g[0], g[1])) / spec.ensemble.width
    na = np.sqrt(np.dot(x, x))
    nb = np.sqrt(np.dot(x2, x2))
    return float(_arccos_relu(np.dot(x, x2), na, nb))


def kernel_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    """Cross-kernel ``K[i, j] = Theta(A_i, B_j)`` via dense linear algebra.

    Faster than :func:`gram` but not bit-identical to :func:`kernel_eval`.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"dimension {A.shape[1]} vs {B.shape[1]}")
    spec._check(A)
    if spec.variant is KernelVariant.EMPIRICAL:
        GA = feature_matrix(spec.ensemble, A)
        GB = feature_matrix(spec.ensemble, B)
        return GA @ GB.T / spec.ensemble.width
    na = np.sqrt(np.einsum("ij,ij->i", A, A))
    nb = np.sqrt(np.einsum("ij,ij->i", B, B))
    return _arccos_relu(A @ B.T, na[:, None], nb[None, :])


@dataclass(frozen=True, eq=False)
class GramMatrix:
    values: np.ndarray
    dataset_fingerprint: str
    _fingerprint: str = field(default="", init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(
            self, "_fingerprint", hashlib.sha256(v.astype("<f8").tobytes()).hexdigest()
        )

    @property
    def fingerprint(self) -> str:
        """Hash of the kernel values themselves."""
        return self._fingerprint

    def min_eigen_ratio(self) -> float:
        """Smallest eigenvalue relative to the largest."""
        w = np.linalg.eigvalsh(self.values)
        top = max(abs(w[-1]), np.finfo(float).tiny)
        return float(w[0] / top)


PAIRWISE_GRAM_LIMIT = 256


def gram(spec: KernelSpec, dataset: Dataset, method: str = "auto") -> GramMatrix:
    """Training Gram matrix, symmetric by construction.

    ``method="pairwise"`` computes the upper triangle one pair at a time so
    every entry rounds exactly as :func:`kernel_eval` would; ``"blas"`` uses a
    single matrix product and mirrors its upper triangle. ``"auto"`` picks
    pairwise up to ``PAIRWISE_GRAM_LIMIT`` examples.
    """
    X = dataset.X
    spec._check(X)
    n = X.shape[0]
    if method == "auto":
        method = "pairwise" if n <= PAIRWISE_GRAM_LIMIT else "blas"
    if method == "blas":
        K = np.triu(kernel_matrix(spec, X, X))
        K = K + np.triu(K, 1).T
        return GramMatrix(K, dataset.fingerprint)
    if method != "pairwise":
        raise ValueError(f"unknown Gram method {method!r}")
    K = np.empty((n, n))
    if spec.variant is KernelVariant.EMPIRICAL:
        G = feature_matrix(spec.ensemble, X)
        H = spec.ensemble.width
        for i in range(n):
            gi = G[i]
            for j in range(i, n):
                K[i, j] = K[j, i] = float(np.dot(gi, G[j])) / H
    else:
        norms = [np.sqrt(np.dot(x, x)) for x in X]
        for i in range(n):
            for j in range(i, n):
                K[i, j] = K[j, i] = float(_arccos_relu(np.dot(X[i], X[j]), norms[i], norms[j]))
    return GramMatrix(K, dataset.fingerprint)


class GramCache:
    """Gram matrices keyed by (kernel fingerprint, dataset fingerprint)."""

    def __init__(self):
        self._store: dict[tuple[str, str], GramMatrix] = {}
        self.misses = 0

    def get(self, spec: KernelSpec, dataset: Dataset) -> GramMatrix:
        key = (spec.fingerprint, dataset.fingerprint)
        if key not in self._store:
            self.misses += 1
            self._store[key] = gram(spec, dataset)
        return self._store[key]

    def __len__(self):
        return len(self._store)


def mc_kernel_estimate(
    kind,
    sampler: OmegaSampler,
    x,
    x2,
    n_samples: int,
    chunk: int = 1 << 20,
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ``g_w(x) g_w(x2)``."""
    if n_samples < 2:
        raise InvalidSampleCountError("need at least 2 samples")
    kind = FeatureKind.parse(kind)
    x = as_vector(x, "x")
    x2 = as_vector(x2, "x2")
    if x.size != sampler.dim or x2.size != sampler.dim:
        raise DimensionError("input dimension does not match sampler")
    ss = np.random.SeedSequence([sampler.seed, sampler.dim, 2**33])
    rng = np.random.default_rng(ss)
    X = np.stack([x, x2])
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        W = rng.standard_normal((m, sampler.dim))
        G = _activate(kind, _preactivation(X, W))
        prod = G[0] * G[1]
        total += float(prod.sum())
        total_sq += float(prod @ prod)
        done += m
    mean = total / n_samples
    var = max(total_sq - n_samples * mean * mean, 0.0) / (n_samples - 1)
    return mean, float(np.sqrt(var / n_samples))


@dataclass
class ConvergenceRow:
    width: int
    replicas: int
    mean: np.ndarray
    error: float


@dataclass
class ConvergenceReport:
    reference: np.ndarray
    rows: list[ConvergenceRow]

    @property
    def errors(self) -> list[float]:
        return [r.error for r in self.rows]


def _gaussian_reference(kind, head_map, x, dim, n_reference, seed):
    if dim <= 2:
        from .transport import QuadratureGrid

        grid = QuadratureGrid(dim=dim)
        pts, w = grid.nodes(np.zeros(dim), 1.0)
        dens = np.exp(-0.5 * np.sum(pts**2, axis=1)) / (2 * np.pi) ** (dim / 2)
        g = _activate(kind, pts @ x)
        vals = np.atleast_2d(np.asarray(head_map(pts), dtype=np.float64).T).T
        return (w * dens * g) @ vals
    rng = np.random.default_rng(np.random.SeedSequence([seed, dim, 2**34]))
    W = rng.standard_normal((n_reference, dim))
    vals = np.atleast_2d(np.asarray(head_map(W), dtype=np.float64).T).T
    return (_activate(kind, W @ x) @ vals) / n_reference


def expectation_identity_check(
    kind,
    sampler: OmegaSampler,
    head_map: Callable[[np.ndarray], np.ndarray],
    x,
    widths: Sequence[int],
    replicas: int | Sequence[int],
    n_reference: int = 4_000_000,
    trial: int = 0,
) -> ConvergenceReport:
    """Average of finite models versus the infinite-width expectation.

    Each replica samples its own ensemble, sets ``M_h = head_map(w_h)/sqrt(H)``
    and evaluates ``f(x) = (1/sqrt(H)) sum_h g_{w_h}(x) M_h``. The report holds,
    per width, the error of the replica mean against a quadrature (``S <= 2``)
    or large Monte Carlo reference of ``E[g_w(x) head_map(w)]``.

    ``head_map`` maps an ``(n, S)`` array of parameters to ``(n, E)`` outputs.
    """
    kind = FeatureKind.parse(kind)
    x = as_vector(x, "x")
    if x.size != sampler.dim:
        raise DimensionError("input dimension does not match sampler")
    if np.isscalar(replicas):
        replicas = [int(replicas)] * len(widths)
    if len(replicas) != len(widths):
        raise ValueError("replicas must be an int or match widths")
    reference = np.atleast_1d(
        _gaussian_reference(kind, head_map, x, sampler.dim, n_reference, sampler.seed)
    )
    rows = []
    for k, (H, R) in enumerate(zip(widths, replicas)):
        rng = np.random.default_rng(np.random.SeedSequence([sampler.seed, sampler.dim, trial, k, H, R]))
        outs = []
        for _ in range(R):
            W = rng.standard_normal((H, sampler.dim))
            M = np.atleast_2d(np.asarray(head_map(W), dtype=np.float64).T).T / np.sqrt(H)
            g = _activate(kind, W @ x)
            outs.append(g @ M / np.sqrt(H))
        mean = np.mean(outs, axis=0)
        rows.append(ConvergenceRow(H, R, mean, float(np.max(np.abs(mean - reference)))))
    return ConvergenceReport(reference, rows)
