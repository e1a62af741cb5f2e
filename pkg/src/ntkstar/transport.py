"""Moving feature parameters versus reweighting the head.

If the density of the feature parameters flows along a vector field ``V``
for a short time ``alpha``, the model changes by the same first-order amount
as when the head is multiplied pointwise by

    1 - alpha * (div V + V . grad log rho)

and the parameters stay put. The functions here evaluate both sides on a
deterministic tensor-product midpoint grid (``S <= 2``) so the O(alpha^2)
remainder can be measured well below Monte Carlo noise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import DimensionError, as_vector
from .features import FeatureKind, _activate


class UnsupportedDimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianDensity:
    mean: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mean", as_vector(self.mean, "mean"))
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")

    @property
    def dim(self) -> int:
        return self.mean.size

    def density(self, P: np.ndarray) -> np.ndarray:
        S = self.dim
        r2 = np.sum((P - self.mean) ** 2, axis=1) / self.sigma**2
        return np.exp(-0.5 * r2) / (2 * np.pi * self.sigma**2) ** (S / 2)

    def score(self, P: np.ndarray) -> np.ndarray:
        """``grad log rho`` at each row of ``P``."""
        return -(P - self.mean) / self.sigma**2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.sigma * rng.standard_normal((n, self.dim))


class FieldKind(enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"


@dataclass(frozen=True, eq=False)
class VectorField:
    """``V(w) = A w + b``; a constant field has ``A = 0``."""

    kind: FieldKind
    A: np.ndarray
    b: np.ndarray

    @classmethod
    def constant(cls, b) -> "VectorField":
        b = as_vector(b, "b")
        return cls(FieldKind.CONSTANT, np.zeros((b.size, b.size)), b)

    @classmethod
    def linear(cls, A, b=None) -> "VectorField":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if A.shape[0] != A.shape[1]:
            raise DimensionError("A must be square")
        b = np.zeros(A.shape[0]) if b is None else as_vector(b, "b")
        return cls(FieldKind.LINEAR, A, b)

    @property
    def dim(self) -> int:
        return self.b.size

    def __call__(self, P: np.ndarray) -> np.ndarray:
        if self.kind is FieldKind.CONSTANT:
            return np.broadcast_to(self.b, P.shape)
        return P @ self.A.T + self.b

    @property
    def divergence(self) -> float:
        return 0.0 if self.kind is FieldKind.CONSTANT else float(np.trace(self.A))


class HeadKind(enum.Enum):
    CONSTANT = "constant"
    TANH_LINEAR = "tanh_linear"


@dataclass(frozen=True, eq=False)
class HeadMap:
    """Smooth map from a parameter vector to an E-vector head."""

    kind: HeadKind
    params: np.ndarray

    @classmethod
    def constant(cls, c) -> "HeadMap":
        return cls(HeadKind.CONSTANT, as_vector(c, "c"))

    @classmethod
    def tanh_linear(cls, W) -> "HeadMap":
        return cls(HeadKind.TANH_LINEAR, np.atleast_2d(np.asarray(W, dtype=np.float64)))

    @property
    def output_dim(self) -> int:
        return self.params.shape[0]

    def __call__(self, P: np.ndarray) -> np.ndarray:
        if self.kind is HeadKind.CONSTANT:
            return np.broadcast_to(self.params, (P.shape[0], self.params.size))
        return np.tanh(P @ self.params.T)


@dataclass(frozen=True, eq=False)
class ReweightedHead:
    """``base(w) * (1 - alpha * (div V + V(w) . score(w)))``, evaluated lazily."""

    base: object
    rho: GaussianDensity
    field: VectorField
    alpha: float

    @property
    def output_dim(self) -> int:
        return self.base.output_dim

    def factor(self, P: np.ndarray) -> np.ndarray:
        flux = np.sum(self.field(P) * self.rho.score(P), axis=1)
        return 1.0 - self.alpha * (self.field.divergence + flux)

    def __call__(self, P: np.ndarray) -> np.ndarray:
        if self.alpha == 0:
            return self.base(P)
        return self.base(P) * self.factor(P)[:, None]


def reweight_head(head, rho: GaussianDensity, field: VectorField, alpha: float) -> ReweightedHead:
    return ReweightedHead(head, rho, field, float(alpha))


@dataclass(frozen=True)
class QuadratureGrid:
    dim: int
    half_width: float = 8.0
    points_per_axis: int = 2001

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise UnsupportedDimensionError(f"grid supports dim 1 or 2, got {self.dim}")

    def nodes(self, mean, sigma: float):
        """Midpoint nodes and weights covering ``mean +- half_width * sigma``."""
        mean = as_vector(mean, "mean")
        n = self.points_per_axis
        h = 2.0 * self.half_width * sigma / n
        offs = -self.half_width * sigma + (np.arange(n) + 0.5) * h
        axes = [mean[d] + offs for d in range(self.dim)]
        if self.dim == 1:
            P = axes[0][:, None]
        else:
            a, b = np.meshgrid(axes[0], axes[1], indexing="ij")
            P = np.column_stack([a.ravel(), b.ravel()])
        return P, np.full(P.shape[0], h**self.dim)


def _check(rho: GaussianDensity, kind, x, grid: QuadratureGrid):
    if rho.dim > 2:
        raise UnsupportedDimensionError(f"S = {rho.dim} exceeds the grid limit of 2")
    if grid.dim != rho.dim:
        raise DimensionError("grid and density dimensions differ")
    if FeatureKind.parse(kind) is not FeatureKind.TANH_DOT:
        raise ValueError("transport checks need differentiable (tanh) features")
    x = as_vector(x, "x")
    if x.size != rho.dim:
        raise DimensionError(f"x has length {x.size}, expected {rho.dim}")
    return x


def _weighted_sum(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    # contiguous 1-D sums use numpy's pairwise reduction
    return np.array([np.sum(weights * np.ascontiguousarray(values[:, e])) for e in range(values.shape[1])])


def model_integral(rho: GaussianDensity, kind, head, x, grid: QuadratureGrid) -> np.ndarray:
    """``int rho(w) g_w(x) head(w) dw``."""
    x = _check(rho, kind, x, grid)
    P, w = grid.nodes(rho.mean, rho.sigma)
    weights = w * rho.density(P) * np.tanh(P @ x)
    return _weighted_sum(weights, head(P))


def pushforward_integral(
    rho: GaussianDensity, kind, head, field: VectorField, alpha: float, x, grid: QuadratureGrid
) -> np.ndarray:
    """Model after moving every parameter ``w -> w + alpha V(w)``."""
    x = _check(rho, kind, x, grid)
    P, w = grid.nodes(rho.mean, rho.sigma)
    Q = P + alpha * field(P) if alpha != 0 else P
    weights = w * rho.density(P) * np.tanh(Q @ x)
    return _weighted_sum(weights, head(Q))


def equivalence_error(
    rho: GaussianDensity, kind, head, field: VectorField, x, alpha: float, grid: QuadratureGrid
) -> float:
    moved = pushforward_integral(rho, kind, head, field, alpha, x, grid)
    reweighted = model_integral(rho, kind, reweight_head(head, rho, field, alpha), x, grid)
    return float(np.max(np.abs(moved - reweighted)))


def reweighted_mass(rho: GaussianDensity, field: VectorField, alpha: float, grid: QuadratureGrid) -> float:
    """Total probability after the reweighting; the flow conserves mass."""
    P, w = grid.nodes(rho.mean, rho.sigma)
    factor = ReweightedHead(None, rho, field, alpha).factor(P)
    return float(np.sum(w * rho.density(P) * factor))


def mc_model_integral(rho, kind, head, x, n_samples: int, seed: int = 0, field=None, alpha=0.0):
    """Monte Carlo mean and standard error of the (optionally transported) model."""
    kind = FeatureKind.parse(kind)
    x = as_vector(x, "x")
    rng = np.random.default_rng(seed)
    P = rho.sample(n_samples, rng)
    if field is not None and alpha != 0:
        P = P + alpha * field(P)
    vals = _activate(kind, P @ x)[:, None] * head(P)
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / np.sqrt(n_samples)


@dataclass(frozen=True, eq=False)
class TransportInstance:
    name: str
    rho: GaussianDensity
    field: VectorField
    head: HeadMap
    x: np.ndarray


def canonical_instances() -> list[TransportInstance]:
    """The 8 {constant, linear} field x {constant, tanh-linear} head x S in {1, 2} cases."""
    setups = {
        1: dict(
            rho=GaussianDensity([0.3], 0.8),
            fields={"constant": VectorField.constant([0.7]), "linear": VectorField.linear([[0.5]], [0.2])},
            heads={"constant": HeadMap.constant([1.0, -0.5]), "tanh_linear": HeadMap.tanh_linear([[1.2], [-0.4]])},
            x=np.array([0.9]),
        ),
        2: dict(
            rho=GaussianDensity([0.3, -0.2], 0.8),
            fields={
                "constant": VectorField.constant([0.7, -0.4]),
                "linear": VectorField.linear([[0.5, 0.3], [-0.2, 0.4]], [0.2, 0.1]),
            },
            heads={
                "constant": HeadMap.constant([1.0, -0.5]),
                "tanh_linear": HeadMap.tanh_linear([[1.2, -0.5], [0.3, 0.8]]),
            },
            x=np.array([0.9, -0.6]),
        ),
    }
    out = []
    for S, cfg in setups.items():
        for fname, field in cfg["fields"].items():
            for hname, head in cfg["heads"].items():
                out.append(TransportInstance(f"S{S}-{fname}-{hname}", cfg["rho"], field, head, cfg["x"]))
    return out


def loglog_slope(alphas, errors) -> float:
    return float(np.polyfit(np.log(alphas), np.log(errors), 1)[0])


def alpha_sweep(instance: TransportInstance, alphas, grid: QuadratureGrid | None = None) -> dict:
    """Equivalence error at each alpha, the fitted order and the mass check."""
    grid = grid or QuadratureGrid(instance.rho.dim)
    errors = [
        equivalence_error(instance.rho, FeatureKind.TANH_DOT, instance.head, instance.field, instance.x, a, grid)
        for a in alphas
    ]
    mass = max(abs(reweighted_mass(instance.rho, instance.field, a, grid) - 1.0) for a in alphas)
    return {
        "instance": instance.name,
        "alphas": list(alphas),
        "errors": errors,
        "slope": loglog_slope(alphas, errors),
        "mass_error": mass,
    }
