"""Frozen random feature submodels ``g_w(x)`` and their parameter ensembles."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import Dataset, DimensionError, InvalidWidthError, as_vector

# Rows are drawn in blocks keyed by (seed, dim, block); widening an ensemble
# keeps every previously drawn row.
_BLOCK_ROWS = 256
_SERIAL_MAGIC = b"NTKENS1\n"


class FeatureKind(enum.Enum):
    RELU_DOT = "relu"
    TANH_DOT = "tanh"

    @classmethod
    def parse(cls, value) -> "FeatureKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if value in (kind.value, kind.name):
                return kind
        raise ValueError(f"unknown feature kind {value!r}")


class SamplerKind(enum.Enum):
    STANDARD_GAUSSIAN = "standard_gaussian"


@dataclass(frozen=True)
class OmegaSampler:
    dim: int
    seed: int = 0
    kind: SamplerKind = SamplerKind.STANDARD_GAUSSIAN

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError("sampler dimension must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def _block(self, b: int) -> np.ndarray:
        ss = np.random.SeedSequence([self.seed, self.dim, b])
        return np.random.default_rng(ss).standard_normal((_BLOCK_ROWS, self.dim))

    def rows(self, start: int, stop: int) -> np.ndarray:
        """Parameter vectors ``start .. stop - 1`` of the infinite sequence."""
        if stop <= start:
            return np.empty((0, self.dim))
        first, last = start // _BLOCK_ROWS, (stop - 1) // _BLOCK_ROWS
        out = np.concatenate([self._block(b) for b in range(first, last + 1)])
        off = first * _BLOCK_ROWS
        return out[start - off : stop - off]

    def bulk(self, n: int, stream: int = 0) -> np.ndarray:
        """Fresh i.i.d. draws from a stream separate from the ensemble rows."""
        ss = np.random.SeedSequence([self.seed, self.dim, 2**32 + stream])
        return np.random.default_rng(ss).standard_normal((n, self.dim))


@dataclass(frozen=True, eq=False)
class FeatureEnsemble:
    """``H`` frozen parameter vectors plus the feature function they feed."""

    omegas: np.ndarray
    kind: FeatureKind
    _fingerprint: str = field(default="", init=False, repr=False)

    def __post_init__(self):
        W = np.array(self.omegas, dtype=np.float64, order="C")
        if W.ndim != 2 or W.shape[0] < 1:
            raise InvalidWidthError("ensemble needs at least one row")
        W.setflags(write=False)
        object.__setattr__(self, "omegas", W)
        object.__setattr__(self, "kind", FeatureKind.parse(self.kind))
        object.__setattr__(self, "_fingerprint", hashlib.sha256(self.to_bytes()).hexdigest())

    @property
    def width(self) -> int:
        return self.omegas.shape[0]

    @property
    def dim(self) -> int:
        return self.omegas.shape[1]

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    def to_bytes(self) -> bytes:
        """Magic line, ``"<kind> <S> <H>\\n"``, then row-major little-endian float64."""
        header = f"{self.kind.value} {self.dim} {self.width}\n".encode()
        return _SERIAL_MAGIC + header + self.omegas.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureEnsemble":
        if not blob.startswith(_SERIAL_MAGIC):
            raise ValueError("not a serialized feature ensemble")
        rest = blob[len(_SERIAL_MAGIC):]
        header, _, payload = rest.partition(b"\n")
        kind, S, H = header.decode().split()
        S, H = int(S), int(H)
        if len(payload) != 8 * S * H:
            raise ValueError("truncated ensemble payload")
        W = np.frombuffer(payload, dtype="<f8").reshape(H, S)
        return cls(W, FeatureKind.parse(kind))

    def prefix(self, width: int) -> "FeatureEnsemble":
        if not 1 <= width <= self.width:
            raise InvalidWidthError(f"prefix width {width} outside [1, {self.width}]")
        return FeatureEnsemble(self.omegas[:width], self.kind)


def sample_ensemble(sampler: OmegaSampler, kind, width: int) -> FeatureEnsemble:
    if int(width) != width or width < 1:
        raise InvalidWidthError(f"width must be a positive integer, got {width}")
    return FeatureEnsemble(sampler.rows(0, int(width)), FeatureKind.parse(kind))


def _activate(kind: FeatureKind, z):
    if kind is FeatureKind.RELU_DOT:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(kind: FeatureKind, z):
    # ReLU subgradient at 0 is taken as 0.
    if kind is FeatureKind.RELU_DOT:
        return (z > 0).astype(np.float64)
    return 1.0 - np.tanh(z) ** 2


def _preactivation(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    # Sequential accumulation over the input axis so that bulk and scalar
    # evaluation round identically.
    Z = X[:, 0, None] * W[None, :, 0]
    for d in range(1, X.shape[1]):
        Z = Z + X[:, d, None] * W[None, :, d]
    return Z


def eval_feature(kind, omega, x) -> float:
    kind = FeatureKind.parse(kind)
    omega = as_vector(omega, "omega")
    x = as_vector(x, "x")
    if omega.shape != x.shape:
        raise DimensionError(f"omega has length {omega.size}, x has {x.size}")
    z = omega[0] * x[0]
    for d in range(1, x.size):
        z = z + omega[d] * x[d]
    return float(_activate(kind, z))


def feature_matrix(ensemble: FeatureEnsemble, data) -> np.ndarray:
    """Raw feature values ``g_{w_h}(x_i)`` as an ``N x H`` matrix."""
    X = data.X if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != ensemble.dim:
        raise DimensionError(f"inputs have dimension {X.shape[1]}, ensemble expects {ensemble.dim}")
    return _activate(ensemble.kind, _preactivation(X, ensemble.omegas))


class RandomFeatureMap(TransformerMixin, BaseEstimator):
    """Frozen random feature map ``x -> [g_{w_1}(x), ..., g_{w_H}(x)]``.

    Parameters
    ----------
    n_features : int, default=256
        Ensemble width ``H``.
    feature_kind : {"relu", "tanh"}, default="relu"
    random_state : int, default=0
        Seed of the counter-based sampler. Ensembles drawn with the same seed
        share their leading rows across widths.
    scale : bool, default=False
        Multiply the output by ``1/sqrt(H)`` so that ``Z @ Z.T`` is the
        empirical kernel Gram matrix.
    """

    def __init__(self, n_features=256, feature_kind="relu", random_state=0, scale=False):
        self.n_features = n_features
        self.feature_kind = feature_kind
        self.random_state = random_state
        self.scale = scale

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        sampler = OmegaSampler(dim=X.shape[1], seed=int(self.random_state))
        self.ensemble_ = sample_ensemble(sampler, self.feature_kind, self.n_features)
        return self

    def transform(self, X):
        check_is_fitted(self, "ensemble_")
        X = check_array(X, dtype=np.float64)
        Z = feature_matrix(self.ensemble_, X)
        if self.scale:
            Z = Z / np.sqrt(self.ensemble_.width)
        return Z
