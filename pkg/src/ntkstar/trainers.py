"""Dual (kernel) trainers and the explicit finite-width models they must match.

The kernel machines keep one gradient ``gamma_i`` and one coefficient vector
``c_i`` per training step and predict with

    f(x) = -alpha * sum_i Theta(x, x_i) * gamma_i * c_i

where ``c_i = 1`` under SGD. Under ADAM* the coefficients fold in momentum,
bias correction and the shared second-moment normaliser; they are maintained
incrementally so each step costs O(t).

Step sizes of the kernel machine are width-free. Since ``vhat = H * v``, the
ADAM* normaliser of an explicit width-H model is ``sqrt(H)`` times smaller
than the kernel's, so an explicit ADAM* model with step ``alpha`` and guard
``epsilon`` equals the kernel machine run with ``alpha * sqrt(H)`` and
``epsilon * sqrt(H)`` (see :func:`kernel_config_for_width`). Equivalently,
``width_scaled=True`` trains the explicit model with ``alpha/sqrt(H)`` so that
it matches a kernel machine with the same config.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import (
    SQUARED_ERROR,
    Dataset,
    DimensionError,
    DivergenceError,
    Example,
    LossSpec,
    TrainConfig,
    as_vector,
    loss_grad,
)
from .features import FeatureEnsemble, _activate, _activate_grad, _preactivation, feature_matrix
from .kernel import GramMatrix, KernelSpec, gram, kernel_matrix


class KernelMode(enum.Enum):
    SGD = "sgd"
    ADAM_STAR = "adamstar"


class OptimizerKind(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"
    ADAM_STAR = "adamstar"

    @classmethod
    def parse(cls, value) -> "OptimizerKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if value in (kind.value, kind.name):
                return kind
        raise ValueError(f"unknown optimizer {value!r}")


def _parse_mode(value) -> KernelMode:
    if isinstance(value, KernelMode):
        return value
    for mode in KernelMode:
        if value in (mode.value, mode.name):
            return mode
    raise ValueError(f"unknown kernel mode {value!r}")


# --------------------------------------------------------------------------
# Optimizers on explicit parameter matrices


@dataclass
class OptimizerState:
    kind: OptimizerKind
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, kind, shape: tuple[int, int]) -> "OptimizerState":
        kind = OptimizerKind.parse(kind)
        H, E = shape
        v_shape = (E,) if kind is OptimizerKind.ADAM_STAR else (H, E)
        if kind is OptimizerKind.SGD:
            return cls(kind, np.zeros((0, 0)), np.zeros((0,)))
        return cls(kind, np.zeros((H, E)), np.zeros(v_shape))


def _check_grad(state: OptimizerState, grad) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 2:
        raise DimensionError(f"gradient must be 2-D, got shape {grad.shape}")
    if state.kind is not OptimizerKind.SGD and grad.shape != state.m.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match state {state.m.shape}")
    return grad


def sgd_update(state: OptimizerState, grad, alpha: float) -> np.ndarray:
    if state.kind is not OptimizerKind.SGD:
        raise ValueError("sgd_update needs an SGD state")
    grad = _check_grad(state, grad)
    state.step += 1
    return -alpha * grad


def _adam_family(state, grad, config, alpha, epsilon, second_moment):
    t = state.step + 1
    a = config.alpha if alpha is None else alpha
    eps = config.epsilon if epsilon is None else epsilon
    b1, b2 = config.beta1, config.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * second_moment
    state.step = t
    m_hat = state.m / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b2**t)
    return -a * m_hat / (np.sqrt(v_hat) + eps)


def adam_update(
    state: OptimizerState,
    grad,
    config: TrainConfig,
    alpha: float | None = None,
    epsilon: float | None = None,
) -> np.ndarray:
    """Bias-corrected ADAM step; ``alpha``/``epsilon`` override the config."""
    if state.kind is not OptimizerKind.ADAM:
        raise ValueError("adam_update needs an ADAM state")
    grad = _check_grad(state, grad)
    return _adam_family(state, grad, config, alpha, epsilon, grad**2)


def adamstar_update(
    state: OptimizerState,
    grad,
    config: TrainConfig,
    alpha: float | None = None,
    epsilon: float | None = None,
) -> np.ndarray:
    """ADAM with the second moment averaged over the width axis.

    ``v`` is a length-E vector and the denominator broadcasts across rows.
    """
    if state.kind is not OptimizerKind.ADAM_STAR:
        raise ValueError("adamstar_update needs an ADAM* state")
    grad = _check_grad(state, grad)
    return _adam_family(state, grad, config, alpha, epsilon, np.mean(grad**2, axis=0))


def apply_update(state: OptimizerState, grad, config: TrainConfig, alpha=None, epsilon=None):
    if state.kind is OptimizerKind.SGD:
        return sgd_update(state, grad, config.alpha if alpha is None else alpha)
    if state.kind is OptimizerKind.ADAM:
        return adam_update(state, grad, config, alpha, epsilon)
    return adamstar_update(state, grad, config, alpha, epsilon)


def _width_step(kind: OptimizerKind, config: TrainConfig, width: int, width_scaled: bool):
    if kind is OptimizerKind.SGD or not width_scaled:
        return config.alpha, config.epsilon
    r = np.sqrt(width)
    return config.alpha / r, config.epsilon / r


def kernel_config_for_width(config: TrainConfig, width: int, mode=KernelMode.ADAM_STAR) -> TrainConfig:
    """Kernel-machine config reproducing an explicit width-``width`` model.

    SGD needs no change; ADAM* scales ``alpha`` and ``epsilon`` by ``sqrt(width)``.
    """
    if _parse_mode(mode) is KernelMode.SGD:
        return config
    r = float(np.sqrt(width))
    return replace(config, alpha=config.alpha * r, epsilon=config.epsilon * r)


# --------------------------------------------------------------------------
# Explicit frozen-feature model


@dataclass
class FiniteModel:
    """``f(x) = (1/sqrt(H)) * g(x) @ M`` over a frozen ensemble."""

    ensemble: FeatureEnsemble
    M: np.ndarray
    state: OptimizerState | None = None
    v_history: list = field(default_factory=list)

    @classmethod
    def zeros(cls, ensemble: FeatureEnsemble, output_dim: int) -> "FiniteModel":
        return cls(ensemble, np.zeros((ensemble.width, output_dim)))

    @property
    def width(self) -> int:
        return self.ensemble.width

    @property
    def head(self) -> np.ndarray:
        """Rescaled head ``sqrt(H) * M``."""
        return np.sqrt(self.width) * self.M

    def predict(self, X) -> np.ndarray:
        return feature_matrix(self.ensemble, X) @ self.M / np.sqrt(self.width)


def train_finite_frozen(
    ensemble: FeatureEnsemble,
    dataset: Dataset,
    loss: LossSpec = SQUARED_ERROR,
    optimizer_kind=OptimizerKind.SGD,
    config: TrainConfig = TrainConfig(),
    *,
    width_scaled: bool = False,
    record_v: bool = False,
    on_step: Callable[[int, FiniteModel], None] | None = None,
) -> FiniteModel:
    """Online training of the last layer only, one example per step."""
    kind = OptimizerKind.parse(optimizer_kind)
    if dataset.input_dim != ensemble.dim:
        raise DimensionError("dataset and ensemble dimensions differ")
    H, E = ensemble.width, dataset.output_dim
    model = FiniteModel.zeros(ensemble, E)
    model.state = OptimizerState.zeros(kind, (H, E))
    alpha, eps = _width_step(kind, config, H, width_scaled)
    Phi = feature_matrix(ensemble, dataset)
    root_h = np.sqrt(H)
    for t in range(1, config.steps + 1):
        n = dataset.step_index(t)
        phi = Phi[n]
        f = phi @ model.M / root_h
        gamma = loss_grad(loss, f, dataset.Y[n])
        J = np.outer(phi, gamma) / root_h
        model.M = model.M + apply_update(model.state, J, config, alpha, eps)
        if not np.all(np.isfinite(model.M)):
            raise DivergenceError(t, "last-layer weight")
        if record_v and kind is OptimizerKind.ADAM_STAR:
            model.v_history.append(model.state.v.copy())
        if on_step is not None:
            on_step(t, model)
    return model


# --------------------------------------------------------------------------
# Kernel machines


class KernelMachine:
    """Dual representation of a zero-initialised frozen-feature model.

    Inputs seen during training form a support set; kernel values among
    support points are computed once and reused by every later step.
    """

    def __init__(
        self,
        spec: KernelSpec,
        config: TrainConfig,
        mode=KernelMode.SGD,
        loss: LossSpec = SQUARED_ERROR,
        output_dim: int | None = None,
    ):
        self.spec = spec
        self.config = config
        self.mode = _parse_mode(mode)
        self.loss = loss
        self.step = 0
        self._E = output_dim
        self._cap = 0
        self._G = np.zeros((0, 0))
        self._C = np.zeros((0, 0))
        self._D = np.zeros((0, 0))
        self._V = np.zeros((0, 0))
        self._idx = np.zeros(0, dtype=np.intp)
        self.vhat = np.zeros(0 if output_dim is None else output_dim)
        self._SX = np.zeros((0, 0))
        self._K = np.zeros((0, 0))
        self._keys: dict[bytes, int] = {}

    # support bookkeeping ---------------------------------------------------

    @property
    def support(self) -> np.ndarray:
        return self._SX

    def prime(self, dataset: Dataset, gram_matrix: GramMatrix | None = None) -> "KernelMachine":
        """Register a dataset's inputs with a precomputed Gram matrix."""
        if self._keys:
            raise RuntimeError("prime() must be called on an empty support set")
        if gram_matrix is None:
            gram_matrix = gram(self.spec, dataset)
        if gram_matrix.dataset_fingerprint != dataset.fingerprint:
            raise ValueError("Gram matrix was computed for a different dataset")
        n = len(dataset)
        self._SX = np.array(dataset.X)
        self._K = np.array(gram_matrix.values)
        for i in range(n):
            # duplicate inputs map to the first occurrence
            self._keys.setdefault(dataset.X[i].tobytes(), i)
        return self

    def _support_index(self, x: np.ndarray) -> int:
        key = x.tobytes()
        j = self._keys.get(key)
        if j is not None:
            return j
        n = self._SX.shape[0]
        if n and x.size != self._SX.shape[1]:
            raise DimensionError(f"input has length {x.size}, expected {self._SX.shape[1]}")
        SX = np.vstack([self._SX.reshape(n, x.size), x[None, :]])
        row = kernel_matrix(self.spec, x[None, :], SX)[0]
        K = np.empty((n + 1, n + 1))
        K[:n, :n] = self._K
        K[n, :] = row
        K[:, n] = row
        self._SX, self._K = SX, K
        self._keys[key] = n
        return n

    def _grow(self, E: int):
        if self._E is None:
            self._E = E
            self.vhat = np.zeros(E)
        elif E != self._E:
            raise DimensionError(f"target has length {E}, machine has {self._E}")
        if self.step < self._cap:
            return
        cap = max(16, 2 * self._cap)
        for name in ("_G", "_C", "_D", "_V"):
            old = getattr(self, name)
            new = np.zeros((cap, E))
            if self.step:
                new[: self.step] = old[: self.step]
            setattr(self, name, new)
        idx = np.zeros(cap, dtype=np.intp)
        idx[: self.step] = self._idx[: self.step]
        self._idx = idx
        self._cap = cap

    # stored sequences --------------------------------------------------------

    @property
    def gradients(self) -> np.ndarray:
        return self._G[: self.step]

    @property
    def coeffs(self) -> np.ndarray:
        return self._C[: self.step]

    @property
    def vhat_history(self) -> np.ndarray:
        return self._V[: self.step]

    @property
    def support_indices(self) -> np.ndarray:
        return self._idx[: self.step]

    def dual_weights(self) -> np.ndarray:
        """``sum_i gamma_i * c_i`` aggregated per support point."""
        W = np.zeros((self._SX.shape[0], self._E or 0))
        np.add.at(W, self.support_indices, self.gradients * self.coeffs)
        return W

    # training ----------------------------------------------------------------

    def partial_fit(self, x, y) -> "KernelMachine":
        x = as_vector(x, "x")
        y = as_vector(y, "y")
        if self.spec.dim is not None and x.size != self.spec.dim:
            raise DimensionError(f"input has length {x.size}, kernel expects {self.spec.dim}")
        self._grow(y.size)
        j = self._support_index(x)
        t = self.step + 1
        prev = self._idx[: t - 1]
        k = self._K[j, prev]
        a = self.config.alpha
        f = -a * (k @ (self._G[: t - 1] * self._C[: t - 1]))
        gamma = loss_grad(self.loss, f, y)
        if not np.all(np.isfinite(gamma)):
            raise DivergenceError(t, "gradient")
        self._G[t - 1] = gamma
        self._idx[t - 1] = j
        if self.mode is KernelMode.SGD:
            self._C[t - 1] = 1.0
        else:
            b1, b2, eps = self.config.beta1, self.config.beta2, self.config.epsilon
            self.vhat = b2 * self.vhat + (1.0 - b2) * self._K[j, j] * gamma**2
            d = 1.0 / (np.sqrt(self.vhat / (1.0 - b2**t)) + eps)
            if not np.all(np.isfinite(d)):
                raise DivergenceError(t, "normaliser")
            self._V[t - 1] = self.vhat
            self._D[t - 1] = d
            self._C[t - 1] = 0.0
            decay = b1 ** np.arange(t - 1, -1, -1, dtype=np.float64)
            self._C[:t] += (decay * ((1.0 - b1) / (1.0 - b1**t)))[:, None] * d[None, :]
        self.step = t
        return self

    def fit(self, dataset: Dataset, steps: int | None = None, on_step=None) -> "KernelMachine":
        if not self._keys:
            self.prime(dataset)
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            t = self.step + 1
            n = dataset.step_index(t)
            self.partial_fit(dataset.X[n], dataset.Y[n])
            if on_step is not None:
                on_step(t, self)
        return self

    def predict(self, X, K: np.ndarray | None = None) -> np.ndarray:
        """Predictions for the rows of ``X``.

        ``K`` may supply the cross-kernel against :attr:`support`.
        """
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if self.step == 0:
            E = self._E or 1
            out = np.zeros((X.shape[0], E))
        else:
            if K is None:
                K = kernel_matrix(self.spec, X, self.support)
            out = -self.config.alpha * (K @ self.dual_weights())
        return out[0] if single else out

    def predict_train(self) -> np.ndarray:
        """Predictions at every support point, using only cached kernel values."""
        if self.step == 0:
            return np.zeros((self._SX.shape[0], self._E or 1))
        return -self.config.alpha * (self._K @ self.dual_weights())


def kernel_machine_step(machine: KernelMachine, example: Example, loss: LossSpec | None = None):
    if loss is not None:
        machine.loss = loss
    return machine.partial_fit(example.x, example.y)


def kernel_machine_predict(machine: KernelMachine, x) -> np.ndarray:
    return machine.predict(x)


def adamstar_coefficients(vhat_history, config: TrainConfig) -> np.ndarray:
    """Direct double-sum form of the ADAM* coefficients from stored ``vhat``.

    ``c_i = sum_{j=i..t} b1^(j-i) (1-b1)/(1-b1^j) / (sqrt(vhat_j/(1-b2^j)) + eps)``
    """
    V = np.asarray(vhat_history, dtype=np.float64)
    t = V.shape[0]
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    j = np.arange(1, t + 1, dtype=np.float64)
    d = 1.0 / (np.sqrt(V / (1.0 - b2**j)[:, None]) + eps)
    C = np.zeros_like(V)
    for i in range(t):
        for jj in range(i, t):
            C[i] += b1 ** (jj - i) * (1.0 - b1) / (1.0 - b1 ** (jj + 1)) * d[jj]
    return C


# --------------------------------------------------------------------------
# Unfrozen two-layer baseline


@dataclass
class TwoLayerModel:
    """``f(x) = (1/sqrt(H)) * sum_h act(W_h . x) M_h`` with both layers trainable."""

    W: np.ndarray
    M: np.ndarray
    kind: object

    @property
    def width(self) -> int:
        return self.W.shape[0]

    def _ensemble(self) -> FeatureEnsemble:
        return FeatureEnsemble(self.W, self.kind)

    def predict(self, X) -> np.ndarray:
        return feature_matrix(self._ensemble(), X) @ self.M / np.sqrt(self.width)

    def gradients(self, X, Y, loss: LossSpec = SQUARED_ERROR):
        """Gradients of the summed loss over the rows of ``X`` w.r.t. ``(W, M)``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        root_h = np.sqrt(self.width)
        Z = _preactivation(X, self.W)
        A = _activate(self._ensemble().kind, Z)
        F = A @ self.M / root_h
        Gam = np.stack([loss_grad(loss, f, y) for f, y in zip(F, Y)])
        dM = A.T @ Gam / root_h
        back = (Gam @ self.M.T) * _activate_grad(self._ensemble().kind, Z) / root_h
        dW = back.T @ X
        return dW, dM


def train_finite_mlp_full(
    ensemble: FeatureEnsemble,
    dataset: Dataset,
    loss: LossSpec = SQUARED_ERROR,
    optimizer_kind=OptimizerKind.ADAM,
    config: TrainConfig = TrainConfig(),
    *,
    first_layer_lr: float = 1.0,
    width_scaled: bool = False,
    on_step: Callable[[int, TwoLayerModel], None] | None = None,
) -> TwoLayerModel:
    """Online training of both layers; ``ensemble`` gives the initial first layer.

    The last layer follows the same step rule as :func:`train_finite_frozen`.
    The first layer uses step ``alpha * first_layer_lr`` with no width scaling.
    """
    kind = OptimizerKind.parse(optimizer_kind)
    if dataset.input_dim != ensemble.dim:
        raise DimensionError("dataset and ensemble dimensions differ")
    H, E, D = ensemble.width, dataset.output_dim, dataset.input_dim
    model = TwoLayerModel(np.array(ensemble.omegas), np.zeros((H, E)), ensemble.kind)
    state_m = OptimizerState.zeros(kind, (H, E))
    state_w = OptimizerState.zeros(kind, (H, D))
    alpha, eps = _width_step(kind, config, H, width_scaled)
    root_h = np.sqrt(H)
    train_first = first_layer_lr != 0
    for t in range(1, config.steps + 1):
        n = dataset.step_index(t)
        x = dataset.X[n]
        z = _preactivation(x[None, :], model.W)[0]
        phi = _activate(model.kind, z)
        f = phi @ model.M / root_h
        gamma = loss_grad(loss, f, dataset.Y[n])
        J = np.outer(phi, gamma) / root_h
        if train_first:
            back = (model.M @ gamma) * _activate_grad(model.kind, z) / root_h
            JW = np.outer(back, x)
        model.M = model.M + apply_update(state_m, J, config, alpha, eps)
        if train_first:
            model.W = model.W + apply_update(
                state_w, JW, config, config.alpha * first_layer_lr, config.epsilon
            )
        if not (np.all(np.isfinite(model.M)) and np.all(np.isfinite(model.W))):
            raise DivergenceError(t, "weight")
        if on_step is not None:
            on_step(t, model)
    return model
