"""scikit-learn compatible wrappers around the trainers.

All estimators train online with batch size one, cycling through the rows of
``X`` in order for ``n_steps`` steps (one pass when ``n_steps`` is None).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import SQUARED_ERROR, Dataset, TrainConfig
from .features import FeatureKind, OmegaSampler, sample_ensemble
from .kernel import KernelSpec
from .trainers import (
    KernelMachine,
    OptimizerKind,
    train_finite_frozen,
    train_finite_mlp_full,
)

_DEFAULT_ALPHA = {"sgd": 1e-1, "adam": 1e-3, "adamstar": 1e-3}


class _OnlineRegressor(RegressorMixin, BaseEstimator):
    def _config(self, n_rows, optimizer):
        alpha = self.learning_rate
        if alpha is None:
            alpha = _DEFAULT_ALPHA[OptimizerKind.parse(optimizer).value]
        return TrainConfig(
            alpha=alpha,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            steps=n_rows if self.n_steps is None else self.n_steps,
            seed=self.random_state,
        )

    def _dataset(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        self._y_1d = y.ndim == 1
        self.n_features_in_ = X.shape[1]
        return Dataset(X, y.reshape(len(y), -1))

    def _ensemble(self, dim):
        sampler = OmegaSampler(dim=dim, seed=int(self.random_state))
        return sample_ensemble(sampler, self.feature_kind, self.n_features)

    def _out(self, F):
        return F.ravel() if self._y_1d else F

    def _check_predict(self, X, attr):
        check_is_fitted(self, attr)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but {type(self).__name__} "
                f"is expecting {self.n_features_in_} features as input"
            )
        return X

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        return tags


class FrozenFeatureRegressor(_OnlineRegressor):
    """Two-layer network whose first layer stays at its random initialisation.

    Parameters
    ----------
    n_features : int, default=256
    feature_kind : {"relu", "tanh"}, default="relu"
    optimizer : {"sgd", "adam", "adamstar"}, default="sgd"
    learning_rate : float or None
        Defaults to 0.1 for SGD and 1e-3 for the Adam family.
    width_scaled : bool, default=False
        Use step ``learning_rate/sqrt(H)`` for Adam-family optimizers, which
        makes ADAM* training match :class:`NTKRegressor` with the same rate.
    """

    def __init__(
        self,
        n_features=256,
        feature_kind="relu",
        optimizer="sgd",
        learning_rate=None,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        n_steps=None,
        random_state=0,
        width_scaled=False,
    ):
        self.n_features = n_features
        self.feature_kind = feature_kind
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.n_steps = n_steps
        self.random_state = random_state
        self.width_scaled = width_scaled

    def fit(self, X, y):
        data = self._dataset(X, y)
        config = self._config(len(data), self.optimizer)
        self.model_ = train_finite_frozen(
            self._ensemble(data.input_dim),
            data,
            SQUARED_ERROR,
            self.optimizer,
            config,
            width_scaled=self.width_scaled,
        )
        return self

    def predict(self, X):
        X = self._check_predict(X, "model_")
        return self._out(self.model_.predict(X))


class NTKRegressor(_OnlineRegressor):
    """Kernel machine following SGD or ADAM* dynamics of a frozen-feature model.

    Parameters
    ----------
    kernel : {"empirical", "analytic"}, default="analytic"
        ``"analytic"`` is the infinite-width ReLU kernel; ``"empirical"``
        averages over ``n_features`` sampled features.
    mode : {"sgd", "adamstar"}, default="adamstar"
    """

    def __init__(
        self,
        kernel="analytic",
        mode="adamstar",
        n_features=256,
        feature_kind="relu",
        learning_rate=None,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        n_steps=None,
        random_state=0,
    ):
        self.kernel = kernel
        self.mode = mode
        self.n_features = n_features
        self.feature_kind = feature_kind
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.n_steps = n_steps
        self.random_state = random_state

    def _spec(self, dim):
        if self.kernel == "empirical":
            return KernelSpec.empirical(self._ensemble(dim))
        if self.kernel == "analytic":
            if FeatureKind.parse(self.feature_kind) is not FeatureKind.RELU_DOT:
                raise ValueError("the analytic kernel exists for ReLU features only")
            return KernelSpec.analytic_relu()
        raise ValueError(f"unknown kernel {self.kernel!r}")

    def fit(self, X, y):
        data = self._dataset(X, y)
        config = self._config(len(data), self.mode)
        self.machine_ = KernelMachine(self._spec(data.input_dim), config, self.mode, SQUARED_ERROR)
        self.machine_.fit(data)
        return self

    def predict(self, X):
        X = self._check_predict(X, "machine_")
        return self._out(self.machine_.predict(X))


class TwoLayerMLPRegressor(_OnlineRegressor):
    """Fully trainable two-layer network, the unfrozen baseline."""

    def __init__(
        self,
        n_features=256,
        feature_kind="relu",
        optimizer="adam",
        learning_rate=None,
        first_layer_lr=1.0,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        n_steps=None,
        random_state=0,
        width_scaled=False,
    ):
        self.n_features = n_features
        self.feature_kind = feature_kind
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.first_layer_lr = first_layer_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.n_steps = n_steps
        self.random_state = random_state
        self.width_scaled = width_scaled

    def fit(self, X, y):
        data = self._dataset(X, y)
        config = self._config(len(data), self.optimizer)
        self.model_ = train_finite_mlp_full(
            self._ensemble(data.input_dim),
            data,
            SQUARED_ERROR,
            self.optimizer,
            config,
            first_layer_lr=self.first_layer_lr,
            width_scaled=self.width_scaled,
        )
        return self

    def predict(self, X):
        X = self._check_predict(X, "model_")
        return self._out(self.model_.predict(X))
