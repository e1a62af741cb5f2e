"""Frozen-feature kernel machines with SGD and ADAM* dynamics."""

from .core import (
    SQUARED_ERROR,
    Dataset,
    DimensionError,
    DivergenceError,
    Example,
    InvalidSampleCountError,
    InvalidWidthError,
    LossKind,
    LossSpec,
    TrainConfig,
    loss_grad,
    loss_value,
    mean_loss,
)
from .estimators import FrozenFeatureRegressor, NTKRegressor, TwoLayerMLPRegressor
from .features import (
    FeatureEnsemble,
    FeatureKind,
    OmegaSampler,
    RandomFeatureMap,
    eval_feature,
    feature_matrix,
    sample_ensemble,
)
from .kernel import (
    GramCache,
    GramMatrix,
    KernelSpec,
    KernelVariant,
    expectation_identity_check,
    gram,
    kernel_eval,
    kernel_matrix,
    mc_kernel_estimate,
)
from .trainers import (
    FiniteModel,
    KernelMachine,
    KernelMode,
    OptimizerKind,
    OptimizerState,
    TwoLayerModel,
    adam_update,
    adamstar_coefficients,
    adamstar_update,
    kernel_config_for_width,
    kernel_machine_predict,
    kernel_machine_step,
    sgd_update,
    train_finite_frozen,
    train_finite_mlp_full,
)

__version__ = "0.1.0"
