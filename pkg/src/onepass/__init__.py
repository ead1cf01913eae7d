"""Single-pass predictive uncertainty for dropout-trained convolutional networks.

Closed-form moment propagation pushes a Gaussian over the input through a
dropout network in one pass. The logit mean and variance it produces yield
class probabilities and a predictive entropy. Monte Carlo dropout and the
deterministic network serve as baselines, and exact oracles back the tests.
"""

from .data import (
    DataFormatError,
    DatasetBatch,
    SyntheticData,
    TrainConfig,
    deep_fixture,
    gen_synthetic,
    load_csv,
    save_csv,
    train_fixture_head,
)
from .estimator import DropoutUncertaintyClassifier
from .gaussian import GaussianTensor, from_deterministic, from_input_with_prior
from .layers import Conv2DLayer, DenseLayer, Flatten, ReLU, conv_moments, dense_moments, relu_moments
from .metrics import MetricsReport, accuracy_f1, evaluate, nll_categorical, nll_gaussian
from .network import (
    ModelError,
    ModelSpec,
    RngStream,
    forward_deterministic,
    forward_mc_dropout,
    forward_moments,
    load_model,
    save_model,
    validate_model,
)
from .tensor import NonFiniteError, ShapeError
from .uncertainty import Prediction, predict, predictive_entropy

__version__ = "0.1.0"

__all__ = [
    "Conv2DLayer",
    "DataFormatError",
    "DatasetBatch",
    "DenseLayer",
    "DropoutUncertaintyClassifier",
    "Flatten",
    "GaussianTensor",
    "MetricsReport",
    "ModelError",
    "ModelSpec",
    "NonFiniteError",
    "Prediction",
    "ReLU",
    "RngStream",
    "ShapeError",
    "SyntheticData",
    "TrainConfig",
    "accuracy_f1",
    "conv_moments",
    "deep_fixture",
    "dense_moments",
    "evaluate",
    "forward_deterministic",
    "forward_mc_dropout",
    "forward_moments",
    "from_deterministic",
    "from_input_with_prior",
    "gen_synthetic",
    "load_csv",
    "load_model",
    "nll_categorical",
    "nll_gaussian",
    "predict",
    "predictive_entropy",
    "relu_moments",
    "save_csv",
    "save_model",
    "train_fixture_head",
    "validate_model",
]
