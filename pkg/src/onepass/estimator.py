"""scikit-learn compatible classifier wrapping the three inference methods."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data import DatasetBatch, TrainConfig, channel_std, random_conv_stack, train_fixture_head
from .network import (
    ModelSpec,
    RngStream,
    forward_deterministic,
    forward_mc_dropout,
    forward_moments,
)
from .uncertainty import (
    DEFAULT_SAMPLES,
    predict,
    predict_from_logit_samples,
    prediction_from_probs,
    softmax,
)

METHODS = ("moments", "deterministic", "mcdrop")


def check_inputs(X, input_shape=None):
    """Validate a batch of (H, W, C) samples and return a float64 (n, H, W, C) array.

    Flat rows ``(n, H*W*C)`` are reshaped when ``input_shape`` is known.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if input_shape is not None:
        input_shape = tuple(input_shape)
        if X.ndim == 2 and X.shape[1] == int(np.prod(input_shape)):
            X = X.reshape((X.shape[0],) + input_shape)
        elif X.shape[1:] != input_shape:
            raise ValueError(f"expected samples of shape {input_shape}, got {X.shape[1:]}")
    elif X.ndim != 4:
        raise ValueError(f"expected a 4-d array (n, H, W, C), got {X.ndim}-d")
    return X


def predict_one(model, x, prior_sigma, method="moments", n_samples=DEFAULT_SAMPLES,
                n_passes=30, rng=None, mc_chunk=4096):
    """Prediction for a single sample with the chosen inference method."""
    if method == "moments":
        return predict(forward_moments(model, x, prior_sigma), n_samples, rng)
    if method == "deterministic":
        return prediction_from_probs(softmax(forward_deterministic(model, x)))
    if method == "mcdrop":
        logits = forward_mc_dropout(model, x, n_passes, rng, prior_sigma, chunk=mc_chunk)
        return predict_from_logit_samples(logits)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


class DropoutUncertaintyClassifier(ClassifierMixin, BaseEstimator):
    """Dropout-trained CNN classifier with single-pass predictive uncertainty.

    ``fit`` draws a frozen random convolutional stack and trains the dense
    output layer under dropout; passing a prebuilt ``model`` skips training.
    At prediction time ``method`` selects moment propagation (one pass),
    the deterministic network, or ``n_passes`` Monte Carlo dropout passes.

    Parameters
    ----------
    filters : tuple of int
        Filter count of each conv layer.
    kernel_size : int
    keep_prob : float
        Dropout keep probability of every conv and dense layer.
    input_keep_prob : float
        Keep probability on the raw input (first conv layer).
    method : {"moments", "deterministic", "mcdrop"}
    n_samples : int
        Logit samples drawn for the softmax average in ``"moments"`` mode.
    n_passes : int
        Stochastic passes in ``"mcdrop"`` mode.
    learning_rate, batch_size, epochs :
        SGD settings for the dense head.
    model : ModelSpec, optional
        Pretrained network; its shapes must match the data.
    prior_sigma : array-like, optional
        Per-channel input std; computed from the training data when omitted.
    random_state : int
    """

    def __init__(self, filters=(8, 8, 8, 8), kernel_size=3, keep_prob=0.5, input_keep_prob=1.0,
                 method="moments", n_samples=DEFAULT_SAMPLES, n_passes=30, learning_rate=0.02,
                 batch_size=64, epochs=150, model=None, prior_sigma=None, random_state=0):
        self.filters = filters
        self.kernel_size = kernel_size
        self.keep_prob = keep_prob
        self.input_keep_prob = input_keep_prob
        self.method = method
        self.n_samples = n_samples
        self.n_passes = n_passes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.model = model
        self.prior_sigma = prior_sigma
        self.random_state = random_state

    def fit(self, X, y):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        input_shape = self.model.input_shape if self.model is not None else None
        X = check_inputs(X, input_shape)
        y = np.asarray(y)
        check_classification_targets(y)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} samples but {y.shape[0]} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.prior_sigma_ = (
            channel_std(X) if self.prior_sigma is None
            else np.asarray(self.prior_sigma, dtype=np.float64)
        )
        if self.model is not None:
            if self.model.class_count != self.classes_.shape[0]:
                raise ValueError(
                    f"model has {self.model.class_count} classes, data has {self.classes_.shape[0]}"
                )
            self.model_ = self.model
            self.loss_curve_ = []
            return self
        seed = 0 if self.random_state is None else int(self.random_state)
        stack = random_conv_stack(
            X.shape[1:], tuple(self.filters), self.kernel_size, self.keep_prob,
            input_keep_prob=self.input_keep_prob, rng=RngStream(seed, 1),
        )
        cfg = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            keep_prob=self.keep_prob, epochs=self.epochs, seed=seed,
        )
        batch = DatasetBatch(X, encoded, self.prior_sigma_, self.classes_.shape[0])
        self.model_, self.loss_curve_ = train_fixture_head(
            stack, batch, cfg, rng=RngStream(seed, 2), class_count=self.classes_.shape[0]
        )
        return self

    def predict_uncertainty(self, X):
        """Per-sample :class:`Prediction` objects (probs, class, confidence, entropy)."""
        check_is_fitted(self, "model_")
        X = check_inputs(X, self.model_.input_shape)
        root = RngStream(0 if self.random_state is None else self.random_state, 3)
        return [
            predict_one(self.model_, x, self.prior_sigma_, self.method, self.n_samples,
                        self.n_passes, root.substream(i))
            for i, x in enumerate(X)
        ]

    def predict_proba(self, X):
        return np.array([p.probs for p in self.predict_uncertainty(X)])

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def predictive_entropy(self, X):
        return np.array([p.entropy for p in self.predict_uncertainty(X)])
