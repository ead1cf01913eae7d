"""Synthetic datasets with CSV ingestion, plus the fixture head trainer."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .layers import Conv2DLayer, DenseLayer, Flatten, ReLU, layer_deterministic, layer_sampled
from .network import ModelSpec, RngStream, as_rng, forward_deterministic
from .tensor import ShapeError
from .uncertainty import softmax

#: Label used for samples with no class (the out-of-distribution split).
UNLABELED = -1


class DataFormatError(ValueError):
    """Raised for malformed dataset files."""


def channel_std(inputs):
    """Per-channel population std over samples and spatial positions."""
    arr = np.asarray(inputs, dtype=np.float64)
    return arr.reshape(-1, arr.shape[-1]).std(axis=0)


@dataclass
class DatasetBatch:
    inputs: np.ndarray  # (n, H, W, C)
    labels: np.ndarray  # (n,) int, UNLABELED allowed
    prior_sigma: np.ndarray  # (C,)
    class_count: int = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.prior_sigma = np.asarray(self.prior_sigma, dtype=np.float64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if np.any(self.prior_sigma < 0):
            raise ValueError("prior_sigma must be non-negative")
        if self.class_count is not None and np.any(self.labels >= self.class_count):
            raise ValueError(f"labels must be < class_count={self.class_count}")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self):
        return self.inputs.shape[1:]


@dataclass
class SyntheticData:
    train: DatasetBatch
    test: DatasetBatch
    ood: DatasetBatch


@dataclass
class TrainConfig:
    """Training settings for the dense head.

    ``learning_rate``, ``batch_size`` and ``keep_prob`` default to the values
    used to train the original convolutional models. The fixture trainer uses
    plain SGD, for which ``fixture()`` supplies a larger step.
    """

    learning_rate: float = 1e-4
    batch_size: int = 64
    keep_prob: float = 0.5
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")

    @classmethod
    def fixture(cls, **overrides):
        return cls(**{"learning_rate": 0.02, **overrides})


def _class_prototypes(gen, class_count, shape, blobs_per_class=3):
    H, W, C = shape
    yy, xx = np.mgrid[0:H, 0:W]
    protos = np.zeros((class_count,) + tuple(shape))
    width = max(H, W) / 6.0
    for k in range(class_count):
        for _ in range(blobs_per_class):
            cy, cx = gen.uniform(0, H - 1), gen.uniform(0, W - 1)
            c = gen.integers(C)
            amp = gen.choice([-1.0, 1.0]) * gen.uniform(0.6, 1.0)
            protos[k, :, :, c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return protos


def gen_synthetic(seed, n_per_class, class_count, input_shape, n_test_per_class=None,
                  n_ood=None, noise=0.6):
    """Class-conditional Gaussian-blob images plus additive white noise.

    Each class owns a few randomly placed blobs; samples scale the class
    prototype by a random gain and add N(0, noise^2) pixel noise. The
    out-of-distribution split is uniform noise with the per-channel mean and
    std of the training split.
    ``prior_sigma`` is computed from the training split only and shared by
    all three splits.
    """
    class_count = int(class_count)
    if class_count < 2:
        raise ValueError(f"need at least 2 classes, got {class_count}")
    shape = tuple(int(d) for d in input_shape)
    if len(shape) != 3 or any(d < 1 for d in shape):
        raise ShapeError(f"input_shape must be (H, W, C) with positive extents, got {shape}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    n_test_per_class = n_per_class if n_test_per_class is None else int(n_test_per_class)
    gen = RngStream(seed).gen
    protos = _class_prototypes(gen, class_count, shape)

    def draw(n_each):
        labels = np.repeat(np.arange(class_count), n_each)
        gain = gen.uniform(0.7, 1.3, size=labels.shape[0])
        x = protos[labels] * gain[:, None, None, None]
        x = x + noise * gen.standard_normal(x.shape)
        order = gen.permutation(labels.shape[0])
        return x[order], labels[order]

    x_train, y_train = draw(n_per_class)
    x_test, y_test = draw(n_test_per_class)
    sigma = channel_std(x_train)
    n_ood = n_test_per_class * class_count if n_ood is None else int(n_ood)
    centre = x_train.reshape(-1, shape[-1]).mean(axis=0)
    half = math.sqrt(3.0) * sigma
    x_ood = gen.uniform(centre - half, centre + half, size=(n_ood,) + shape)
    y_ood = np.full(n_ood, UNLABELED)
    return SyntheticData(
        DatasetBatch(x_train, y_train, sigma, class_count),
        DatasetBatch(x_test, y_test, sigma, class_count),
        DatasetBatch(x_ood, y_ood, sigma, class_count),
    )


# -- CSV ---------------------------------------------------------------------


def save_csv(batch, path):
    n_feat = int(np.prod(batch.input_shape))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(n_feat)])
        for x, y in zip(batch.inputs.reshape(len(batch), -1), batch.labels):
            writer.writerow([int(y)] + [repr(float(v)) for v in x])


def load_csv(path, input_shape, class_count=None, prior_sigma=None):
    """Read ``label,f0,f1,...`` rows into a :class:`DatasetBatch`.

    The header row is optional. A label of -1 marks an unlabeled sample.
    ``prior_sigma`` defaults to the per-channel std of the file itself, so
    pass the training split's value when loading test data.
    """
    shape = tuple(int(d) for d in input_shape)
    n_feat = int(np.prod(shape))
    inputs, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip().lower() == "label"):
                continue
            if len(row) != n_feat + 1:
                raise DataFormatError(
                    f"{path} line {lineno}: expected {n_feat + 1} fields, got {len(row)}"
                )
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataFormatError(f"{path} line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise DataFormatError(f"{path} line {lineno}: non-finite value")
            if label < UNLABELED or (class_count is not None and label >= class_count):
                raise DataFormatError(f"{path} line {lineno}: label {label} out of range")
            labels.append(label)
            inputs.append(values)
    if not inputs:
        raise DataFormatError(f"{path}: no data rows")
    x = np.asarray(inputs).reshape((-1,) + shape)
    sigma = channel_std(x) if prior_sigma is None else prior_sigma
    return DatasetBatch(x, labels, sigma, class_count)


# -- fixture models ----------------------------------------------------------


def random_conv_stack(input_shape, filters=(8, 8, 8, 8), kernel_size=3, keep_prob=0.5,
                      input_keep_prob=None, relu=True, rng=None):
    """Conv layers with He-scaled Gaussian weights, each optionally followed by ReLU.

    ``input_keep_prob`` overrides the keep probability of the first conv layer,
    i.e. dropout on the raw input. Ends with a ``Flatten``; the returned list
    is a model prefix.
    """
    gen = as_rng(rng).gen
    layers = []
    channels = input_shape[-1]
    for i, f in enumerate(filters):
        fan_in = kernel_size * kernel_size * channels
        w = gen.standard_normal((kernel_size, kernel_size, channels, f)) * math.sqrt(2.0 / fan_in)
        p = input_keep_prob if (i == 0 and input_keep_prob is not None) else keep_prob
        layers.append(Conv2DLayer(w, np.zeros(f), p))
        if relu:
            layers.append(ReLU())
        channels = f
    layers.append(Flatten())
    return layers


def _stack_output_size(conv_stack, input_shape):
    shape = tuple(input_shape)
    for i, layer in enumerate(conv_stack):
        try:
            shape = tuple(layer.output_shape(shape))
        except ShapeError as exc:
            raise ShapeError(f"conv stack layer {i}: {exc}") from None
    return int(np.prod(shape))


def stack_features(conv_stack, input_shape, inputs):
    """Deterministic, flattened outputs of a model prefix for a batch of inputs."""
    feats = np.empty((len(inputs), _stack_output_size(conv_stack, input_shape)))
    for i, x in enumerate(inputs):
        h = x
        for layer in conv_stack:
            h = layer_deterministic(h, layer)
        feats[i] = h.reshape(-1)
    return feats


def sampled_stack_features(conv_stack, inputs, gen, chunk=256):
    """Flattened prefix outputs with fresh dropout masks for every sample."""
    out = []
    for start in range(0, len(inputs), chunk):
        h = inputs[start:start + chunk]
        for layer in conv_stack:
            h = layer_sampled(h, layer, gen)
        out.append(h.reshape(h.shape[0], -1))
    return np.concatenate(out)


def head_loss_and_grad(weights, bias, features, labels, masks):
    """Mean softmax cross-entropy of a masked dense head and its gradient."""
    h = features * masks
    logits = h @ weights + bias
    probs = softmax(logits)
    n = labels.shape[0]
    loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    return loss, h.T @ delta, delta.sum(axis=0)


def train_fixture_head(conv_stack, data, cfg=None, rng=None, class_count=None, head=None,
                       sampled_features=True):
    """Fit the final dense layer by SGD under Bernoulli dropout on its input.

    The convolutional prefix stays frozen. With ``sampled_features`` its
    outputs are redrawn every epoch with dropout active in the prefix too, so
    the head sees the same stochastic features that dropout inference
    produces; otherwise the deterministic prefix output is used. ``head``
    optionally supplies the starting dense layer, else it is drawn from a
    scaled Gaussian. Returns the complete model and per-epoch mean loss.

    Weight gradients are divided by each feature's mean square (taken once
    from the features the head trains on), which is SGD on RMS-normalised
    features expressed in the original parametrisation.
    """
    cfg = cfg or TrainConfig.fixture()
    class_count = class_count or data.class_count or int(data.labels.max()) + 1
    if np.any(data.labels < 0):
        raise ValueError("training data must be labeled")
    input_shape = tuple(data.input_shape)
    gen = as_rng(cfg.seed if rng is None else rng).gen
    if sampled_features:
        features = sampled_stack_features(conv_stack, data.inputs, gen)
    else:
        features = stack_features(conv_stack, input_shape, data.inputs)
    n, n_feat = features.shape
    mean_sq = np.mean(features * features, axis=0)
    precond = 1.0 / np.where(mean_sq > 0, mean_sq, 1.0)
    if head is None:
        weights = gen.standard_normal((n_feat, class_count)) * np.sqrt(precond / n_feat)[:, None]
        bias = np.zeros(class_count)
    else:
        if head.weights.shape != (n_feat, class_count):
            raise ShapeError(
                f"head shape {head.weights.shape} != ({n_feat}, {class_count})"
            )
        weights, bias = head.weights.copy(), head.bias.copy()
    losses = []
    for epoch in range(cfg.epochs):
        if sampled_features and epoch > 0:
            features = sampled_stack_features(conv_stack, data.inputs, gen)
        order = gen.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = (gen.random((idx.shape[0], n_feat)) < cfg.keep_prob).astype(np.float64)
            loss, gw, gb = head_loss_and_grad(weights, bias, features[idx], data.labels[idx], masks)
            if not np.isfinite(loss):
                raise FloatingPointError("training diverged: loss is not finite")
            total += loss * idx.shape[0]
            if cfg.learning_rate:
                with np.errstate(over="ignore", invalid="ignore"):
                    weights = weights - cfg.learning_rate * (precond[:, None] * gw)
                    bias = bias - cfg.learning_rate * gb
                if not np.all(np.isfinite(weights)):
                    raise FloatingPointError("training diverged: weights are not finite")
        losses.append(total / n)
    head = DenseLayer(weights, bias, cfg.keep_prob)
    model = ModelSpec(input_shape, list(conv_stack) + [head], class_count)
    return model, losses


def accuracy_of(model, data):
    preds = np.array([np.argmax(forward_deterministic(model, x)) for x in data.inputs])
    return float(np.mean(preds == data.labels))


@dataclass
class Fixture:
    model: ModelSpec
    data: SyntheticData
    losses: list


def deep_fixture(seed=2, input_shape=(16, 16, 2), class_count=3, n_per_class=200,
                 n_test_per_class=67, noise=0.7, filters=(16, 16, 16, 16), keep_prob=0.5,
                 conv_keep_prob=0.8, input_keep_prob=1.0, epochs=150, learning_rate=0.02):
    """Four-conv dropout classifier trained on synthetic blobs, with its data.

    Conv layer inputs after the raw image are dropped with ``conv_keep_prob``
    and the dense head input with ``keep_prob``.
    """
    data = gen_synthetic(seed, n_per_class, class_count, input_shape,
                         n_test_per_class=n_test_per_class, noise=noise)
    conv_keep_prob = keep_prob if conv_keep_prob is None else conv_keep_prob
    stack = random_conv_stack(input_shape, filters, 3, conv_keep_prob,
                              input_keep_prob=input_keep_prob, rng=RngStream(seed, 1))
    cfg = TrainConfig.fixture(learning_rate=learning_rate, epochs=epochs, keep_prob=keep_prob,
                              seed=seed)
    model, losses = train_fixture_head(stack, data.train, cfg, rng=RngStream(seed, 2))
    return Fixture(model, data, losses)
