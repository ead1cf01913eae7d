"""Model container and the three forward passes.

* :func:`forward_moments` -- one pass of closed-form mean/variance propagation.
* :func:`forward_deterministic` -- the plain network with test-time dropout scaling.
* :func:`forward_mc_dropout` -- ``T`` stochastic passes with fresh dropout masks.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .gaussian import GaussianTensor, broadcast_prior
from .layers import (
    Conv2DLayer,
    DenseLayer,
    Flatten,
    ReLU,
    _conv_moments_arrays,
    _dense_moments_arrays,
    _relu_moments_arrays,
    layer_deterministic,
    layer_sampled,
)
from .tensor import ShapeError, as_tensor

_MASK64 = (1 << 64) - 1


class ModelError(ValueError):
    """Raised for a malformed model description."""


class RngStream:
    """Counter-based random stream (Philox) keyed by ``(seed, index)``.

    Substreams with distinct indices are independent, which keeps sharded
    evaluation reproducible regardless of how samples are split.
    """

    def __init__(self, seed=0, index=0):
        self.seed = int(seed) & _MASK64
        self.index = int(index) & _MASK64
        self._gen = None

    @property
    def gen(self):
        if self._gen is None:
            key = np.array([self.seed, self.index], dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def substream(self, index):
        return RngStream(self.seed, (self.index << 32) ^ (int(index) + 1))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, index={self.index})"


def as_rng(rng):
    if isinstance(rng, RngStream):
        return rng
    return RngStream(0 if rng is None else rng)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    class_count: int
    _shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "class_count", int(self.class_count))
        object.__setattr__(self, "_shapes", _check_chain(self))

    @property
    def layer_shapes(self):
        """Output shape after each layer."""
        return self._shapes

    def stochastic_layers(self):
        return [l for l in self.layers if isinstance(l, (Conv2DLayer, DenseLayer))]


def _check_chain(m):
    if not m.layers:
        raise ModelError("model has no layers")
    if any(d < 1 for d in m.input_shape) or len(m.input_shape) != 3:
        raise ModelError(f"input_shape must be (H, W, C) with positive extents, got {m.input_shape}")
    if m.class_count < 1:
        raise ModelError(f"class_count must be positive, got {m.class_count}")
    shapes = []
    shape = m.input_shape
    seen_conv = False
    for i, layer in enumerate(m.layers):
        if not isinstance(layer, (Conv2DLayer, DenseLayer, ReLU, Flatten)):
            raise ModelError(f"layer {i}: unknown layer type {type(layer).__name__}")
        if isinstance(layer, DenseLayer) and not seen_conv:
            raise ModelError(f"layer {i}: dense layer before any conv2d layer")
        try:
            shape = tuple(layer.output_shape(shape))
        except ShapeError as exc:
            raise ModelError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        seen_conv = seen_conv or isinstance(layer, Conv2DLayer)
        shapes.append(shape)
    last = m.layers[-1]
    if not isinstance(last, DenseLayer):
        raise ModelError("final layer must be dense")
    if shape != (m.class_count,):
        raise ModelError(f"final dense output {shape[0]} != class_count {m.class_count}")
    return tuple(shapes)


def validate_model(m):
    """Re-check a model's shape chain and return it.

    ``ModelSpec`` already validates on construction; this also accepts a
    JSON-style dict.
    """
    if isinstance(m, dict):
        return model_from_dict(m)
    _check_chain(m)
    return m


def _check_input(m, x):
    x = as_tensor(x, "input")
    if x.shape != m.input_shape:
        if x.size == int(np.prod(m.input_shape)):
            return x.reshape(m.input_shape)
        raise ShapeError(f"input shape {x.shape} != model input_shape {m.input_shape}")
    return x


def forward_moments(m, x, prior_sigma=0.0, trace=None):
    """Propagate N(x, prior_sigma**2) through the network in one pass.

    Returns the logit-space :class:`GaussianTensor`. ``trace`` may be a
    ``collections.Counter``; it is incremented once per layer evaluated.
    """
    x = _check_input(m, x)
    mean = x
    var = np.square(broadcast_prior(prior_sigma, x.shape))
    for layer in m.layers:
        if isinstance(layer, Conv2DLayer):
            mean, var = _conv_moments_arrays(mean, var, layer)
        elif isinstance(layer, ReLU):
            mean, var = _relu_moments_arrays(mean, var)
        elif isinstance(layer, Flatten):
            mean, var = mean.reshape(-1), var.reshape(-1)
        else:
            mean, var = _dense_moments_arrays(mean, var, layer)
        if trace is not None:
            trace[type(layer).__name__] += 1
    return GaussianTensor._trusted(mean, var)


def forward_deterministic(m, x):
    """Logits of the conventional network (weights scaled by keep_prob)."""
    h = _check_input(m, x)
    for layer in m.layers:
        h = layer_deterministic(h, layer)
    return h


def forward_mc_dropout(m, x, T, rng=None, prior_sigma=0.0, chunk=4096):
    """Run ``T`` stochastic dropout passes and return logits of shape (T, K).

    Each pass draws fresh Bernoulli(keep_prob) masks for every stochastic
    layer and, when ``prior_sigma`` is non-zero, fresh input noise
    ``N(0, prior_sigma**2)``. Passes are evaluated ``chunk`` at a time; the
    result is a deterministic function of (seed, T, chunk).
    """
    T = int(T)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    chunk = max(1, int(chunk))
    x = _check_input(m, x)
    sigma = broadcast_prior(prior_sigma, x.shape)
    noisy = bool(np.any(sigma > 0))
    gen = as_rng(rng).gen
    out = np.empty((T, m.class_count))
    for start in range(0, T, chunk):
        n = min(chunk, T - start)
        h = np.broadcast_to(x, (n,) + x.shape)
        if noisy:
            h = h + sigma * gen.standard_normal(h.shape)
        for layer in m.layers:
            h = layer_sampled(h, layer, gen)
        out[start:start + n] = h
    return out


# -- JSON model format -------------------------------------------------------


def _layer_to_dict(layer):
    if isinstance(layer, Conv2DLayer):
        kind, shape = "conv2d", list(layer.weights.shape)
    elif isinstance(layer, DenseLayer):
        kind, shape = "dense", list(layer.weights.shape)
    elif isinstance(layer, ReLU):
        return {"kind": "relu"}
    else:
        return {"kind": "flatten"}
    return {
        "kind": kind,
        "shape": shape,
        "keep_prob": layer.keep_prob,
        "weights": layer.weights.reshape(-1).tolist(),
        "bias": layer.bias.tolist(),
    }


def model_to_dict(m, prior_sigma=None):
    doc = {
        "input_shape": list(m.input_shape),
        "class_count": m.class_count,
        "layers": [_layer_to_dict(l) for l in m.layers],
    }
    if prior_sigma is not None:
        doc["prior_sigma"] = np.asarray(prior_sigma, dtype=np.float64).reshape(-1).tolist()
    return doc


def _layer_from_dict(i, d, inverted):
    kind = d.get("kind")
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind not in ("conv2d", "dense"):
        raise ModelError(f"layer {i}: unknown kind {kind!r}")
    try:
        shape = [int(s) for s in d["shape"]]
        weights = np.asarray(d["weights"], dtype=np.float64)
        bias = np.asarray(d["bias"], dtype=np.float64)
        keep_prob = float(d.get("keep_prob", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"layer {i}: malformed {kind} entry ({exc})") from None
    if weights.size != int(np.prod(shape)):
        raise ModelError(
            f"layer {i}: {weights.size} weights do not fill shape {shape}"
        )
    weights = weights.reshape(shape)
    if inverted:
        weights = weights / keep_prob
    cls = Conv2DLayer if kind == "conv2d" else DenseLayer
    try:
        return cls(weights, bias, keep_prob)
    except ValueError as exc:
        raise ModelError(f"layer {i}: {exc}") from None


def model_from_dict(d):
    """Build a :class:`ModelSpec` from the JSON document layout.

    ``"weights_scaled_inverted": true`` marks weights trained with inverted
    dropout; they are divided by keep_prob to match the raw-mask convention.
    """
    try:
        layers_in = d["layers"]
        input_shape = d["input_shape"]
        class_count = d["class_count"]
    except (KeyError, TypeError) as exc:
        raise ModelError(f"model document missing field {exc}") from None
    inverted = bool(d.get("weights_scaled_inverted", False))
    layers = [_layer_from_dict(i, l, inverted) for i, l in enumerate(layers_in)]
    return ModelSpec(input_shape, layers, class_count)


def save_model(m, path, prior_sigma=None):
    """Write the model JSON, optionally recording the input prior std."""
    with open(path, "w") as fh:
        json.dump(model_to_dict(m, prior_sigma), fh)


def load_model(path, with_prior=False):
    """Read a model JSON. With ``with_prior`` also return its ``prior_sigma`` (or None)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: invalid JSON ({exc})") from None
    model = model_from_dict(doc)
    if not with_prior:
        return model
    prior = doc.get("prior_sigma") if isinstance(doc, dict) else None
    if prior is not None:
        prior = np.asarray(prior, dtype=np.float64)
        if prior.ndim != 1 or not np.all(np.isfinite(prior)) or np.any(prior < 0):
            raise ModelError(f"{path}: prior_sigma must be a list of non-negative numbers")
    return model, prior
