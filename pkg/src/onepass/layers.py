"""Layer types and closed-form moment propagation through them.

Dropout follows the raw Bernoulli convention: a unit is kept (``z = 1``) with
probability ``keep_prob`` and no ``1/keep_prob`` rescaling is applied. The
deterministic baseline therefore multiplies weights by ``keep_prob``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .gaussian import GaussianTensor
from .tensor import ShapeError, as_tensor, check_conv_shapes, patches

#: Negative variances at or above this are float cancellation and get clamped.
NEGATIVE_VAR_TOLERANCE = -1e-12

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_keep_prob(p):
    p = float(p)
    if not (0.0 < p <= 1.0):
        raise ValueError(f"keep_prob must lie in (0, 1], got {p}")
    return p


@dataclass(frozen=True, eq=False)
class Conv2DLayer:
    weights: np.ndarray
    bias: np.ndarray
    keep_prob: float = 0.5
    _kernel: np.ndarray = field(init=False, repr=False)
    _kernel_sq: np.ndarray = field(init=False, repr=False)
    _kernel_det: np.ndarray = field(init=False, repr=False)
    _kernel_pair: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = as_tensor(self.weights, "conv weights")
        b = as_tensor(self.bias, "conv bias").reshape(-1)
        if w.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4 (h, w, C, F), got {w.shape}")
        if b.shape[0] != w.shape[3]:
            raise ShapeError(f"conv bias length {b.shape[0]} != filter count {w.shape[3]}")
        p = _check_keep_prob(self.keep_prob)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "keep_prob", p)
        flat = w.reshape(-1, w.shape[3])
        object.__setattr__(self, "_kernel", flat)
        object.__setattr__(self, "_kernel_sq", flat * flat)
        object.__setattr__(self, "_kernel_det", flat * p)
        object.__setattr__(self, "_kernel_pair", np.stack([flat, flat * flat])[:, None])

    @property
    def kernel_shape(self):
        return self.weights.shape

    def output_shape(self, in_shape):
        return check_conv_shapes(tuple(in_shape), self.weights.shape, self.bias.shape[0])

    def bernoulli_count(self):
        """Mask variables feeding one output element."""
        kh, kw, c, _ = self.weights.shape
        return kh * kw * c


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    keep_prob: float = 0.5
    _weights_sq: np.ndarray = field(init=False, repr=False)
    _weights_det: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = as_tensor(self.weights, "dense weights")
        b = as_tensor(self.bias, "dense bias").reshape(-1)
        if w.ndim != 2:
            raise ShapeError(f"dense weights must be rank 2 (in, out), got {w.shape}")
        if b.shape[0] != w.shape[1]:
            raise ShapeError(f"dense bias length {b.shape[0]} != output extent {w.shape[1]}")
        p = _check_keep_prob(self.keep_prob)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "keep_prob", p)
        object.__setattr__(self, "_weights_sq", w * w)
        object.__setattr__(self, "_weights_det", w * p)

    def output_shape(self, in_shape):
        in_shape = tuple(in_shape)
        if len(in_shape) != 1:
            raise ShapeError(f"dense input must be rank 1, got shape {in_shape}")
        if in_shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"axis 0: dense expects {self.weights.shape[0]} inputs, got {in_shape[0]}"
            )
        return (self.weights.shape[1],)

    def bernoulli_count(self):
        return self.weights.shape[0]


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, in_shape):
        return tuple(in_shape)


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


def _second_moment_term(mean, var, p):
    # ((mu^2 + sigma^2) p - mu^2 p^2) rearranged so every term is >= 0.
    return var * p + (mean * mean) * (p * (1.0 - p))


def _second_moment_term_into(mean, var, p, out):
    np.multiply(mean, mean, out=out)
    out *= p * (1.0 - p)
    out += var * p
    return out


def _clamp_variance(var):
    low = var.min()
    if low < 0.0:
        if low < NEGATIVE_VAR_TOLERANCE:
            raise ArithmeticError(f"propagated variance {low:.3e} is negative")
        var = np.maximum(var, 0.0)
    return var


def _conv_moments_arrays(mean, var, layer):
    kh, kw = layer.weights.shape[:2]
    p = layer.keep_prob
    # mean and variance inputs share one im2col gather and one batched matmul
    stacked = np.empty((2,) + mean.shape)
    np.multiply(mean, p, out=stacked[0])
    _second_moment_term_into(mean, var, p, stacked[1])
    out = patches(stacked, kh, kw) @ layer._kernel_pair
    out_mean = out[0]
    out_mean += layer.bias
    return out_mean, _clamp_variance(out[1])


def _dense_moments_arrays(mean, var, layer):
    p = layer.keep_prob
    out_mean = (mean * p) @ layer.weights + layer.bias
    out_var = _second_moment_term(mean, var, p) @ layer._weights_sq
    return out_mean, _clamp_variance(out_var)


def _relu_moments_arrays(mean, var):
    low = var.min()
    if low < 0:
        raise ValueError("relu_moments: input variance must be non-negative")
    if low == 0.0:
        random = var > 0
        if not random.any():
            return np.maximum(mean, 0.0), np.zeros_like(var)
        out_mean, out_var = _relu_moments_arrays(mean[random], var[random])
        full_mean = np.maximum(mean, 0.0)
        full_var = np.zeros_like(var)
        full_mean[random] = out_mean
        full_var[random] = out_var
        return full_mean, full_var
    std = np.sqrt(var)
    r = mean / std
    # one ndtr call: q is the smaller of F(r) and F(-r)
    q = ndtr(-np.abs(r))
    upper = r > 0
    cdf = np.where(upper, 1.0 - q, q)
    tail = np.where(upper, q, 1.0 - q)
    pdf = np.exp(-0.5 * r * r)
    pdf *= _INV_SQRT_2PI
    # a = E[ReLU]/s; Var/v = F(r) - a (f(r) - r F(-r)), free of cancelling r^2 terms
    a = r * cdf
    a += pdf
    tail *= r
    np.subtract(pdf, tail, out=tail)
    tail *= a
    np.subtract(cdf, tail, out=cdf)
    np.maximum(cdf, 0.0, out=cdf)
    cdf *= var
    a *= std
    return a, cdf


def conv_moments(g, layer):
    """Mean and variance of a dropout convolution applied to Gaussian input.

    Output mean is ``(mu * p) conv w + b`` and output variance is
    ``((mu^2 + sigma^2) p - mu^2 p^2) conv w^2``; exact for independent inputs.
    """
    layer.output_shape(g.shape)
    return GaussianTensor._trusted(*_conv_moments_arrays(g.mean, g.var, layer))


def dense_moments(g, layer):
    """Dense analogue of :func:`conv_moments` for a rank-1 Gaussian input."""
    layer.output_shape(g.shape)
    return GaussianTensor._trusted(*_dense_moments_arrays(g.mean, g.var, layer))


def relu_moments(g):
    """Moments of ReLU(x) for x ~ N(m, v), computed per element via erf.

    Zero-variance elements fall back to the deterministic ReLU.
    """
    return GaussianTensor._trusted(*_relu_moments_arrays(g.mean, g.var))


def flatten_moments(g):
    return GaussianTensor._trusted(g.mean.reshape(-1), g.var.reshape(-1))


def layer_moments(g, layer):
    if isinstance(layer, Conv2DLayer):
        return conv_moments(g, layer)
    if isinstance(layer, DenseLayer):
        return dense_moments(g, layer)
    if isinstance(layer, ReLU):
        return relu_moments(g)
    if isinstance(layer, Flatten):
        return flatten_moments(g)
    raise TypeError(f"unknown layer type {type(layer).__name__}")


def layer_deterministic(x, layer):
    """Test-time forward pass with weights scaled by ``keep_prob``.

    ``x`` may carry leading batch axes.
    """
    if isinstance(layer, Conv2DLayer):
        kh, kw = layer.weights.shape[:2]
        return patches(x, kh, kw) @ layer._kernel_det + layer.bias
    if isinstance(layer, DenseLayer):
        return x @ layer._weights_det + layer.bias
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, Flatten):
        return x.reshape(-1)
    raise TypeError(f"unknown layer type {type(layer).__name__}")


def layer_sampled(x, layer, gen):
    """One stochastic dropout pass for a batch ``x`` of shape (n, ...).

    Fresh Bernoulli(keep_prob) masks are drawn per element of every sample
    from the numpy Generator ``gen``.
    """
    if isinstance(layer, (Conv2DLayer, DenseLayer)):
        p = layer.keep_prob
        if p < 1.0:
            x = x * (gen.random(x.shape) < p)
        if isinstance(layer, Conv2DLayer):
            kh, kw = layer.weights.shape[:2]
            return patches(x, kh, kw) @ layer._kernel + layer.bias
        return x @ layer.weights + layer.bias
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    raise TypeError(f"unknown layer type {type(layer).__name__}")
