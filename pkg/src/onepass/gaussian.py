"""Diagonal Gaussian tensors: a mean and a variance per element."""

from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, ShapeError, as_tensor


@dataclass(frozen=True)
class GaussianTensor:
    """Independent per-element normal distributions N(mean, var)."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = as_tensor(self.mean, "mean")
        var = as_tensor(self.var, "var")
        if mean.shape != var.shape:
            raise ShapeError(f"mean shape {mean.shape} != var shape {var.shape}")
        if np.any(var < 0):
            raise ValueError("variance must be non-negative")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def shape(self):
        return self.mean.shape

    @property
    def std(self):
        return np.sqrt(self.var)

    def reshape(self, shape):
        return GaussianTensor(self.mean.reshape(shape), self.var.reshape(shape))

    @classmethod
    def _trusted(cls, mean, var):
        # Skips validation; callers guarantee finite, equal-shape, var >= 0.
        obj = object.__new__(cls)
        object.__setattr__(obj, "mean", mean)
        object.__setattr__(obj, "var", var)
        return obj


def from_deterministic(x):
    x = as_tensor(x)
    return GaussianTensor(x.copy(), np.zeros_like(x))


def broadcast_prior(sigma_train, shape):
    """Expand a scalar, per-channel or full-shape std to ``shape``."""
    sigma = np.asarray(sigma_train, dtype=np.float64)
    if sigma.ndim == 0:
        sigma = sigma.reshape(1)
    if not np.all(np.isfinite(sigma)):
        raise NonFiniteError("sigma_train contains NaN or Inf")
    if np.any(sigma < 0):
        raise ValueError("sigma_train must be non-negative")
    if sigma.shape == tuple(shape):
        return sigma
    if sigma.size == 1:
        return np.broadcast_to(sigma.reshape(()), shape)
    if sigma.ndim == 1 and sigma.shape[0] == shape[-1]:
        return np.broadcast_to(sigma, shape)
    raise ShapeError(
        f"sigma_train shape {sigma.shape} matches neither input shape {tuple(shape)} "
        f"nor its channel axis ({shape[-1]},)"
    )


def from_input_with_prior(x, sigma_train):
    """Input model N(x, sigma_train**2) with the training-set std as prior.

    ``sigma_train`` is either the full input shape or one value per channel
    (last axis), broadcast over the spatial positions.
    """
    x = as_tensor(x)
    sigma = broadcast_prior(sigma_train, x.shape)
    return GaussianTensor(x.copy(), np.square(sigma))


def kl_gaussian_fit_moments(samples, axis=None):
    """KL-optimal Gaussian fit to empirical samples: mean and population variance.

    With ``axis`` given, fits independently along that axis of an array.
    """
    s = np.asarray(samples, dtype=np.float64)
    n = s.size if axis is None else s.shape[axis]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    mu = s.mean(axis=axis)
    sigma2 = np.mean(np.square(s - (mu if axis is None else np.expand_dims(mu, axis))), axis=axis)
    if axis is None:
        return float(mu), float(sigma2)
    return mu, sigma2
