"""Brute-force references for checking the closed-form moment code.

None of these are used on the inference path. They share no arithmetic with
:mod:`onepass.layers` beyond numpy itself.
"""

import math
from dataclasses import dataclass

import numpy as np

from .gaussian import GaussianTensor, kl_gaussian_fit_moments
from .layers import Conv2DLayer, DenseLayer
from .network import forward_mc_dropout

MAX_ENUMERATION_VARS = 24


class BudgetExceeded(ValueError):
    """Raised when a layer has too many mask variables per output to enumerate."""


@dataclass(frozen=True)
class EnumerationBudget:
    max_bernoulli_vars: int = 16
    tolerance: float = 1e-9

    def __post_init__(self):
        if not 1 <= self.max_bernoulli_vars <= MAX_ENUMERATION_VARS:
            raise ValueError(
                f"max_bernoulli_vars must be in [1, {MAX_ENUMERATION_VARS}], "
                f"got {self.max_bernoulli_vars}"
            )


def _all_masks(n):
    codes = np.arange(2 ** n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(np.float64)


def _receptive_fields(arr, kh, kw):
    """Explicit loop gather of (H', W', kh*kw*C) receptive fields."""
    H, W, C = arr.shape
    out = np.empty((H - kh + 1, W - kw + 1, kh * kw * C))
    for i in range(H - kh + 1):
        for j in range(W - kw + 1):
            out[i, j] = arr[i:i + kh, j:j + kw, :].reshape(-1)
    return out


def _enumerate(mu, s2, w, b, p, masks):
    """Exact moments of sum_i z_i x_i w_i + b over every mask configuration.

    ``mu``, ``s2``: (P, n) receptive-field input moments; ``w``: (n, F).
    Returns (P, F) mean and variance.
    """
    n = masks.shape[1]
    kept = masks.sum(axis=1)
    weight = p ** kept * (1.0 - p) ** (n - kept)  # (M,)
    P, F = mu.shape[0], w.shape[1]
    mean = np.empty((P, F))
    var = np.empty((P, F))
    for pos in range(P):
        # conditional on the mask, y is Gaussian with these moments
        cond_mean = masks @ (mu[pos][:, None] * w) + b  # (M, F)
        cond_var = masks @ (s2[pos][:, None] * w * w)
        m = weight @ cond_mean
        mean[pos] = m
        var[pos] = weight @ (cond_var + (cond_mean - m) ** 2)
    return mean, var


def enumerate_layer_moments(g, layer, budget=EnumerationBudget()):
    """Exact output moments of a dropout conv/dense layer by mask enumeration."""
    n = layer.bernoulli_count()
    if n > budget.max_bernoulli_vars:
        raise BudgetExceeded(
            f"{n} Bernoulli variables per output exceed budget {budget.max_bernoulli_vars}"
        )
    p = layer.keep_prob
    masks = _all_masks(n) if p < 1.0 else np.ones((1, n))
    if isinstance(layer, Conv2DLayer):
        kh, kw, _, F = layer.weights.shape
        mu = _receptive_fields(g.mean, kh, kw)
        s2 = _receptive_fields(g.var, kh, kw)
        out_hw = mu.shape[:2]
        mean, var = _enumerate(
            mu.reshape(-1, n), s2.reshape(-1, n), layer.weights.reshape(n, F),
            layer.bias, p, masks,
        )
        return GaussianTensor(mean.reshape(out_hw + (F,)), var.reshape(out_hw + (F,)))
    if isinstance(layer, DenseLayer):
        mean, var = _enumerate(
            g.mean.reshape(1, n), g.var.reshape(1, n), layer.weights, layer.bias, p, masks
        )
        return GaussianTensor(mean[0], var[0])
    raise TypeError(f"cannot enumerate a {type(layer).__name__} layer")


def _legendre_window(m, s, nodes, width):
    lo = max(0.0, m - width * s)
    hi = m + width * s
    if hi <= lo:
        return np.empty(0), np.empty(0)
    t, wt = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * (hi - lo)
    x = lo + half * (t + 1.0)
    dens = np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2.0 * math.pi))
    return x, wt * half * dens


def quadrature_relu_moments(m, v, nodes=128, width=12.0):
    """Mean and variance of ReLU(x), x ~ N(m, v), by numerical integration.

    Integrates x and x^2 against the normal density over the positive part
    of ``[m - width*sd, m + width*sd]`` with Gauss-Legendre nodes. Splitting
    at the kink keeps the integrand smooth, so no error function is needed.
    """
    if v < 0:
        raise ValueError(f"variance must be non-negative, got {v}")
    if nodes < 32:
        raise ValueError(f"need at least 32 nodes, got {nodes}")
    m, v = float(m), float(v)
    if v == 0.0:
        return max(m, 0.0), 0.0
    s = math.sqrt(v)
    x, w = _legendre_window(m, s, nodes, width)
    if x.size == 0:
        return 0.0, 0.0
    mean = float(w @ x)
    # central second moment about the mean avoids E[y^2] - mean^2 cancellation
    mass_zero = 1.0 - float(w.sum())
    var = float(w @ (x - mean) ** 2) + mass_zero * mean * mean
    return mean, max(var, 0.0)


def mc_fit_logit_moments(m, x, prior_sigma, T, rng=None, chunk=4096, return_stderr=False):
    """Gaussian fit to the logits of ``T`` MC-dropout passes.

    With ``return_stderr`` the standard errors of the fitted mean and variance
    are returned too, as ``(GaussianTensor, se_mean, se_var)``.
    """
    if T < 100:
        raise ValueError(f"T must be >= 100, got {T}")
    samples = forward_mc_dropout(m, x, T, rng=rng, prior_sigma=prior_sigma, chunk=chunk)
    mu, var = kl_gaussian_fit_moments(samples, axis=0)
    if not return_stderr:
        return GaussianTensor(mu, var)
    centred = samples - mu
    m4 = np.mean(centred ** 4, axis=0)
    se_mean = np.sqrt(var / T)
    se_var = np.sqrt(np.maximum(m4 - var * var, 0.0) / T)
    return GaussianTensor(mu, var), se_mean, se_var
