"""Turning a logit-space Gaussian into a class prediction with uncertainty."""

from dataclasses import dataclass

import numpy as np

from .gaussian import GaussianTensor
from .network import as_rng

DEFAULT_SAMPLES = 100
SIMPLEX_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    predicted_class: int
    confidence: float
    entropy: float
    logits: GaussianTensor = None
    sample_count: int = 1

    def to_dict(self):
        return {
            "predicted": self.predicted_class,
            "confidence": self.confidence,
            "entropy": self.entropy,
            "probs": self.probs.tolist(),
        }


def softmax(z, axis=-1):
    """Softmax with the max logit subtracted first for stability."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _check_simplex(probs):
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty probability vector")
    if not np.all(np.isfinite(p)) or np.any(p < -SIMPLEX_TOLERANCE):
        raise ValueError("probabilities must be finite and non-negative")
    total = p.sum()
    if abs(total - 1.0) > SIMPLEX_TOLERANCE:
        raise ValueError(f"probabilities sum to {total}, not 1")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def _entropy(p):
    nz = p[p > 0]
    return float(max(-(nz @ np.log(nz)), 0.0))


def predictive_entropy(probs):
    """Entropy in nats of a categorical distribution, with 0 ln 0 = 0."""
    return _entropy(_check_simplex(probs))


def confidence(probs):
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty probability vector")
    return float(p.max())


def prediction_from_probs(probs, logits=None, sample_count=1, checked=False):
    p = probs if checked else _check_simplex(probs)
    k = int(np.argmax(p))  # first maximum wins ties
    return Prediction(
        probs=p,
        predicted_class=k,
        confidence=float(p[k]),
        entropy=_entropy(p),
        logits=logits,
        sample_count=sample_count,
    )


def predict(logits, S=DEFAULT_SAMPLES, rng=None):
    """Marginalise a logit Gaussian through the softmax by sampling.

    Draws ``S`` logit vectors from ``N(mean, diag(var))``, averages their
    softmax outputs. The reported class is the argmax of that average, and
    the entropy is taken over the averaged distribution too.
    """
    S = int(S)
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if not isinstance(logits, GaussianTensor):
        raise TypeError("logits must be a GaussianTensor")
    mean, std = logits.mean.reshape(-1), np.sqrt(logits.var.reshape(-1))
    if std.max() > 0:
        draws = as_rng(rng).gen.standard_normal((S, mean.size))
        draws *= std
        draws += mean
        probs = softmax(draws).mean(axis=0)
    else:
        probs = softmax(mean)
    # softmax output is a simplex by construction
    return prediction_from_probs(probs, logits=logits, sample_count=S, checked=True)


def predict_from_logit_samples(samples):
    """Averaged-softmax prediction from stacked logits (T, K), as MC dropout does."""
    samples = np.atleast_2d(samples)
    probs = softmax(samples).mean(axis=0)
    return prediction_from_probs(probs, sample_count=samples.shape[0], checked=True)
