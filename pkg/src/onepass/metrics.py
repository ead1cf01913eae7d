"""Classification metrics and the entropy/confidence histogram export."""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


@dataclass
class MetricsReport:
    accuracy: float
    f1_weighted: float
    nll_categorical: float
    nll_gaussian: float
    confusion: np.ndarray
    n_samples: int

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "f1_weighted": self.f1_weighted,
            "nll_categorical": self.nll_categorical,
            "nll_gaussian": self.nll_gaussian,
            "n": self.n_samples,
            "confusion": self.confusion.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _predicted(preds):
    return np.array([p if isinstance(p, (int, np.integer)) else p.predicted_class for p in preds])


def _check_lengths(preds, labels):
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions but {len(labels)} labels")


def confusion_matrix(predicted, labels, class_count=None):
    predicted = np.asarray(predicted, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    k = class_count or int(max(predicted.max(initial=-1), labels.max(initial=-1))) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predicted), 1)
    return cm


def accuracy_f1(preds, labels, class_count=None):
    """Accuracy, support-weighted F1 and the confusion matrix (rows = truth).

    ``preds`` holds :class:`Prediction` objects or plain class indices. A
    class with zero precision and recall scores F1 = 0; a class absent from
    ``labels`` has zero weight.
    """
    _check_lengths(preds, labels)
    predicted = _predicted(preds)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no samples")
    cm = confusion_matrix(predicted, labels, class_count)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    claimed = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(claimed > 0, tp / claimed, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    n = labels.size
    return float(tp.sum() / n), float(np.sum(support / n * f1)), cm


def nll_categorical(preds, labels):
    """Mean of -ln p(true class), with probabilities floored at 1e-12."""
    _check_lengths(preds, labels)
    if len(labels) == 0:
        raise ValueError("no samples")
    p_true = np.array([
        (p.probs if hasattr(p, "probs") else np.asarray(p))[y] for p, y in zip(preds, labels)
    ])
    return float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))


def nll_gaussian(mu, sigma2, xs):
    """Gaussian negative log-likelihood of the samples ``xs`` under N(mu, sigma2).

    n/2 ln(2 pi) + n/2 ln(sigma2) + sum((x - mu)^2) / (2 sigma2). ``mu`` may
    be a scalar or one mean per sample.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    n = xs.size
    if n < 1:
        raise ValueError("need at least one sample")
    return float(
        0.5 * n * math.log(2 * math.pi) + 0.5 * n * math.log(sigma2)
        + np.sum((xs - mu) ** 2) / (2 * sigma2)
    )


def onehot_nll_gaussian(preds, labels):
    """Per-sample Gaussian NLL of one-hot targets around the predicted probabilities.

    The shared variance is set to its maximum-likelihood value, the mean
    squared error, floored at 1e-12.
    """
    _check_lengths(preds, labels)
    probs = np.array([p.probs if hasattr(p, "probs") else np.asarray(p) for p in preds])
    target = np.zeros_like(probs)
    target[np.arange(len(labels)), np.asarray(labels)] = 1.0
    sigma2 = max(float(np.mean((target - probs) ** 2)), PROB_FLOOR)
    return nll_gaussian(probs.reshape(-1), sigma2, target.reshape(-1)) / len(labels)


def evaluate(preds, labels, class_count=None):
    acc, f1, cm = accuracy_f1(preds, labels, class_count)
    return MetricsReport(
        accuracy=acc,
        f1_weighted=f1,
        nll_categorical=nll_categorical(preds, labels),
        nll_gaussian=onehot_nll_gaussian(preds, labels),
        confusion=cm,
        n_samples=len(labels),
    )


HISTOGRAM_HEADER = ("entropy", "confidence", "correct", "predicted", "true")


def histogram_rows(preds, labels):
    _check_lengths(preds, labels)
    return [
        (p.entropy, p.confidence, int(p.predicted_class == y), p.predicted_class, int(y))
        for p, y in zip(preds, labels)
    ]


def export_histogram(preds, labels, path):
    """Write one CSV row per prediction, in input order. Returns the rows."""
    rows = histogram_rows(preds, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTOGRAM_HEADER)
        for h, c, ok, pred, true in rows:
            writer.writerow([repr(float(h)), repr(float(c)), ok, pred, true])
    return rows


def read_histogram(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != HISTOGRAM_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(float(h), float(c), int(ok), int(p), int(t)) for h, c, ok, p, t in reader]
