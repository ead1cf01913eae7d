"""Per-inference latency measurement for the three inference methods."""

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .network import RngStream, forward_deterministic, forward_mc_dropout, forward_moments
from .uncertainty import DEFAULT_SAMPLES, predict, predict_from_logit_samples, softmax

MIN_ITERS = 30
MIN_WARMUP = 5
DEFAULT_METHODS = ("ours", "deterministic", "mcdrop-3", "mcdrop-5", "mcdrop-10", "mcdrop-30")


@dataclass
class MethodTiming:
    method: str
    mean_ms: float
    median_ms: float
    p95_ms: float
    iterations: int
    warmup: int

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class BenchReport:
    timings: dict = field(default_factory=dict)

    def median(self, method):
        return self.timings[method].median_ms

    def ratios(self):
        """Median latency ratios ours/deterministic and mcdrop-k/ours."""
        out = {}
        if "ours" in self.timings and "deterministic" in self.timings:
            out["ours/deterministic"] = self.median("ours") / self.median("deterministic")
        if "ours" in self.timings:
            for name in self.timings:
                if name.startswith("mcdrop-"):
                    out[f"{name}/ours"] = self.median(name) / self.median("ours")
        return out

    def to_dict(self):
        return {
            "methods": {k: v.to_dict() for k, v in self.timings.items()},
            "ratios": self.ratios(),
        }


def make_runner(model, x, prior_sigma, method, n_samples=DEFAULT_SAMPLES, seed=0):
    """Zero-argument callable performing one full inference with ``method``.

    MC dropout runs its passes one at a time, as a device without batching
    would, so its cost scales with the pass count.
    """
    rng = RngStream(seed)
    if method == "ours":
        return lambda: predict(forward_moments(model, x, prior_sigma), n_samples, rng)
    if method == "deterministic":
        return lambda: softmax(forward_deterministic(model, x))
    if method.startswith("mcdrop-"):
        k = int(method.split("-", 1)[1])
        return lambda: predict_from_logit_samples(
            forward_mc_dropout(model, x, k, rng, prior_sigma, chunk=1)
        )
    raise ValueError(f"unknown benchmark method {method!r}")


def time_callable(fn, iters, warmup):
    for _ in range(warmup):
        fn()
    samples = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        fn()
        samples[i] = (time.perf_counter() - t0) * 1e3
    return samples


def run_benchmark(model, x, prior_sigma, methods=DEFAULT_METHODS, iters=100, warmup=10,
                  n_samples=DEFAULT_SAMPLES, seed=0, rounds=3):
    """Time each method on one resident model and sample.

    Methods are interleaved over ``rounds`` so slow drifts in machine load hit
    all of them alike. Runs single-threaded.
    """
    if iters < MIN_ITERS:
        raise ValueError(f"iters must be >= {MIN_ITERS}, got {iters}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    runners = {m: make_runner(model, x, prior_sigma, m, n_samples, seed) for m in methods}
    per_round = -(-iters // rounds)
    collected = {m: [] for m in methods}
    with threadpool_limits(limits=1):
        for r in range(rounds):
            for m in methods:
                collected[m].append(time_callable(runners[m], per_round, warmup if r == 0 else 1))
    report = BenchReport()
    for m in methods:
        s = np.concatenate(collected[m])[:iters]
        report.timings[m] = MethodTiming(
            method=m,
            mean_ms=float(s.mean()),
            median_ms=float(statistics.median(s)),
            p95_ms=float(np.percentile(s, 95)),
            iterations=int(s.size),
            warmup=warmup,
        )
    return report
