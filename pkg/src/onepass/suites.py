"""Oracle check suites: closed-form moments against brute-force references.

Each suite returns a :class:`SuiteResult` with the worst error seen and the
tolerance it was held to. ``onepass oracle-check`` and the acceptance tests
both run these.
"""

from dataclasses import dataclass, field

import numpy as np

from .gaussian import GaussianTensor
from .layers import Conv2DLayer, DenseLayer, Flatten, conv_moments, dense_moments, relu_moments
from .network import ModelSpec, RngStream, forward_moments
from .oracles import enumerate_layer_moments, mc_fit_logit_moments, quadrature_relu_moments

KEEP_PROBS = (0.3, 0.5, 0.8, 1.0)


@dataclass
class SuiteResult:
    name: str
    worst: float
    tolerance: float
    cases: int
    details: list = field(default_factory=list)

    @property
    def passed(self):
        return self.worst <= self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst {self.worst:.3e} (tol {self.tolerance:.1e})"


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    floor = 1e-12 * max(float(np.abs(b).max()), 1e-300)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def random_layer(gen, max_vars=16):
    """A random conv or dense layer with at most ``max_vars`` masks per output."""
    p = float(gen.choice(KEEP_PROBS))
    if gen.random() < 0.5:
        while True:
            kh, kw, c = (int(v) for v in gen.integers(1, 4, size=3))
            if kh * kw * c <= max_vars:
                break
        f = int(gen.integers(1, 4))
        H, W = kh + int(gen.integers(0, 3)), kw + int(gen.integers(0, 3))
        layer = Conv2DLayer(gen.normal(size=(kh, kw, c, f)), gen.normal(size=f), p)
        shape = (H, W, c)
    else:
        n_in, n_out = int(gen.integers(1, max_vars + 1)), int(gen.integers(1, 5))
        layer = DenseLayer(gen.normal(size=(n_in, n_out)), gen.normal(size=n_out), p)
        shape = (n_in,)
    g = GaussianTensor(gen.normal(size=shape), gen.uniform(0.01, 2.0, size=shape))
    return g, layer


def _closed_form(g, layer):
    return conv_moments(g, layer) if isinstance(layer, Conv2DLayer) else dense_moments(g, layer)


def _perturbed(layer, eps):
    w = layer.weights.copy()
    w.reshape(-1)[0] += eps
    return type(layer)(w, layer.bias, layer.keep_prob)


def enum_suite(seed=0, cases=200, tolerance=1e-9, perturb=0.0):
    """Closed-form layer moments vs exact mask enumeration.

    ``perturb`` shifts one weight of the closed-form side only; a sensitive
    suite must then fail.
    """
    gen = RngStream(seed, 101).gen
    worst = 0.0
    details = []
    for i in range(cases):
        g, layer = random_layer(gen)
        exact = enumerate_layer_moments(g, layer)
        approx = _closed_form(g, _perturbed(layer, perturb) if perturb else layer)
        err = max(_rel_err(approx.mean, exact.mean), _rel_err(approx.var, exact.var))
        details.append((i, type(layer).__name__, layer.keep_prob, err))
        worst = max(worst, err)
    return SuiteResult("enum", worst, tolerance, cases, details)


def relu_grid(points=21):
    ms = np.linspace(-6.0, 6.0, points)
    vs = np.geomspace(1e-6, 25.0, points)
    return [(m, v) for m in ms for v in vs]


def quadrature_suite(tolerance=1e-8, nodes=128):
    """Closed-form ReLU moments vs quadrature on a 21 x 21 (m, v) grid."""
    grid = relu_grid()
    ms = np.array([m for m, _ in grid])
    vs = np.array([v for _, v in grid])
    closed = relu_moments(GaussianTensor(ms, vs))
    worst = 0.0
    details = []
    for i, (m, v) in enumerate(grid):
        qm, qv = quadrature_relu_moments(m, v, nodes)
        err = max(abs(closed.mean[i] - qm), abs(closed.var[i] - qv))
        details.append((m, v, err))
        worst = max(worst, err)
    return SuiteResult("quadrature", worst, tolerance, len(grid), details)


def shallow_fixture(seed=0, input_shape=(6, 6, 2), class_count=3, keep_prob=0.5):
    """One 1x1 single-filter conv layer, flatten, dense.

    A 1x1 kernel with one filter gives conv outputs that depend on disjoint
    inputs and masks, so they stay independent and the layerwise moments are
    exact through the dense layer too.
    """
    gen = RngStream(seed, 202).gen
    c = input_shape[-1]
    conv = Conv2DLayer(gen.normal(size=(1, 1, c, 1)), gen.normal(size=1), keep_prob)
    n_feat = input_shape[0] * input_shape[1]
    dense = DenseLayer(
        gen.normal(size=(n_feat, class_count)) / np.sqrt(n_feat), gen.normal(size=class_count),
        keep_prob,
    )
    return ModelSpec(input_shape, [conv, Flatten(), dense], class_count)


def mc_suite(seed=0, inputs=10, T=200_000, n_se=4.0, model=None, prior_sigma=None):
    """Moment propagation vs fitted MC-dropout logits, in standard errors."""
    model = model or shallow_fixture(seed)
    gen = RngStream(seed, 303).gen
    if prior_sigma is None:
        prior_sigma = np.full(model.input_shape[-1], 0.5)
    root = RngStream(seed, 304)
    worst = 0.0
    details = []
    for i in range(inputs):
        x = gen.normal(size=model.input_shape)
        closed = forward_moments(model, x, prior_sigma)
        fit, se_mean, se_var = mc_fit_logit_moments(
            model, x, prior_sigma, T, root.substream(i), return_stderr=True
        )
        z_mean = np.abs(closed.mean - fit.mean) / se_mean
        z_var = np.abs(closed.var - fit.var) / se_var
        z = float(max(z_mean.max(), z_var.max()))
        details.append((i, float(z_mean.max()), float(z_var.max())))
        worst = max(worst, z)
    return SuiteResult("mc", worst, n_se, inputs, details)


SUITES = {
    "enum": enum_suite,
    "quadrature": lambda seed=0, **kw: quadrature_suite(**kw),
    "mc": mc_suite,
}
