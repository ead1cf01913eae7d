import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from onepass.gaussian import GaussianTensor
from onepass.layers import (
    Conv2DLayer,
    DenseLayer,
    Flatten,
    ReLU,
    _clamp_variance,
    conv_moments,
    dense_moments,
    layer_deterministic,
    layer_moments,
    layer_sampled,
    relu_moments,
)
from onepass.oracles import quadrature_relu_moments
from onepass.tensor import ShapeError, conv2d_valid


def test_single_weight_conv_example():
    layer = Conv2DLayer(np.full((1, 1, 1, 1), 3.0), [1.0], 0.5)
    out = conv_moments(GaussianTensor(np.full((1, 1, 1), 2.0), np.full((1, 1, 1), 0.25)), layer)
    assert out.mean.item() == pytest.approx(4.0, abs=1e-12)
    assert out.var.item() == pytest.approx(10.125, abs=1e-12)


def test_dense_matches_single_weight_conv():
    layer = DenseLayer(np.full((1, 1), 3.0), [1.0], 0.5)
    out = dense_moments(GaussianTensor([2.0], [0.25]), layer)
    assert (out.mean.item(), out.var.item()) == pytest.approx((4.0, 10.125))


def test_standard_normal_relu():
    out = relu_moments(GaussianTensor([0.0], [1.0]))
    assert out.mean.item() == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-7)
    assert out.var.item() == pytest.approx(0.5 - 1 / (2 * np.pi), abs=1e-7)


def test_relu_zero_variance_is_deterministic():
    out = relu_moments(GaussianTensor([-1.0, 0.0, 2.5, 1.0], [0.0, 0.0, 0.0, 1.0]))
    np.testing.assert_array_equal(out.mean[:3], [0.0, 0.0, 2.5])
    np.testing.assert_array_equal(out.var[:3], 0.0)
    assert out.var[3] > 0


def test_relu_far_tails():
    out = relu_moments(GaussianTensor([40.0, -40.0], [1.0, 1.0]))
    assert out.mean[0] == pytest.approx(40.0)
    assert out.var[0] == pytest.approx(1.0, rel=1e-12)
    assert out.mean[1] < 1e-300 and out.var[1] < 1e-300


def test_relu_matches_scipy_closed_form():
    m = np.linspace(-4, 4, 17)
    v = np.linspace(0.1, 4, 17)
    s = np.sqrt(v)
    r = m / s
    mean = m * norm.cdf(r) + s * norm.pdf(r)
    second = (m * m + v) * norm.cdf(r) + m * s * norm.pdf(r)
    out = relu_moments(GaussianTensor(m, v))
    np.testing.assert_allclose(out.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(out.var, second - mean ** 2, rtol=1e-9, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30), st.floats(1e-8, 100))
def test_relu_moment_bounds(m, v):
    out = relu_moments(GaussianTensor([m], [v]))
    mean, var = out.mean.item(), out.var.item()
    assert mean >= max(m, 0.0) - 1e-12 * max(1.0, abs(m))
    assert 0.0 <= var <= v * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-6, 6), st.floats(1e-4, 25))
def test_relu_against_quadrature(m, v):
    out = relu_moments(GaussianTensor([m], [v]))
    qm, qv = quadrature_relu_moments(m, v)
    assert out.mean.item() == pytest.approx(qm, abs=1e-8)
    assert out.var.item() == pytest.approx(qv, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0.2, 0.5, 0.9, 1.0]))
def test_conv_variance_non_negative_and_mean_linear(seed, p):
    gen = np.random.default_rng(seed)
    w = gen.normal(size=(2, 2, 2, 3))
    b = gen.normal(size=3)
    mu = gen.normal(size=(4, 4, 2)) * 3
    g = GaussianTensor(mu, gen.uniform(0, 2, size=mu.shape))
    out = conv_moments(g, Conv2DLayer(w, b, p))
    assert np.all(out.var >= 0)
    np.testing.assert_allclose(out.mean, conv2d_valid(mu * p, w, b), atol=1e-10)


def test_keep_one_zero_variance_is_plain_conv():
    gen = np.random.default_rng(3)
    w, b, x = gen.normal(size=(3, 3, 2, 2)), gen.normal(size=2), gen.normal(size=(5, 5, 2))
    out = conv_moments(GaussianTensor(x, np.zeros_like(x)), Conv2DLayer(w, b, 1.0))
    np.testing.assert_array_equal(out.var, 0.0)
    np.testing.assert_allclose(out.mean, conv2d_valid(x, w, b), atol=1e-12)


def test_clamp_variance():
    np.testing.assert_array_equal(_clamp_variance(np.array([-1e-15, 1.0])), [0.0, 1.0])
    with pytest.raises(ArithmeticError):
        _clamp_variance(np.array([-1e-6]))


@pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
def test_keep_prob_range(p):
    with pytest.raises(ValueError):
        DenseLayer(np.ones((2, 2)), np.zeros(2), p)


def test_layer_shape_validation():
    with pytest.raises(ShapeError):
        Conv2DLayer(np.ones((3, 3, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        Conv2DLayer(np.ones((3, 3, 1, 2)), np.zeros(3))
    with pytest.raises(ShapeError):
        DenseLayer(np.ones((2, 2)), np.zeros(2)).output_shape((3,))
    layer = Conv2DLayer(np.ones((3, 3, 1, 2)), np.zeros(2))
    assert layer.output_shape((5, 6, 1)) == (3, 4, 2)
    assert layer.bernoulli_count() == 9
    with pytest.raises(ShapeError):
        conv_moments(GaussianTensor(np.zeros((2, 2, 1)), np.zeros((2, 2, 1))), layer)


def test_sampled_layer_is_unbiased():
    gen = np.random.default_rng(11)
    layer = DenseLayer(gen.normal(size=(5, 2)), gen.normal(size=2), 0.3)
    x = gen.normal(size=5)
    samples = layer_sampled(np.broadcast_to(x, (200_000, 5)), layer, gen)
    exact = dense_moments(GaussianTensor(x, np.zeros(5)), layer)
    se = np.sqrt(exact.var / samples.shape[0])
    assert np.all(np.abs(samples.mean(axis=0) - exact.mean) < 5 * se)
    np.testing.assert_allclose(samples.var(axis=0), exact.var, rtol=0.02)


def test_layer_dispatch():
    g = GaussianTensor(np.ones((2, 2, 1)), np.ones((2, 2, 1)))
    assert layer_moments(g, Flatten()).shape == (4,)
    assert layer_moments(g, ReLU()).shape == (2, 2, 1)
    np.testing.assert_array_equal(layer_deterministic(np.array([-1.0, 2.0]), ReLU()), [0.0, 2.0])
    with pytest.raises(TypeError):
        layer_moments(g, object())
