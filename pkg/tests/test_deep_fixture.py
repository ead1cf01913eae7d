import numpy as np
import pytest

from onepass.data import accuracy_of
from onepass.network import RngStream, forward_moments
from onepass.oracles import mc_fit_logit_moments

pytestmark = pytest.mark.slow


def test_fixture_trains(deep):
    assert deep.losses[-1] < deep.losses[0]
    assert accuracy_of(deep.model, deep.data.test) > 0.8


@pytest.fixture(scope="module")
def moment_comparison(deep):
    """Per-logit moment and MC-dropout (T=5000) variances and mean gaps for 10 test inputs."""
    model, prior = deep.model, deep.data.train.prior_sigma
    ours_var, mc_var, mean_gap = [], [], []
    for i, x in enumerate(deep.data.test.inputs[:10]):
        g = forward_moments(model, x, prior)
        fit = mc_fit_logit_moments(model, x, prior, 5_000, RngStream(11, i))
        ours_var.append(g.var)
        mc_var.append(fit.var)
        mean_gap.append(np.abs(g.mean - fit.mean) / np.sqrt(fit.var))
    return np.concatenate(ours_var), np.concatenate(mc_var), np.concatenate(mean_gap)


def test_logit_means_track_mc_dropout(moment_comparison):
    _, _, gap = moment_comparison
    assert gap.max() < 0.5


@pytest.mark.xfail(strict=True, reason=(
    "independence across units ignores correlations from shared masks and inputs; "
    "the four-conv fixture's pooled variance ratio is about 0.73"
))
def test_logit_variance_within_quarter_of_mc_dropout(moment_comparison):
    ours, mc, _ = moment_comparison
    assert 0.75 <= ours.sum() / mc.sum() <= 1.25


def test_logit_variance_bias_stays_in_measured_band(moment_comparison):
    """Regression guard on the measured underestimate (per-logit ratios 0.63 to 0.83)."""
    ours, mc, _ = moment_comparison
    ratio = ours / mc
    assert 0.55 <= ratio.min() and ratio.max() <= 1.0
    assert 0.65 <= ours.sum() / mc.sum() <= 0.85
