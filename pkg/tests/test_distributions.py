import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from conftest import random_spd
from latgrowth.distributions import (
    LOG_2PI,
    binomial_logpmf,
    conditional_loglik,
    latent_logprior,
    log_binom,
    normal_logpdf,
)
from latgrowth.errors import InputError
from latgrowth.model import Item, ModelSpec, ParameterSet, linear_predictor


# --- binomial -----------------------------------------------------------------

def test_binomial_half_probability():
    assert binomial_logpmf(1, 2, 0.0) == pytest.approx(math.log(0.5), abs=1e-15)


def test_binomial_all_failures():
    assert binomial_logpmf(0, 8, 0.0) == pytest.approx(8 * math.log(0.5), abs=1e-14)


def test_binomial_against_50_digit_oracle():
    with mpmath.workdps(50):
        v = mpmath.mpf("0.7")
        p = mpmath.e**v / (1 + mpmath.e**v)
        oracle = mpmath.log(mpmath.binomial(8, 5) * p**5 * (1 - p) ** 3)
    assert binomial_logpmf(5, 8, 0.7) == pytest.approx(float(oracle), rel=1e-14)


@pytest.mark.parametrize("v", [-800.0, -40.0, 40.0, 800.0])
def test_binomial_stable_for_large_logits(v):
    with mpmath.workdps(60):
        vm = mpmath.mpf(v)
        oracle = mpmath.log(mpmath.binomial(6, 2)) + 2 * vm - 6 * mpmath.log(1 + mpmath.e**vm)
    got = binomial_logpmf(2, 6, v)
    assert math.isfinite(got)
    assert got == pytest.approx(float(oracle), rel=1e-13)


@pytest.mark.parametrize("y", [-1, 9, 2.5])
def test_binomial_out_of_range(y):
    with pytest.raises(InputError):
        binomial_logpmf(y, 8, 0.0)


@settings(max_examples=60, deadline=None)
@given(v=st.floats(-30, 30), n=st.integers(1, 60))
def test_binomial_pmf_sums_to_one(v, n):
    y = np.arange(n + 1)
    total = math.fsum(np.exp(binomial_logpmf(y, n, v)))
    assert abs(total - 1.0) < 1e-12


def test_log_binom_cached_matches_vector():
    assert log_binom(14, 6) == pytest.approx(math.log(math.comb(14, 6)), rel=1e-14)
    np.testing.assert_allclose(log_binom(np.array([14.0]), np.array([6.0])), [log_binom(14, 6)], rtol=1e-14)


# --- normal -------------------------------------------------------------------

def test_normal_at_mean_unit_variance():
    assert normal_logpdf(1.3, 1.3, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_normal_one_sigma_point():
    s2 = 2.5
    got = normal_logpdf(1.0 + math.sqrt(s2), 1.0, s2)
    assert got == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5 * math.log(s2) - 0.5, abs=1e-14)


def test_normal_reference_variance_cell():
    y, v, s2 = 23.98, 23.98 - 3, 10.080
    oracle = -0.5 * math.log(2 * math.pi * s2) - 9.0 / (2 * s2)
    assert normal_logpdf(y, v, s2) == pytest.approx(oracle, rel=1e-14)


@pytest.mark.parametrize("s2", [0.0, -1.0])
def test_normal_rejects_nonpositive_variance(s2):
    with pytest.raises(InputError):
        normal_logpdf(0.0, 0.0, s2)


@pytest.mark.parametrize("v, s2", [(0.0, 1.0), (23.98, 10.08), (-3.0, 0.01)])
def test_normal_integrates_to_one(v, s2):
    sd = math.sqrt(s2)
    total, _ = quad(lambda y: math.exp(normal_logpdf(y, v, s2)), v - 40 * sd, v + 40 * sd, points=[v])
    assert total == pytest.approx(1.0, abs=1e-10)


# --- conditional log-likelihood ----------------------------------------------

def _one_cell_spec():
    return ModelSpec(items=(Item("B", "binomial", 1, degree=0, trials=(5,)),), n_factors=1)


def test_conditional_single_binomial_cell():
    spec = _one_cell_spec()
    p = ParameterSet(np.array([0.2]), np.array([[1.0]]), (np.array([[0.7]]),), (None,))
    eta = np.array([0.4, -1.1])
    v = 0.4 + 0.7 * -1.1
    assert conditional_loglik([np.array([3.0])], eta, spec, p) == pytest.approx(binomial_logpmf(3, 5, v), abs=1e-15)


def test_conditional_model_a_cell_by_cell(model_a, truth_a):
    rng = np.random.default_rng(11)
    eta = rng.standard_normal(5)
    y_ne = np.array([3.0, 7.0, 2.0])
    y_am = np.array([22.5, 25.1, 19.0])
    total = 0.0
    for t in range(3):
        v = linear_predictor(model_a, truth_a, eta, "NE", t + 1)
        total += binomial_logpmf(y_ne[t], (8, 12, 14)[t], v)
        v = linear_predictor(model_a, truth_a, eta, "AM", t + 1)
        total += normal_logpdf(y_am[t], v, truth_a.variances[1][t])
    assert conditional_loglik([y_ne, y_am], eta, model_a, truth_a) == pytest.approx(total, rel=1e-14)


def test_conditional_normal_at_predictor():
    spec = ModelSpec(items=(Item("N", "normal", 3, degree=1),))
    s2 = np.array([1.0, 2.0, 4.0])
    p = ParameterSet(np.zeros(2), np.eye(2), (np.zeros((3, 0)),), (s2,))
    eta = np.array([1.0, 0.5])
    y = np.array([1.0, 1.5, 2.0])
    expected = np.sum(-0.5 * LOG_2PI - 0.5 * np.log(s2))
    assert conditional_loglik([y], eta, spec, p) == pytest.approx(expected, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_conditional_additive_over_items(seed):
    # reordering the items permutes the cells and leaves the sum unchanged
    rng = np.random.default_rng(seed)
    a = Item("B", "binomial", 2, degree=1, trials=(4, 6))
    b = Item("N", "normal", 2, degree=0)
    lam = 0.3 + rng.random(2)
    s2 = 0.5 + rng.random(2)
    eta_b, eta_n, z = rng.standard_normal(2), rng.standard_normal(1), rng.standard_normal(1)
    yb = rng.integers(0, 5, size=2).astype(float)
    yn = rng.standard_normal(2)
    s1 = ModelSpec(items=(a, b), n_factors=1)
    s2_ = ModelSpec(items=(b, a), n_factors=1, anchors=("B",))
    p1 = ParameterSet(np.zeros(3), np.eye(3), (np.full((2, 1), lam[0]), np.full((2, 1), lam[1])), (None, s2))
    p2 = ParameterSet(np.zeros(3), np.eye(3), (np.full((2, 1), lam[1]), np.full((2, 1), lam[0])), (s2, None))
    l1 = conditional_loglik([yb, yn], np.r_[eta_b, eta_n, z], s1, p1)
    l2 = conditional_loglik([yn, yb], np.r_[eta_n, eta_b, z], s2_, p2)
    assert l1 == pytest.approx(l2, rel=1e-13, abs=1e-13)


# --- latent prior -------------------------------------------------------------

def test_prior_at_mean_identity():
    d = 4
    assert latent_logprior(np.ones(d), np.ones(d), np.eye(d)) == pytest.approx(-0.5 * d * LOG_2PI, abs=1e-14)


def test_prior_one_dimensional():
    got = latent_logprior(np.array([3.0]), np.array([1.0]), np.array([[4.0]]))
    assert got == pytest.approx(-0.5 * LOG_2PI - 0.5 * math.log(4.0) - 0.5, abs=1e-14)


def test_prior_five_dimensional_high_precision():
    rng = np.random.default_rng(5)
    cov = random_spd(rng, 5)
    mean = rng.standard_normal(5)
    eta = rng.standard_normal(5)
    with mpmath.workdps(40):
        S = mpmath.matrix(cov.tolist())
        diff = mpmath.matrix((eta - mean).tolist())
        quadform = (diff.T * mpmath.inverse(S) * diff)[0]
        oracle = -mpmath.mpf(5) / 2 * mpmath.log(2 * mpmath.pi) - mpmath.log(mpmath.det(S)) / 2 - quadform / 2
    assert latent_logprior(eta, mean, cov) == pytest.approx(float(oracle), rel=1e-12)


def test_prior_rejects_non_pd():
    with pytest.raises(InputError, match="positive-definite"):
        latent_logprior(np.zeros(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1.0))
def test_prior_maximised_at_mean(seed, scale):
    rng = np.random.default_rng(seed)
    cov = random_spd(rng, 3)
    mean = rng.standard_normal(3)
    top = latent_logprior(mean, mean, cov)
    assert latent_logprior(mean + scale * rng.standard_normal(3), mean, cov) < top


def test_prior_accepts_stacked_rows():
    rng = np.random.default_rng(2)
    cov = random_spd(rng, 3)
    rows = rng.standard_normal((4, 3))
    stacked = latent_logprior(rows, np.zeros(3), cov)
    singles = [latent_logprior(r, np.zeros(3), cov) for r in rows]
    np.testing.assert_allclose(stacked, singles, rtol=1e-14)
