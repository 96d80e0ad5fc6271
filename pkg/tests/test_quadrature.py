import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial.hermite import hermgauss

from conftest import random_params, small_mixed_spec
from latgrowth.distributions import conditional_loglik
from latgrowth.errors import InputError, NotPositiveDefiniteError
from latgrowth.model import Item, ModelSpec, PanelDataset, ParameterSet
from latgrowth.quadrature import (
    build_grid,
    gauss_hermite_rule,
    grid_from_moments,
    marginal_loglik,
    node_loglik,
    posterior,
    posterior_weights,
)
from latgrowth.simulate import SimConfig, simulate_dataset
from oracles import dense_marginal, tiny_factor_model


# --- one-dimensional rule ------------------------------------------------------

def test_rule_order_one():
    u, w = gauss_hermite_rule(1)
    np.testing.assert_array_equal(u, [0.0])
    assert w[0] == pytest.approx(math.sqrt(math.pi), rel=1e-15)


def test_rule_order_two_closed_form():
    u, w = gauss_hermite_rule(2)
    np.testing.assert_allclose(u, [-1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-15)
    np.testing.assert_allclose(w, [math.sqrt(math.pi) / 2] * 2, rtol=1e-14)


def test_rule_second_moment_order_ten():
    u, w = gauss_hermite_rule(10)
    assert np.sum(w * u**2) == pytest.approx(math.sqrt(math.pi) / 2, abs=1e-12)


@pytest.mark.parametrize("m", [3, 7, 20, 50])
def test_rule_matches_independent_implementation(m):
    u, w = gauss_hermite_rule(m)
    u_ref, w_ref = hermgauss(m)
    np.testing.assert_allclose(u, u_ref, atol=1e-12)
    np.testing.assert_allclose(w, w_ref, rtol=1e-9, atol=1e-300)


@pytest.mark.parametrize("m", [1, 2, 5, 9, 30, 50])
def test_rule_symmetric_and_positive(m):
    u, w = gauss_hermite_rule(m)
    assert np.all(w > 0)
    np.testing.assert_array_equal(u, -u[::-1])
    np.testing.assert_array_equal(w, w[::-1])


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 25), k=st.integers(0, 10))
def test_rule_moment_exactness(m, k):
    # int u^k e^{-u^2} du = Gamma((k+1)/2) for even k, 0 for odd k
    if k > 2 * m - 1:
        return
    u, w = gauss_hermite_rule(m)
    exact = math.gamma((k + 1) / 2) if k % 2 == 0 else 0.0
    assert np.sum(w * u**k) == pytest.approx(exact, rel=1e-11, abs=1e-11)


@pytest.mark.parametrize("m", [0, 51, 2.5])
def test_rule_order_out_of_range(m):
    with pytest.raises(InputError):
        gauss_hermite_rule(m)


# --- transformed grid ----------------------------------------------------------

def test_grid_unit_variance_two_points():
    g = grid_from_moments(np.zeros(1), np.eye(1), 2)
    assert np.sum(g.weights * g.nodes[:, 0] ** 2) == pytest.approx(1.0, abs=1e-12)


def test_grid_correlated_cross_moment():
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])
    g = grid_from_moments(np.zeros(2), cov, 3)
    assert np.sum(g.weights * g.nodes[:, 0] * g.nodes[:, 1]) == pytest.approx(0.8, abs=1e-10)


def test_grid_reproduces_reference_covariance(model_a, truth_a):
    g = build_grid(model_a, truth_a, 4)
    assert g.size == 4**5
    diff = g.nodes - truth_a.latent_mean()
    cov = (diff * g.weights[:, None]).T @ diff
    np.testing.assert_allclose(cov, truth_a.latent_cov(), atol=1e-8)
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 5))
def test_grid_polynomial_exactness(seed, m):
    # E[x_a^k] for a univariate projection: exact for k <= 2m - 1
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    cov = A @ A.T + 0.3 * np.eye(3)
    mean = rng.standard_normal(3)
    g = grid_from_moments(mean, cov, m)
    a = rng.standard_normal(3)
    x = (g.nodes - mean) @ a
    s2 = a @ cov @ a
    for k in range(2, 2 * m, 2):
        exact = s2 ** (k // 2) * math.prod(range(1, k, 2))
        assert np.sum(g.weights * x**k) == pytest.approx(exact, rel=1e-8)
    assert np.sum(g.weights * (g.nodes @ a)) == pytest.approx(mean @ a, rel=1e-10, abs=1e-10)


def test_build_grid_names_offending_block(model_a, truth_a):
    P = np.array(truth_a.growth_cov)
    P[0, 0] = -1.0
    with pytest.raises(NotPositiveDefiniteError) as info:
        build_grid(model_a, truth_a.replace(growth_cov=P), 3)
    assert "Psi_beta" in info.value.block


# --- posterior weights ---------------------------------------------------------

def test_posterior_equals_prior_when_likelihood_flat():
    # zero loading and a vanishing growth variance: every node gives the same predictor
    spec = ModelSpec(items=(Item("N", "normal", 2, degree=0),), n_factors=1)
    p = ParameterSet(np.array([0.5]), np.array([[1e-200]]), (np.zeros((2, 1)),), (np.ones(2),))
    data = PanelDataset(("1",), (np.array([[0.3, -0.2]]),))
    g = build_grid(spec, p, 4)
    assert np.ptp(node_loglik(spec, p, data, g.nodes)) == 0.0
    w, _ = posterior_weights(data, spec, p, g)
    np.testing.assert_allclose(w, g.weights, rtol=1e-12)


def test_posterior_conjugate_normal_mean():
    # y = z + e with z ~ N(0, 1), e ~ N(0, s2): posterior mean of z is y / (1 + s2)
    s2, y = 0.8, 1.7
    spec = ModelSpec(items=(Item("N", "normal", 1, degree=0),), n_factors=1)
    p = ParameterSet(np.array([0.0]), np.array([[1e-12]]), (np.array([[1.0]]),), (np.array([s2]),))
    data = PanelDataset(("1",), (np.array([[y]]),))
    g = build_grid(spec, p, 20)
    w, _ = posterior_weights(data, spec, p, g)
    assert np.sum(w * g.nodes[:, 1]) == pytest.approx(y / (1 + s2), abs=1e-6)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_posterior_conjugate_random_intercept():
    # y_t = b + e_t with b ~ N(mu, psi): posterior mean of b is a precision-weighted average
    mu, psi, s2 = 1.2, 0.7, 2.0
    y = np.array([2.0, 0.4])
    spec = ModelSpec(items=(Item("N", "normal", 2, degree=0, residuals="homoscedastic"),))
    p = ParameterSet(np.array([mu]), np.array([[psi]]), (np.zeros((2, 0)),), (np.full(2, s2),))
    data = PanelDataset(("1",), (y[None, :],))
    g = build_grid(spec, p, 30)
    w, _ = posterior_weights(data, spec, p, g)
    post_mean = (mu / psi + y.sum() / s2) / (1 / psi + 2 / s2)
    assert np.sum(w * g.nodes[:, 0]) == pytest.approx(post_mean, abs=1e-6)


def test_log_marginal_against_dense_grid():
    spec, p = tiny_factor_model()
    data = PanelDataset(("1",), (np.array([[4.0]]),))
    _, lm = posterior_weights(data, spec, p, build_grid(spec, p, 15))
    assert lm == pytest.approx(dense_marginal(4.0, spec, p), abs=1e-6)


def test_marginal_loglik_against_dense_grid():
    spec, p = tiny_factor_model()
    ys = np.array([[0.0], [2.0], [6.0], [3.0]])
    data = PanelDataset(tuple("abcd"), (ys,))
    oracle = math.fsum(dense_marginal(y, spec, p) for y in ys[:, 0])
    assert marginal_loglik(data, spec, p, build_grid(spec, p, 15)) == pytest.approx(oracle, abs=1e-6)


def test_posterior_weights_match_direct_evaluation():
    rng = np.random.default_rng(8)
    spec = small_mixed_spec(covariates=True)
    p = random_params(spec, rng)
    data, _ = simulate_dataset(SimConfig(spec, p, 3, seed=2))
    g = build_grid(spec, p, 3)
    for i in range(data.n):
        di = data.subset([i])
        w, lm = posterior_weights(di, spec, p, g)
        logs = np.array(
            [
                conditional_loglik([y[0] for y in di.responses], eta, spec, p, [x[0] for x in di.covariates])
                for eta in g.nodes
            ]
        ) + g.log_weights
        ref = np.logaddexp.reduce(logs)
        assert lm == pytest.approx(ref, rel=1e-12)
        np.testing.assert_allclose(w, np.exp(logs - ref), rtol=1e-10, atol=1e-300)


def test_posterior_weights_single_individual_only(model_a, truth_a):
    data, _ = simulate_dataset(SimConfig(model_a, truth_a, 2, seed=0))
    with pytest.raises(InputError):
        posterior_weights(data, model_a, truth_a, build_grid(model_a, truth_a, 2))


# --- marginal log-likelihood ---------------------------------------------------

@pytest.fixture(scope="module")
def sample_a():
    from latgrowth.presets import career_spec, reference_params

    spec = career_spec()
    p = reference_params(spec)
    data, _ = simulate_dataset(SimConfig(spec, p, 200, seed=21))
    return spec, p, data


def test_marginal_single_individual(sample_a):
    spec, p, data = sample_a
    g = build_grid(spec, p, 3)
    one = data.subset([5])
    assert marginal_loglik(one, spec, p, g) == posterior_weights(one, spec, p, g)[1]


def test_marginal_duplicated_dataset(sample_a):
    spec, p, data = sample_a
    g = build_grid(spec, p, 3)
    base = marginal_loglik(data, spec, p, g)
    doubled = data.subset(np.r_[np.arange(data.n), np.arange(data.n)])
    assert marginal_loglik(doubled, spec, p, g) == 2 * base
    quad_ = data.subset(np.tile(np.arange(data.n), 4))
    assert marginal_loglik(quad_, spec, p, g) == 4 * base


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_marginal_permutation_invariant(seed):
    from latgrowth.presets import career_spec, reference_params

    spec = career_spec()
    p = reference_params(spec)
    data, _ = simulate_dataset(SimConfig(spec, p, 60, seed=3))
    g = build_grid(spec, p, 3)
    perm = np.random.default_rng(seed).permutation(data.n)
    assert marginal_loglik(data.subset(perm), spec, p, g) == pytest.approx(
        marginal_loglik(data, spec, p, g), abs=1e-10
    )


def test_posterior_rows_sum_to_one(sample_a):
    spec, p, data = sample_a
    post = posterior(data, spec, p, build_grid(spec, p, 4))
    np.testing.assert_allclose(post.weights.sum(axis=1), 1.0, atol=1e-12)


@pytest.fixture(scope="module")
def order_sequence():
    """Log-likelihood of the first recovery-study dataset (n = 800) at orders 5..9."""
    from latgrowth.presets import career_spec, reference_params
    from study import STUDY_SEED, N_OBS

    spec = career_spec()
    p = reference_params(spec)
    data, _ = simulate_dataset(SimConfig(spec, p, N_OBS, seed=STUDY_SEED))
    out = []
    for m in range(5, 10):
        # chunk the individuals so the 9^5-node grid stays within memory
        out.append(math.fsum(
            marginal_loglik(data.subset(np.arange(k, min(k + 200, data.n))), spec, p, build_grid(spec, p, m))
            for k in range(0, data.n, 200)
        ))
    return np.array(out)


@pytest.mark.xfail(strict=True, reason="Gauss-Hermite error alternates between odd and even orders")
def test_quadrature_change_shrinks_monotonically(order_sequence):
    steps = np.abs(np.diff(order_sequence))
    assert np.all(np.diff(steps) < 0), steps

