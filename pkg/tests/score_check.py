"""Analytic expected scores versus central differences of the same-grid E-step objective."""

import numpy as np

from latgrowth.em import (
    expected_complete_loglik,
    expected_score_gamma,
    expected_score_mu,
    expected_score_normal_loading,
    expected_score_psi,
    expected_score_sigma2,
    loadings_from_free,
    score_binomial_loading,
)


def central_difference(f, x, rel=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for k in range(x.size):
        h = rel * max(1.0, abs(x[k]))
        up, down = x.copy(), x.copy()
        up[k] += h
        down[k] -= h
        out[k] = (f(up) - f(down)) / (2.0 * h)
    return out


def score_pairs(data, spec, params, grid, post):
    """Yield (label, analytic, finite-difference) for every score block of the model."""
    Q = lambda p: expected_complete_loglik(data, spec, p, grid, post)  # noqa: E731
    db = spec.d_beta

    s_mu = expected_score_mu(data, spec, params, grid, post)[:db]
    fd_mu = central_difference(lambda m: Q(params.replace(growth_mean=m)), params.growth_mean)
    yield "mu", s_mu, fd_mu

    S = expected_score_psi(data, spec, params, grid, post)[:db, :db]
    rows, cols = np.tril_indices(db)
    analytic = np.where(rows == cols, S[rows, cols], 2.0 * S[rows, cols])

    def q_psi(v):
        P = np.zeros((db, db))
        P[rows, cols] = v
        P = P + np.tril(P, -1).T
        return Q(params.replace(growth_cov=P))

    yield "psi", analytic, central_difference(q_psi, params.growth_cov[rows, cols])

    for j, it in enumerate(spec.items):
        mask = spec.loading_mask(j)
        if mask.any():
            free = params.loadings[j][mask]

            def q_lam(v, j=j):
                L = list(params.loadings)
                L[j] = loadings_from_free(spec, j, v)
                return Q(params.replace(loadings=tuple(L)))

            f = score_binomial_loading if it.family == "binomial" else expected_score_normal_loading
            yield f"lambda[{it.name}]", f(data, spec, params, grid, j, post), central_difference(q_lam, free)
        if it.family == "normal":
            v0 = params.variances[j]
            free = v0[:1] if it.residuals == "homoscedastic" else v0

            def q_s2(v, j=j, T=it.occasions):
                V = list(params.variances)
                V[j] = np.broadcast_to(v, (T,)).copy()
                return Q(params.replace(variances=tuple(V)))

            yield f"sigma2[{it.name}]", expected_score_sigma2(data, spec, params, grid, j, post), central_difference(q_s2, free)
        if it.covariates:

            def q_gam(v, j=j):
                C = list(params.coefs)
                C[j] = v
                return Q(params.replace(coefs=tuple(C)))

            yield f"gamma[{it.name}]", expected_score_gamma(data, spec, params, grid, j, post), central_difference(q_gam, params.coefs[j])


def max_relative_error(analytic, fd, floor=1e-3):
    """Largest |a - f| / max(|f|, floor * max|f|, 1e-8) over the components."""
    analytic, fd = np.asarray(analytic), np.asarray(fd)
    scale = np.maximum(np.abs(fd), max(floor * np.max(np.abs(fd)), 1e-8))
    return float(np.max(np.abs(analytic - fd) / scale))
