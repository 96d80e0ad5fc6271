"""Conditional log-densities of the responses and the latent log-prior.

The scalar functions accept numpy arrays and broadcast.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .errors import InputError
from .model import ModelSpec, ParameterSet, design_matrix

LOG_2PI = np.log(2.0 * np.pi)


def softplus(v):
    """``log(1 + exp(v))`` without overflow."""
    return np.logaddexp(0.0, v)


def expit(v):
    v = np.asarray(v, dtype=float)
    return np.exp(-softplus(-v))


@lru_cache(maxsize=4096)
def _log_binom_scalar(n: int, y: int) -> float:
    return float(gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1))


def log_binom(n, y):
    """Log binomial coefficient; scalar calls are cached."""
    if np.ndim(n) == 0 and np.ndim(y) == 0:
        return _log_binom_scalar(int(n), int(y))
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    return gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)


def binomial_logpmf(y, n_trials, v):
    """Binomial log-probability of ``y`` successes out of ``n_trials`` with logit ``v``."""
    y_arr = np.asarray(y, dtype=float)
    n_arr = np.asarray(n_trials, dtype=float)
    if np.any(y_arr < 0) or np.any(y_arr > n_arr) or np.any(y_arr != np.round(y_arr)):
        raise InputError("binomial count outside [0, trials]")
    out = log_binom(n_trials, y) + y_arr * v - n_arr * softplus(v)
    return float(out) if np.ndim(out) == 0 else out


def normal_logpdf(y, v, sigma2):
    s2 = np.asarray(sigma2, dtype=float)
    if np.any(~(s2 > 0)):
        raise InputError("normal variance must be positive")
    out = -0.5 * LOG_2PI - 0.5 * np.log(s2) - (np.asarray(y) - v) ** 2 / (2.0 * s2)
    return float(out) if np.ndim(out) == 0 else out


def conditional_loglik(
    responses: list[np.ndarray] | tuple[np.ndarray, ...],
    eta: np.ndarray,
    spec: ModelSpec,
    params: ParameterSet,
    covariates=None,
) -> float:
    """``log g(y_i | eta)`` for one individual.

    ``responses[j]`` holds the T_j observations of item j; ``covariates[j]``
    the raw (T_j, b_j) covariate values or None.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (spec.d,):
        raise InputError(f"latent vector must have length {spec.d}")
    total = 0.0
    for j, it in enumerate(spec.items):
        y = np.asarray(responses[j], dtype=float)
        v = design_matrix(spec, params, j) @ eta
        x = None if covariates is None else covariates[j]
        if it.covariates:
            if x is None:
                raise InputError(f"item {it.name!r} needs covariates")
            X = it.covariate_design(np.asarray(x, dtype=float)[None])[0]
            v = v + X @ params.coefs[j]
        if it.family == "binomial":
            total += float(np.sum(binomial_logpmf(y, np.asarray(it.trials), v)))
        else:
            total += float(np.sum(normal_logpdf(y, v, params.variances[j])))
    return total


def latent_logprior(eta, mean, cov) -> float | np.ndarray:
    """Multivariate normal log-density including the normalising constant.

    ``eta`` may be a single vector or a stack of row vectors.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        C = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise InputError("latent covariance is not positive-definite") from None
    diff = np.atleast_2d(np.asarray(eta, dtype=float) - np.asarray(mean, dtype=float))
    sol = solve_triangular(C, diff.T, lower=True)
    d = cov.shape[0]
    out = -0.5 * d * LOG_2PI - np.sum(np.log(np.diag(C))) - 0.5 * np.sum(sol**2, axis=0)
    return float(out[0]) if np.ndim(eta) == 1 else out
