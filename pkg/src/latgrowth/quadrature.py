"""Gauss-Hermite integration over the latent prior.

The latent prior N(mu, Psi) is integrated with a tensor-product
Gauss-Hermite rule mapped through the Cholesky factor of Psi::

    eta_g = mu + sqrt(2) * C u_g,        weight_g = prod_k w_{g_k} / pi^(d/2)

Evaluation of the conditional log-likelihood on the node set is vectorised
over individuals and nodes.  Items without covariates take a fast path in
which the per-node linear predictors are shared by every individual.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .distributions import LOG_2PI, log_binom, softplus
from .errors import InputError, NotPositiveDefiniteError, NumericalError
from .model import ModelSpec, PanelDataset, ParameterSet

MAX_ORDER = 50


def gauss_hermite_rule(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the m-point rule for the weight ``exp(-u**2)``.

    Golub-Welsch: the nodes are the eigenvalues of the symmetric Jacobi
    matrix of the Hermite recurrence, the weights ``sqrt(pi)`` times the
    squared first components of the normalised eigenvectors.
    """
    if int(m) != m or not 1 <= m <= MAX_ORDER:
        raise InputError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {m}")
    m = int(m)
    if m == 1:
        return np.zeros(1), np.array([math.sqrt(math.pi)])
    off = np.sqrt(np.arange(1, m) / 2.0)
    nodes, vecs = eigh_tridiagonal(np.zeros(m), off)
    weights = math.sqrt(math.pi) * vecs[0, :] ** 2
    # exact symmetry; the eigen-solver leaves ~1e-16 asymmetry
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if m % 2:
        nodes[m // 2] = 0.0
    return nodes, weights


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Tensor-product nodes transformed through the current latent prior.

    ``std_nodes`` are the raw Hermite nodes (G, d), ``log_weights`` the log
    of the normalised product weights (they sum to one), ``chol`` the lower
    Cholesky factor of the latent covariance and ``nodes`` the transformed
    latent points ``mean + sqrt(2) * std_nodes @ chol.T``.
    """

    order: int
    std_nodes: np.ndarray
    log_weights: np.ndarray
    mean: np.ndarray
    chol: np.ndarray
    nodes: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def standard_grid(d: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Untransformed tensor grid: nodes (m**d, d) and normalised log-weights."""
    u, w = gauss_hermite_rule(m)
    logw = np.log(w) - 0.5 * math.log(math.pi)
    if d == 0:
        return np.zeros((1, 0)), np.zeros(1)
    idx = np.array(list(itertools.product(range(m), repeat=d)))
    return u[idx], logw[idx].sum(axis=1)


def grid_from_moments(mean: np.ndarray, cov: np.ndarray, m: int, block: str = "latent covariance") -> QuadratureGrid:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    try:
        C = np.linalg.cholesky(cov) if cov.size else np.zeros((0, 0))
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(block) from None
    U, logw = standard_grid(len(mean), m)
    nodes = mean[None, :] + math.sqrt(2.0) * U @ C.T
    return QuadratureGrid(m, U, logw, mean, C, nodes)


def build_grid(spec: ModelSpec, params: ParameterSet, m: int = 5) -> QuadratureGrid:
    """Grid for the latent prior implied by ``params``.

    The factor block has identity covariance and no cross-covariance with
    the growth block, so the Cholesky factor is block-diagonal and only the
    growth block is factorised.
    """
    db, q = spec.d_beta, spec.n_factors
    if params.growth_cov.shape != (db, db):
        raise InputError("growth covariance does not match the model")
    try:
        Cb = np.linalg.cholesky(params.growth_cov)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("growth covariance (Psi_beta block)") from None
    C = np.zeros((db + q, db + q))
    C[:db, :db] = Cb
    C[db:, db:] = np.eye(q)
    U, logw = standard_grid(db + q, m)
    mean = params.latent_mean()
    nodes = mean[None, :] + math.sqrt(2.0) * U @ C.T
    return QuadratureGrid(m, U, logw, mean, C, nodes)


# ---------------------------------------------------------------------------
# conditional log-likelihood on the node set
# ---------------------------------------------------------------------------

def node_predictors(spec: ModelSpec, params: ParameterSet, nodes: np.ndarray, j: int) -> np.ndarray:
    """Linear predictors without covariate terms at every node: (G, T_j)."""
    it = spec.items[j]
    beta = nodes[:, spec.growth_slices[j]]
    z = nodes[:, spec.factor_slice]
    return beta @ it.growth_design.T + z @ params.loadings[j].T


def item_offsets(spec: ModelSpec, params: ParameterSet, data: PanelDataset, j: int) -> np.ndarray | None:
    """Covariate contribution ``gamma . x`` per individual and occasion (n, T_j), or None."""
    it = spec.items[j]
    if not it.covariates:
        return None
    X = it.covariate_design(data.covariates[j])
    return X @ params.coefs[j]


def _chunks(n: int, G: int, T: int, budget: int = 1 << 22):
    step = max(1, budget // max(1, G * T))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def item_node_loglik(
    spec: ModelSpec, params: ParameterSet, data: PanelDataset, nodes: np.ndarray, j: int
) -> np.ndarray:
    """``sum_t log g(y_tji | eta_g)`` for every individual and node: (n, G)."""
    it = spec.items[j]
    Y = np.asarray(data.responses[j], dtype=float)
    V0 = node_predictors(spec, params, nodes, j)
    O = item_offsets(spec, params, data, j)
    n, G = Y.shape[0], V0.shape[0]
    if it.family == "binomial":
        n_t = np.asarray(it.trials, dtype=float)
        const = log_binom(n_t[None, :], Y).sum(axis=1)
        if O is None:
            return Y @ V0.T - (softplus(V0) @ n_t)[None, :] + const[:, None]
        out = np.empty((n, G))
        for sl in _chunks(n, G, it.occasions):
            V = V0[None, :, :] + O[sl, None, :]
            out[sl] = np.einsum("it,igt->ig", Y[sl], V) - softplus(V) @ n_t
        return out + const[:, None]
    s2 = np.asarray(params.variances[j], dtype=float)
    const = -0.5 * np.sum(LOG_2PI + np.log(s2))
    if O is None:
        return (
            const
            - 0.5 * ((Y**2) @ (1.0 / s2))[:, None]
            + (Y / s2) @ V0.T
            - 0.5 * ((V0**2) @ (1.0 / s2))[None, :]
        )
    out = np.empty((n, G))
    for sl in _chunks(n, G, it.occasions):
        R = (Y[sl] - O[sl])[:, None, :] - V0[None, :, :]
        out[sl] = const - 0.5 * (R**2) @ (1.0 / s2)
    return out


def node_loglik(spec: ModelSpec, params: ParameterSet, data: PanelDataset, nodes: np.ndarray) -> np.ndarray:
    """``log g(y_i | eta_g)`` summed over items: (n, G).

    Items without covariates are expanded as ``a_i + b_g + y_i . c_g`` and
    evaluated together in one matrix product.
    """
    G = nodes.shape[0]
    row = np.zeros(data.n)
    col = np.zeros(G)
    left, right, general = [], [], []
    for j, it in enumerate(spec.items):
        if it.covariates:
            general.append(j)
            continue
        Y = np.asarray(data.responses[j], dtype=float)
        V0 = node_predictors(spec, params, nodes, j)
        if it.family == "binomial":
            n_t = np.asarray(it.trials, dtype=float)
            row += log_binom(n_t[None, :], Y).sum(axis=1)
            col -= softplus(V0) @ n_t
            left.append(Y)
        else:
            s2 = np.asarray(params.variances[j], dtype=float)
            row += -0.5 * np.sum(LOG_2PI + np.log(s2)) - 0.5 * ((Y**2) @ (1.0 / s2))
            col -= 0.5 * ((V0**2) @ (1.0 / s2))
            left.append(Y / s2)
        right.append(V0)
    if left:
        total = np.hstack(left) @ np.hstack(right).T
        total += col[None, :]
        total += row[:, None]
    else:
        total = np.zeros((data.n, G))
    for j in general:
        total += item_node_loglik(spec, params, data, nodes, j)
    return total


@dataclass(frozen=True, eq=False)
class Posterior:
    """Posterior node weights per individual (n, G) and the log-marginals log f(y_i)."""

    weights: np.ndarray
    log_marginals: np.ndarray

    @property
    def loglik(self) -> float:
        return math.fsum(self.log_marginals)


def normalise(log_joint: np.ndarray) -> Posterior:
    shift = np.max(log_joint, axis=1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        bad = int(np.flatnonzero(~np.isfinite(shift[:, 0]))[0])
        raise NumericalError(f"posterior weights underflow for individual #{bad}")
    w = np.subtract(log_joint, shift)
    np.exp(w, out=w)
    s = w.sum(axis=1, keepdims=True)
    w /= s
    return Posterior(w, (shift + np.log(s))[:, 0])


def posterior(data: PanelDataset, spec: ModelSpec, params: ParameterSet, grid: QuadratureGrid) -> Posterior:
    """Posterior weights over the grid for every individual."""
    log_joint = node_loglik(spec, params, data, grid.nodes)
    log_joint += grid.log_weights[None, :]
    return normalise(log_joint)


def posterior_weights(
    data_i: PanelDataset, spec: ModelSpec, params: ParameterSet, grid: QuadratureGrid
) -> tuple[np.ndarray, float]:
    """Normalised posterior weights for a single individual and its log-marginal."""
    if data_i.n != 1:
        raise InputError("posterior_weights expects a single individual")
    post = posterior(data_i, spec, params, grid)
    return post.weights[0], float(post.log_marginals[0])


def marginal_loglik(data: PanelDataset, spec: ModelSpec, params: ParameterSet, grid: QuadratureGrid) -> float:
    """Sum of the individual log-marginals (compensated, order-independent summation)."""
    return posterior(data, spec, params, grid).loglik
