"""EM estimation with Gauss-Hermite quadrature.

One EM iteration freezes the quadrature grid built from the current latent
prior, computes posterior node weights (E-step) and then maximises the
expected complete-data log-likelihood

    Q(theta') = sum_i sum_g pi_ig [log g(y_i | eta_g; theta') + log h(eta_g; theta')]

with the nodes ``eta_g`` and weights ``pi_ig`` held fixed (M-step).  The
latent mean and growth covariance have closed forms, normal items are
updated by weighted least squares followed by the variance update, and
binomial items by a damped Newton-Raphson iteration.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .distributions import expit, latent_logprior, softplus
from .errors import (
    DegenerateVarianceWarning,
    InnerIterationError,
    InputError,
    NotPositiveDefiniteError,
    SingularDesignError,
    StandardErrorWarning,
)
from .model import ModelSpec, PanelDataset, ParameterSet, pack, parameter_names, unpack, validate
from .quadrature import (
    Posterior,
    QuadratureGrid,
    build_grid,
    item_offsets,
    node_loglik,
    normalise,
    posterior,
)

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class FitOptions:
    quad_order: int = 5
    max_iter: int = 500
    tol: float = 1e-5
    tol_loglik: float = 1e-7
    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    seed: int = 0
    jitter: float = 0.0
    compute_se: bool = True
    track_ascent: bool = False
    variance_floor: float = 1e-8

    def __post_init__(self):
        if self.tol <= 0 or self.tol_loglik <= 0 or self.newton_tol <= 0:
            raise InputError("tolerances must be positive")
        if self.max_iter < 1 or self.newton_max_iter < 1:
            raise InputError("iteration caps must be >= 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    spec: ModelSpec
    params: ParameterSet
    loglik_trace: tuple[float, ...]
    converged: bool
    reason: str
    n_iter: int
    n_obs: int
    standard_errors: dict[str, float] | None
    ascent_trace: tuple[float, ...] = ()
    se_message: str = ""
    options: FitOptions = field(default_factory=FitOptions)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def n_free(self) -> int:
        return self.spec.n_free()

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_free

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + self.n_free * math.log(self.n_obs)

    def estimates(self) -> dict[str, float]:
        return dict(zip(parameter_names(self.spec), (float(v) for v in pack(self.spec, self.params))))


# ---------------------------------------------------------------------------
# per-item building blocks
# ---------------------------------------------------------------------------

def loading_design(spec: ModelSpec, j: int, nodes: np.ndarray) -> np.ndarray:
    """Derivative of the node predictors with respect to the free loadings: (G, T, n_free)."""
    mask = spec.loading_mask(j)
    z = nodes[:, spec.factor_slice]
    G, T = nodes.shape[0], mask.shape[0]
    if spec.loadings == "time-invariant":
        cols = np.flatnonzero(mask[0])
        return np.broadcast_to(z[:, None, cols], (G, T, len(cols)))
    ts, ks = np.nonzero(mask)
    out = np.zeros((G, T, len(ts)))
    for col, (t, k) in enumerate(zip(ts, ks)):
        out[:, t, col] = z[:, k]
    return out


def loadings_from_free(spec: ModelSpec, j: int, free: np.ndarray) -> np.ndarray:
    mask = spec.loading_mask(j)
    L = np.zeros(mask.shape)
    L[mask] = free
    if spec.loadings == "time-invariant":
        L[:] = L[0]
    return L


def growth_part(spec: ModelSpec, nodes: np.ndarray, j: int) -> np.ndarray:
    """Growth-curve part of the predictor at every node: (G, T_j)."""
    return nodes[:, spec.growth_slices[j]] @ spec.items[j].growth_design.T


def _covariate_design(spec: ModelSpec, data: PanelDataset, j: int) -> np.ndarray | None:
    it = spec.items[j]
    return it.covariate_design(data.covariates[j]) if it.covariates else None


def _chunks(n: int, G: int, T: int, budget: int = 1 << 22):
    step = max(1, budget // max(1, G * T))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


@dataclass
class _ItemDerivs:
    """Posterior-weighted first derivatives of log g with respect to the cell predictors."""

    by_node: np.ndarray  # (G, T): sum_i pi_ig dlog g / dv
    by_person: np.ndarray  # (n, T): sum_g pi_ig dlog g / dv
    log_variance: np.ndarray | None  # (T,): d/d log sigma2_t, normal items only


def _item_derivs(spec, params, data, nodes, weights, j) -> _ItemDerivs:
    it = spec.items[j]
    Y = np.asarray(data.responses[j], dtype=float)
    A = growth_part(spec, nodes, j)
    C = A + nodes[:, spec.factor_slice] @ params.loadings[j].T
    O = item_offsets(spec, params, data, j)
    N = weights.sum(axis=0)
    if it.family == "binomial":
        n_t = np.asarray(it.trials, dtype=float)
        if O is None:
            P = expit(C)
            return _ItemDerivs(weights.T @ Y - N[:, None] * n_t * P, Y - n_t * (weights @ P), None)
        by_node = np.zeros_like(C)
        by_person = np.zeros_like(Y)
        for sl in _chunks(data.n, C.shape[0], it.occasions):
            R = Y[sl, None, :] - n_t * expit(C[None] + O[sl, None, :])
            by_node += np.einsum("ig,igt->gt", weights[sl], R)
            by_person[sl] = np.einsum("ig,igt->it", weights[sl], R)
        return _ItemDerivs(by_node, by_person, None)
    s2 = np.asarray(params.variances[j], dtype=float)
    R0 = Y if O is None else Y - O
    Ec = weights @ C
    by_person = (R0 - Ec) / s2
    if O is None:
        by_node = (weights.T @ Y - N[:, None] * C) / s2
    else:
        by_node = (weights.T @ R0 - N[:, None] * C) / s2
    sq = _expected_sq_residual(R0, C, weights)
    return _ItemDerivs(by_node, by_person, -0.5 * data.n + 0.5 * sq.sum(axis=0) / s2)


def _expected_sq_residual(R0: np.ndarray, C: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """E[(r_it - c_tg)^2] under each individual's posterior: (n, T).

    Shifted by the pooled mean of ``c`` per occasion to limit cancellation.
    """
    kappa = C.mean(axis=0)
    Cs = C - kappa
    Rs = R0 - kappa
    T = C.shape[1]
    both = weights @ np.hstack([Cs, Cs**2])
    Ec, Ec2 = both[:, :T], both[:, T:]
    return np.maximum(Rs**2 - 2.0 * Rs * Ec + Ec2, 0.0)


# ---------------------------------------------------------------------------
# E-step objective and expected scores
# ---------------------------------------------------------------------------

def _post(data, spec, params, grid, post):
    return posterior(data, spec, params, grid) if post is None else post


def expected_complete_loglik(
    data: PanelDataset,
    spec: ModelSpec,
    params: ParameterSet,
    grid: QuadratureGrid,
    post: Posterior,
) -> float:
    """Q(params) with nodes and posterior weights held fixed."""
    N = post.weights.sum(axis=0)
    prior = latent_logprior(grid.nodes, params.latent_mean(), params.latent_cov())
    cond = node_loglik(spec, params, data, grid.nodes)
    return math.fsum(N * prior) + math.fsum(np.sum(post.weights * cond, axis=1))


def expected_score_mu(data, spec, params, grid, post=None) -> np.ndarray:
    """Sum over individuals of E[Psi^-1 (eta - mu)]; factor components included but never used."""
    post = _post(data, spec, params, grid, post)
    N = post.weights.sum(axis=0)
    diff = grid.nodes - params.latent_mean()
    return np.linalg.solve(params.latent_cov(), diff.T @ N)


def expected_score_psi(data, spec, params, grid, post=None) -> np.ndarray:
    """Sum over individuals of E[-1/2 Psi^-1 + 1/2 Psi^-1 (eta-mu)(eta-mu)' Psi^-1].

    The derivative is taken treating the entries of Psi as unconstrained, so a
    symmetric perturbation of an off-diagonal element picks up twice the entry.
    """
    post = _post(data, spec, params, grid, post)
    N = post.weights.sum(axis=0)
    Pinv = np.linalg.inv(params.latent_cov())
    diff = grid.nodes - params.latent_mean()
    S = (diff * N[:, None]).T @ diff
    out = -0.5 * N.sum() * Pinv + 0.5 * Pinv @ S @ Pinv
    return 0.5 * (out + out.T)


def _loading_score(spec, params, data, grid, post, j):
    d = _item_derivs(spec, params, data, grid.nodes, post.weights, j)
    Zl = loading_design(spec, j, grid.nodes)
    return np.einsum("gt,gtl->l", d.by_node, Zl)


def score_binomial_loading(data, spec, params, grid, item, post=None) -> np.ndarray:
    """Expected score of a binomial item's free loadings, summed over individuals."""
    j = spec.item_index(item)
    if spec.items[j].family != "binomial":
        raise InputError(f"item {spec.items[j].name!r} is not binomial")
    return _loading_score(spec, params, data, grid, _post(data, spec, params, grid, post), j)


def expected_score_normal_loading(data, spec, params, grid, item, post=None) -> np.ndarray:
    """Expected score of a normal item's free loadings: sum_t E[z (y - v)] / sigma2_t."""
    j = spec.item_index(item)
    if spec.items[j].family != "normal":
        raise InputError(f"item {spec.items[j].name!r} is not normal")
    return _loading_score(spec, params, data, grid, _post(data, spec, params, grid, post), j)


def expected_score_sigma2(data, spec, params, grid, item, post=None) -> np.ndarray:
    """Expected score of the residual variances: E[-(sigma2 - (y - v)^2) / (2 sigma2^2)].

    Returns one entry per free variance (a single pooled entry under the
    homoscedastic scheme).
    """
    j = spec.item_index(item)
    it = spec.items[j]
    if it.family != "normal":
        raise InputError(f"item {it.name!r} is not normal")
    post = _post(data, spec, params, grid, post)
    d = _item_derivs(spec, params, data, grid.nodes, post.weights, j)
    per_t = d.log_variance / np.asarray(params.variances[j])
    return per_t.sum(keepdims=True) if it.residuals == "homoscedastic" else per_t


def expected_score_gamma(data, spec, params, grid, item, post=None) -> np.ndarray:
    j = spec.item_index(item)
    X = _covariate_design(spec, data, j)
    if X is None:
        return np.zeros(0)
    post = _post(data, spec, params, grid, post)
    d = _item_derivs(spec, params, data, grid.nodes, post.weights, j)
    return np.einsum("it,itc->c", d.by_person, X)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def latent_statistics(post: Posterior, grid: QuadratureGrid) -> tuple[np.ndarray, np.ndarray, int]:
    """Sufficient statistics sum_i E[eta_i], sum_i E[eta_i eta_i'] and n."""
    N = post.weights.sum(axis=0)
    s1 = grid.nodes.T @ N
    s2 = (grid.nodes * N[:, None]).T @ grid.nodes
    return s1, s2, post.weights.shape[0]


def m_step_latent(sum_eta, sum_eta_outer, n: int, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form update of the growth means and growth covariance.

    Factor means stay at zero, the factor covariance at the identity and the
    growth/factor cross-covariance at zero; only the growth block is returned.
    """
    db = spec.d_beta
    mean = np.asarray(sum_eta, dtype=float)[:db] / n
    cov = np.asarray(sum_eta_outer, dtype=float)[:db, :db] / n - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            "growth covariance (Psi_beta block)",
            "updated growth covariance is not positive-definite; "
            "raise the quadrature order or check the data",
        ) from None
    return mean, cov


def _m_step_latent_centered(post: Posterior, grid: QuadratureGrid, spec: ModelSpec):
    # same update as m_step_latent, accumulated about the new mean for accuracy
    db = spec.d_beta
    N = post.weights.sum(axis=0)
    n = post.weights.shape[0]
    beta = grid.nodes[:, :db]
    mean = beta.T @ N / n
    diff = beta - mean
    cov = (diff * N[:, None]).T @ diff / n
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            "growth covariance (Psi_beta block)",
            "updated growth covariance is not positive-definite; "
            "raise the quadrature order or check the data",
        ) from None
    return mean, cov


class _BinomialObjective:
    """Expected binomial log-likelihood of one item as a function of (free loadings, gamma)."""

    def __init__(self, spec, data, nodes, weights, j):
        it = spec.items[j]
        self.Y = np.asarray(data.responses[j], dtype=float)
        self.n_t = np.asarray(it.trials, dtype=float)
        self.A = growth_part(spec, nodes, j)
        self.Zl = loading_design(spec, j, nodes)
        self.X = _covariate_design(spec, data, j)
        self.weights = weights
        self.N = weights.sum(axis=0)
        self.PY = weights.T @ self.Y
        self.nl = self.Zl.shape[2]
        self.nc = 0 if self.X is None else self.X.shape[2]

    def split(self, theta):
        return theta[: self.nl], theta[self.nl:]

    def __call__(self, theta, derivs: bool = True):
        lam, gam = self.split(theta)
        C = self.A + self.Zl @ lam
        Zl, n_t = self.Zl, self.n_t
        if self.X is None:
            value = float(np.sum(self.PY * C) - np.sum(self.N[:, None] * n_t * softplus(C)))
            if not derivs:
                return value
            P = expit(C)
            M = self.PY - self.N[:, None] * n_t * P
            K = self.N[:, None] * n_t * P * (1.0 - P)
            grad = np.einsum("gt,gtl->l", M, Zl)
            hess = -np.einsum("gt,gtl,gtm->lm", K, Zl, Zl)
            return value, grad, hess
        X, Y, W = self.X, self.Y, self.weights
        O = X @ gam
        nl, nc = self.nl, self.nc
        value = 0.0
        M = np.zeros_like(C)
        K = np.zeros_like(C)
        g_gam = np.zeros(nc)
        h_lg = np.zeros((nl, nc))
        h_gg = np.zeros((nc, nc))
        for sl in _chunks(Y.shape[0], C.shape[0], C.shape[1]):
            V = C[None] + O[sl, None, :]
            value += float(np.einsum("ig,igt->", W[sl], Y[sl, None, :] * V - n_t * softplus(V)))
            if not derivs:
                continue
            P = expit(V)
            R = Y[sl, None, :] - n_t * P
            Wt = n_t * P * (1.0 - P)
            M += np.einsum("ig,igt->gt", W[sl], R)
            K += np.einsum("ig,igt->gt", W[sl], Wt)
            Xs = X[sl]
            g_gam += np.einsum("it,itc->c", np.einsum("ig,igt->it", W[sl], R), Xs)
            Ki = np.einsum("ig,igt->it", W[sl], Wt)
            h_gg -= np.einsum("it,itc,itd->cd", Ki, Xs, Xs)
            if nl:
                KZ = np.einsum("ig,igt,gtl->itl", W[sl], Wt, Zl)
                h_lg -= np.einsum("itl,itc->lc", KZ, Xs)
        if not derivs:
            return value
        grad = np.concatenate([np.einsum("gt,gtl->l", M, Zl), g_gam])
        hess = np.zeros((nl + nc, nl + nc))
        hess[:nl, :nl] = -np.einsum("gt,gtl,gtm->lm", K, Zl, Zl)
        hess[:nl, nl:] = h_lg
        hess[nl:, :nl] = h_lg.T
        hess[nl:, nl:] = h_gg
        return value, grad, hess


def m_step_binomial_loadings(
    data: PanelDataset,
    spec: ModelSpec,
    params: ParameterSet,
    grid: QuadratureGrid,
    item,
    post: Posterior | None = None,
    options: FitOptions | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Newton-Raphson solution of the expected score equations of a binomial item.

    Solves for the free loadings and the item's covariate coefficients
    jointly, starting from the current values, with step halving whenever a
    full step lowers the expected log-likelihood.  Returns the (T, q)
    loading matrix and the coefficient vector.
    """
    options = options or FitOptions()
    j = spec.item_index(item)
    if spec.items[j].family != "binomial":
        raise InputError(f"item {spec.items[j].name!r} is not binomial")
    post = _post(data, spec, params, grid, post)
    obj = _BinomialObjective(spec, data, grid.nodes, post.weights, j)
    theta = np.concatenate([params.loadings[j][spec.loading_mask(j)], params.coefs[j]])
    if theta.size == 0:
        return params.loadings[j].copy(), params.coefs[j].copy()
    value, grad, hess = obj(theta)
    for _ in range(options.newton_max_iter):
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise SingularDesignError(
                f"item {spec.items[j].name!r}: singular Newton-Raphson Hessian (collinear covariates or collapsed factor)"
            ) from None
        scale = 1.0
        for _half in range(40):
            cand = theta + scale * step
            new_value = obj(cand, derivs=False)
            if new_value >= value - 1e-12 * abs(value):
                break
            scale *= 0.5
        else:
            raise InnerIterationError(
                f"item {spec.items[j].name!r}: line search failed", theta, float(np.linalg.norm(grad))
            )
        theta = cand
        if np.max(np.abs(scale * step)) < options.newton_tol:
            break
        value, grad, hess = obj(theta)
        if np.max(np.abs(grad)) < options.newton_tol:
            break
    else:
        _, grad, _ = obj(theta)
        if np.max(np.abs(grad)) > math.sqrt(options.newton_tol):
            raise InnerIterationError(
                f"item {spec.items[j].name!r}: Newton-Raphson did not converge in "
                f"{options.newton_max_iter} iterations",
                theta,
                float(np.linalg.norm(grad)),
            )
    lam, gam = obj.split(theta)
    return loadings_from_free(spec, j, lam), gam.copy()


def m_step_normal(
    data: PanelDataset,
    spec: ModelSpec,
    params: ParameterSet,
    grid: QuadratureGrid,
    item,
    post: Posterior | None = None,
    options: FitOptions | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form update of a normal item: (loadings (T, q), variances (T,), coefficients).

    Loadings and covariate coefficients come from the weighted normal
    equations at the current residual variances; the variances are then
    the posterior mean squared residuals at the new coefficients, pooled
    over occasions under the homoscedastic scheme.
    """
    options = options or FitOptions()
    j = spec.item_index(item)
    it = spec.items[j]
    if it.family != "normal":
        raise InputError(f"item {it.name!r} is not normal")
    post = _post(data, spec, params, grid, post)
    W = post.weights
    Y = np.asarray(data.responses[j], dtype=float)
    n = Y.shape[0]
    s = 1.0 / np.asarray(params.variances[j], dtype=float)
    A = growth_part(spec, grid.nodes, j)
    Zl = loading_design(spec, j, grid.nodes)
    X = _covariate_design(spec, data, j)
    N = W.sum(axis=0)
    nl = Zl.shape[2]
    nc = 0 if X is None else X.shape[2]
    lam = np.zeros(nl)
    gam = np.zeros(nc)
    if nl + nc:
        lhs = np.zeros((nl + nc, nl + nc))
        rhs = np.zeros(nl + nc)
        if nl:
            lhs[:nl, :nl] = np.einsum("t,g,gtl,gtm->lm", s, N, Zl, Zl)
            rhs[:nl] = np.einsum("t,gtl,gt->l", s, Zl, W.T @ Y - N[:, None] * A)
        if nc:
            Ea = W @ A
            lhs[nl:, nl:] = np.einsum("t,itc,itd->cd", s, X, X)
            rhs[nl:] = np.einsum("t,itc,it->c", s, X, Y - Ea)
            if nl:
                EZl = np.einsum("ig,gtl->itl", W, Zl)
                cross = np.einsum("t,itl,itc->lc", s, EZl, X)
                lhs[:nl, nl:] = cross
                lhs[nl:, :nl] = cross.T
        _check_gram(lhs, it.name, nl)
        theta = np.linalg.solve(lhs, rhs)
        lam, gam = theta[:nl], theta[nl:]
    L = loadings_from_free(spec, j, lam)
    C = A + grid.nodes[:, spec.factor_slice] @ L.T
    R0 = Y if X is None else Y - X @ gam
    sq = _expected_sq_residual(R0, C, W).sum(axis=0) / n
    if it.residuals == "homoscedastic":
        sq = np.full(it.occasions, sq.mean())
    floor = options.variance_floor * float(np.var(Y))
    if np.any(sq <= floor):
        warnings.warn(
            f"item {it.name!r}: residual variance at its floor {floor:.3g} (degenerate fit)",
            DegenerateVarianceWarning,
            stacklevel=2,
        )
        sq = np.maximum(sq, floor)
    return L, sq, gam


def _check_gram(lhs: np.ndarray, name: str, nl: int) -> None:
    scale = np.sqrt(np.abs(np.diag(lhs)))
    if np.any(scale == 0):
        raise SingularDesignError(f"item {name!r}: singular normal equations (factor collapsed or zero covariate)")
    normed = lhs / np.outer(scale, scale)
    if np.linalg.cond(normed) > 1e12:
        what = "factor collapsed" if nl and lhs.shape[0] == nl else "collinear covariates"
        raise SingularDesignError(f"item {name!r}: singular normal equations ({what})")


def check_covariate_design(spec: ModelSpec, data: PanelDataset) -> None:
    """Raise SingularDesignError when an item's covariates are collinear with its mean growth curve."""
    for j, it in enumerate(spec.items):
        if not it.covariates:
            continue
        X = it.covariate_design(data.covariates[j])
        n, T, c = X.shape
        B = np.broadcast_to(it.growth_design[None], (n, T, it.n_growth))
        D = np.concatenate([B, X], axis=2).reshape(n * T, -1)
        if np.linalg.matrix_rank(D) < D.shape[1]:
            raise SingularDesignError(
                f"item {it.name!r}: covariate design is collinear with the growth curve or itself"
            )


def m_step_covariates(data, spec, params, grid, post=None, options=None) -> tuple[np.ndarray, ...]:
    """Updated covariate coefficients for every item (normal: least squares, binomial: Newton-Raphson)."""
    check_covariate_design(spec, data)
    post = _post(data, spec, params, grid, post)
    out = []
    for j, it in enumerate(spec.items):
        if not it.covariates:
            out.append(params.coefs[j].copy())
        elif it.family == "binomial":
            out.append(m_step_binomial_loadings(data, spec, params, grid, j, post, options)[1])
        else:
            out.append(m_step_normal(data, spec, params, grid, j, post, options)[2])
    return tuple(out)


def m_step(data, spec, params, grid, post, options: FitOptions) -> ParameterSet:
    mean, cov = _m_step_latent_centered(post, grid, spec)
    loadings, variances, coefs = [], [], []
    for j, it in enumerate(spec.items):
        if it.family == "binomial":
            L, g = m_step_binomial_loadings(data, spec, params, grid, j, post, options)
            loadings.append(L)
            variances.append(None)
        else:
            L, v, g = m_step_normal(data, spec, params, grid, j, post, options)
            loadings.append(L)
            variances.append(v)
        coefs.append(g)
    return ParameterSet(mean, cov, tuple(loadings), tuple(variances), tuple(coefs))


def fixed_grid_loglik(
    data: PanelDataset, spec: ModelSpec, params: ParameterSet, grid: QuadratureGrid, grid_params: ParameterSet
) -> float:
    """Marginal log-likelihood of ``params`` approximated on a grid built for ``grid_params``.

    The node weights are reweighted by the prior ratio h(eta; params) / h(eta; grid_params),
    which is the quadrature approximation EM ascends within one iteration.
    """
    db = spec.d_beta
    beta = grid.nodes[:, :db]
    ratio = latent_logprior(beta, params.growth_mean, params.growth_cov) - latent_logprior(
        beta, grid_params.growth_mean, grid_params.growth_cov
    )
    log_joint = (grid.log_weights + ratio)[None, :] + node_loglik(spec, params, data, grid.nodes)
    return normalise(log_joint).loglik


# ---------------------------------------------------------------------------
# initialisation and the EM loop
# ---------------------------------------------------------------------------

def _transformed(it, Y) -> np.ndarray:
    if it.family == "normal":
        return Y
    n_t = np.asarray(it.trials, dtype=float)
    p = np.clip(Y / n_t, 0.5 / n_t, 1.0 - 0.5 / n_t)
    return np.log(p) - np.log1p(-p)


def initialize(data: PanelDataset, spec: ModelSpec, options: FitOptions | None = None) -> ParameterSet:
    """Moment-based starting values.

    Growth means come from least-squares fits of the occasion means (clamped
    empirical logits for binomial items) on the time scores; the growth
    covariance starts diagonal at the between-individual variance of
    individual least-squares coefficients; loadings start at 0.5, residual
    variances at half the occasion variances and covariate effects at zero.
    With ``options.jitter > 0`` every start value is perturbed by seeded noise.
    """
    options = options or FitOptions()
    data.check(spec)
    means, diag, loadings, variances, coefs = [], [], [], [], []
    for j, it in enumerate(spec.items):
        Y = np.asarray(data.responses[j], dtype=float)
        B = it.growth_design
        if it.family == "binomial":
            n_t = np.asarray(it.trials, dtype=float)
            p = np.clip(Y.mean(axis=0) / n_t, 0.5 / n_t, 1.0 - 0.5 / n_t)
            occ = np.log(p) - np.log1p(-p)
        else:
            occ = Y.mean(axis=0)
        means.append(np.linalg.lstsq(B, occ, rcond=None)[0])
        coef_i = np.linalg.lstsq(B, _transformed(it, Y).T, rcond=None)[0]
        diag.append(np.maximum(coef_i.var(axis=1), 1e-2))
        L = np.zeros((it.occasions, spec.n_factors))
        L[spec.loading_mask(j)] = 0.5
        if spec.loadings == "time-invariant":
            L[:] = L[0]
        loadings.append(L)
        if it.family == "normal":
            v = 0.5 * Y.var(axis=0)
            if it.residuals == "homoscedastic":
                v = np.full(it.occasions, v.mean())
            variances.append(np.maximum(v, 1e-6))
        else:
            variances.append(None)
        coefs.append(np.zeros(it.n_coefs))
    params = ParameterSet(np.concatenate(means), np.diag(np.concatenate(diag)), tuple(loadings), tuple(variances), tuple(coefs))
    if options.jitter > 0:
        rng = np.random.default_rng(options.seed)
        mean = params.growth_mean + options.jitter * rng.standard_normal(spec.d_beta) * np.sqrt(np.diag(params.growth_cov))
        cov = np.diag(np.diag(params.growth_cov) * np.exp(options.jitter * rng.standard_normal(spec.d_beta)))
        loadings = tuple(L * np.exp(options.jitter * rng.standard_normal()) for L in params.loadings)
        variances = tuple(
            None if v is None else v * np.exp(options.jitter * rng.standard_normal()) for v in params.variances
        )
        params = params.replace(growth_mean=mean, growth_cov=cov, loadings=loadings, variances=variances)
    return params


def _fix_signs(spec: ModelSpec, params: ParameterSet) -> ParameterSet:
    flip = np.ones(spec.n_factors)
    for k, name in enumerate(spec.anchors or ()):
        if params.loadings[spec.item_index(name)][0, k] < 0:
            flip[k] = -1.0
    if np.all(flip == 1.0):
        return params
    return params.replace(loadings=tuple(L * flip for L in params.loadings))


def fit(
    data: PanelDataset,
    spec: ModelSpec,
    options: FitOptions | None = None,
    start: ParameterSet | None = None,
) -> FitResult:
    """Maximum likelihood fit by EM.

    Converges when the largest absolute change of the free parameters is
    below ``options.tol`` and the change of the log-likelihood is below
    ``options.tol_loglik``.  Hitting ``max_iter`` returns a result with
    ``converged=False``; M-step failures propagate.
    """
    options = options or FitOptions()
    data.check(spec)
    check_covariate_design(spec, data)
    params = initialize(data, spec, options) if start is None else start
    problems = validate(spec, params)
    if start is not None and problems:
        raise InputError("invalid start values: " + "; ".join(problems))
    m = options.quad_order
    grid = build_grid(spec, params, m)
    post = posterior(data, spec, params, grid)
    trace = [post.loglik]
    ascent: list[float] = []
    converged, reason, it = False, "maximum number of iterations reached", 0
    vec = pack(spec, params)
    for it in range(1, options.max_iter + 1):
        new = m_step(data, spec, params, grid, post, options)
        if options.track_ascent:
            ascent.append(fixed_grid_loglik(data, spec, new, grid, params) - trace[-1])
        new_vec = pack(spec, new)
        grid = build_grid(spec, new, m)
        post = posterior(data, spec, new, grid)
        trace.append(post.loglik)
        dpar = float(np.max(np.abs(new_vec - vec))) if vec.size else 0.0
        dll = abs(trace[-1] - trace[-2])
        params, vec = new, new_vec
        if it % 25 == 0:
            log.debug("iteration %d: loglik %.8f, max change %.3g", it, trace[-1], dpar)
        if dpar < options.tol and dll < options.tol_loglik:
            converged, reason = True, "converged"
            break
    params = _fix_signs(spec, params)
    se, message = None, ""
    if options.compute_se:
        se, message = standard_errors(data, spec, params, m)
    return FitResult(
        spec=spec,
        params=params,
        loglik_trace=tuple(trace),
        converged=converged,
        reason=reason,
        n_iter=it,
        n_obs=data.n,
        standard_errors=se,
        ascent_trace=tuple(ascent),
        se_message=message,
        options=options,
    )


# ---------------------------------------------------------------------------
# standard errors
# ---------------------------------------------------------------------------

def _to_working(spec: ModelSpec, params: ParameterSet) -> np.ndarray:
    """Working parameterisation: Cholesky factor of Psi_beta and log residual variances."""
    L = np.linalg.cholesky(params.growth_cov)
    rows, cols = np.tril_indices(spec.d_beta)
    parts = [params.growth_mean, L[rows, cols]]
    for j, it in enumerate(spec.items):
        parts.append(params.loadings[j][spec.loading_mask(j)])
        if it.family == "normal":
            v = np.log(params.variances[j])
            parts.append(v[:1] if it.residuals == "homoscedastic" else v)
        parts.append(params.coefs[j])
    return np.concatenate(parts)


def _from_working(spec: ModelSpec, phi: np.ndarray) -> ParameterSet:
    db = spec.d_beta
    k = db * (db + 1) // 2
    L = np.zeros((db, db))
    L[np.tril_indices(db)] = phi[db:db + k]
    vec = phi.copy()
    vec[db:db + k] = (L @ L.T)[np.tril_indices(db)]
    pos = db + k
    for j, it in enumerate(spec.items):
        pos += spec.n_loadings(j)
        nv = spec.n_variances(j)
        vec[pos:pos + nv] = np.exp(phi[pos:pos + nv])
        pos += nv + it.n_coefs
    return unpack(spec, vec)


def _working_jacobian(spec: ModelSpec, phi: np.ndarray) -> np.ndarray:
    """d(natural parameters) / d(working parameters)."""
    db = spec.d_beta
    k = db * (db + 1) // 2
    J = np.eye(len(phi))
    rows, cols = np.tril_indices(db)
    L = np.zeros((db, db))
    L[rows, cols] = phi[db:db + k]
    for col, (a, b) in enumerate(zip(rows, cols)):
        E = np.zeros((db, db))
        E[a, b] = 1.0
        dP = E @ L.T + L @ E.T
        J[db:db + k, db + col] = dP[rows, cols]
    pos = db + k
    for j, it in enumerate(spec.items):
        pos += spec.n_loadings(j)
        nv = spec.n_variances(j)
        for r in range(pos, pos + nv):
            J[r, r] = math.exp(phi[r])
        pos += nv + it.n_coefs
    return J


def marginal_gradient(data: PanelDataset, spec: ModelSpec, params: ParameterSet, m: int) -> np.ndarray:
    """Analytic gradient of the quadrature log-likelihood in the working parameterisation.

    The nodes move with the parameters (eta_g = mu + sqrt(2) C u_g), so the
    gradient is the posterior expectation of the derivative of log g along
    the node map.
    """
    grid = build_grid(spec, params, m)
    post = posterior(data, spec, params, grid)
    W = post.weights
    db = spec.d_beta
    G_beta = np.zeros((grid.size, db))
    tail = []
    for j, it in enumerate(spec.items):
        d = _item_derivs(spec, params, data, grid.nodes, W, j)
        G_beta[:, spec.growth_slices[j]] += d.by_node @ it.growth_design
        Zl = loading_design(spec, j, grid.nodes)
        tail.append(np.einsum("gt,gtl->l", d.by_node, Zl))
        if it.family == "normal":
            tail.append(d.log_variance.sum(keepdims=True) if it.residuals == "homoscedastic" else d.log_variance)
        X = _covariate_design(spec, data, j)
        tail.append(np.zeros(0) if X is None else np.einsum("it,itc->c", d.by_person, X))
    g_mu = G_beta.sum(axis=0)
    g_L = SQRT2 * G_beta.T @ grid.std_nodes[:, :db]
    rows, cols = np.tril_indices(db)
    return np.concatenate([g_mu, g_L[rows, cols], *tail])


def observed_information(data, spec, params, m: int, rel_step: float = 1e-4) -> np.ndarray:
    """Negative Hessian of the log-likelihood in the working parameterisation (central differences of the gradient)."""
    phi = _to_working(spec, params)
    k = len(phi)
    H = np.zeros((k, k))
    for a in range(k):
        h = rel_step * max(1.0, abs(phi[a]))
        up, down = phi.copy(), phi.copy()
        up[a] += h
        down[a] -= h
        g_up = marginal_gradient(data, spec, _from_working(spec, up), m)
        g_down = marginal_gradient(data, spec, _from_working(spec, down), m)
        H[:, a] = (g_up - g_down) / (2.0 * h)
    return -0.5 * (H + H.T)


def standard_errors(
    data: PanelDataset, spec: ModelSpec, params: ParameterSet, m: int = 5
) -> tuple[dict[str, float] | None, str]:
    """Standard errors of the free parameters from the observed information.

    Returns ``(None, message)`` with a StandardErrorWarning when the
    information matrix is not positive-definite (boundary or
    non-identification).
    """
    try:
        info = observed_information(data, spec, params, m)
        chol = np.linalg.cholesky(info)
    except (np.linalg.LinAlgError, NotPositiveDefiniteError):
        msg = "Hessian is not negative-definite: parameters at a boundary or not identified"
        warnings.warn(msg, StandardErrorWarning, stacklevel=2)
        return None, msg
    inv_chol = np.linalg.inv(chol)
    cov_phi = inv_chol.T @ inv_chol
    J = _working_jacobian(spec, _to_working(spec, params))
    cov = J @ cov_phi @ J.T
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return dict(zip(parameter_names(spec), (float(s) for s in se))), ""


def with_options(options: FitOptions | None, **changes) -> FitOptions:
    return replace(options or FitOptions(), **changes)
