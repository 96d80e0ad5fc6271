"""Post-fit summaries: implied covariances, standardized loadings, margin fit, correlation checks."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from .distributions import expit
from .errors import InputError, SparseCellWarning
from .model import ModelSpec, PanelDataset, ParameterSet
from .quadrature import build_grid, item_offsets, node_predictors

SPARSE_EXPECTED = 1e-10


def _cell(spec: ModelSpec, cell) -> tuple[int, int]:
    item, occasion = cell
    j = spec.item_index(item)
    T = spec.items[j].occasions
    if not 1 <= int(occasion) <= T:
        raise InputError(f"item {spec.items[j].name!r} has occasions 1..{T}, got {occasion}")
    return j, int(occasion) - 1


def _growth_row(spec: ModelSpec, j: int, t: int) -> np.ndarray:
    w = np.zeros(spec.d_beta)
    w[spec.growth_slices[j]] = spec.items[j].growth_design[t]
    return w


def implied_predictor_covariance(spec: ModelSpec, params: ParameterSet, cell_a, cell_b) -> float:
    """Cov(v_a, v_b) for two (item, 1-based occasion) cells: growth part plus factor part."""
    ja, ta = _cell(spec, cell_a)
    jb, tb = _cell(spec, cell_b)
    wa, wb = _growth_row(spec, ja, ta), _growth_row(spec, jb, tb)
    P = params.growth_cov
    # averaged over both orders so the result is exactly symmetric in the two cells
    growth = 0.5 * (float(wa @ P @ wb) + float(wb @ P @ wa))
    return growth + float(params.loadings[ja][ta] @ params.loadings[jb][tb])


def implied_predictor_matrix(spec: ModelSpec, params: ParameterSet) -> tuple[list[tuple[str, int]], np.ndarray]:
    """Covariance of all linear predictors, in item-then-occasion order."""
    cells = [(it.name, t + 1) for it in spec.items for t in range(it.occasions)]
    rows = []
    for j, it in enumerate(spec.items):
        for t in range(it.occasions):
            rows.append(np.concatenate([_growth_row(spec, j, t), params.loadings[j][t]]))
    W = np.array(rows)
    M = W @ params.latent_cov() @ W.T
    return cells, 0.5 * (M + M.T)


def _standardized(spec, params, item, occasion, family, extra) -> np.ndarray:
    j, t = _cell(spec, (item, occasion))
    it = spec.items[j]
    if it.family != family:
        raise InputError(f"item {it.name!r} is not {family}")
    w = _growth_row(spec, j, t)
    lam = params.loadings[j][t]
    denom = math.sqrt(float(w @ params.growth_cov @ w) + float(lam @ lam) + extra(j, t))
    return lam / denom


def standardized_loading_normal(spec: ModelSpec, params: ParameterSet, item, occasion: int):
    """Correlation between a normal response and each factor at one occasion.

    Returns a scalar for one-factor models and an array otherwise.
    """
    out = _standardized(spec, params, item, occasion, "normal", lambda j, t: float(params.variances[j][t]))
    return float(out[0]) if out.size == 1 else out


def standardized_loading_binomial(spec: ModelSpec, params: ParameterSet, item, occasion: int):
    """Correlation between the variable underlying a binomial response and each factor."""
    out = _standardized(spec, params, item, occasion, "binomial", lambda j, t: 1.0)
    return float(out[0]) if out.size == 1 else out


def standardized_loadings(spec: ModelSpec, params: ParameterSet) -> dict[tuple[str, int], float | np.ndarray]:
    out = {}
    for it in spec.items:
        f = standardized_loading_binomial if it.family == "binomial" else standardized_loading_normal
        for t in range(it.occasions):
            out[(it.name, t + 1)] = f(spec, params, it.name, t + 1)
    return out


@dataclass(frozen=True, eq=False)
class GfMargin:
    """One-way margin of one binomial item at one occasion."""

    item: str
    occasion: int
    observed: np.ndarray
    expected: np.ndarray
    statistic: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.statistic))


def _gf_statistic(observed: np.ndarray, expected: np.ndarray) -> np.ndarray:
    stat = np.empty_like(expected)
    sparse = expected < SPARSE_EXPECTED
    stat[~sparse] = (observed[~sparse] - expected[~sparse]) ** 2 / expected[~sparse]
    stat[sparse] = np.where(observed[sparse] > 0, np.inf, 0.0)
    return stat


def expected_margins(
    data: PanelDataset,
    spec: ModelSpec,
    params: ParameterSet,
    method: str = "quadrature",
    quad_order: int = 5,
    draws: int = 20000,
    seed: int = 0,
) -> dict[tuple[int, int], np.ndarray]:
    """Expected count frequencies per (item index, occasion index).

    ``method="quadrature"`` integrates the binomial probabilities over the
    latent prior on the estimation grid; ``"monte-carlo"`` averages them over
    ``draws`` simulated latent vectors.
    """
    if method == "quadrature":
        grid = build_grid(spec, params, quad_order)
        nodes, w = grid.nodes, grid.weights
    elif method == "monte-carlo":
        rng = np.random.default_rng(seed)
        C = np.linalg.cholesky(params.latent_cov())
        nodes = params.latent_mean() + rng.standard_normal((draws, spec.d)) @ C.T
        w = np.full(draws, 1.0 / draws)
    else:
        raise InputError(f"unknown expected-frequency method {method!r}")
    out = {}
    for j, it in enumerate(spec.items):
        if it.family != "binomial":
            continue
        V0 = node_predictors(spec, params, nodes, j)
        O = item_offsets(spec, params, data, j)
        for t, n_t in enumerate(it.trials):
            counts = np.arange(n_t + 1)
            if O is None:
                pmf = binom.pmf(counts[:, None], n_t, expit(V0[:, t])[None, :])
                out[(j, t)] = data.n * (pmf @ w)
            else:
                total = np.zeros(n_t + 1)
                for o in O[:, t]:
                    total += binom.pmf(counts[:, None], n_t, expit(V0[:, t] + o)[None, :]) @ w
                out[(j, t)] = total
    return out


def gf_fit_margins(
    data: PanelDataset,
    spec: ModelSpec,
    params: ParameterSet,
    method: str = "quadrature",
    quad_order: int = 5,
    expected: dict | None = None,
) -> list[GfMargin]:
    """One-way margin discrepancies (O - E)^2 / E for every binomial item and occasion.

    Cells with expected frequency below 1e-10 get an infinite statistic when
    observed (zero otherwise) and raise a SparseCellWarning.
    """
    expected = expected or expected_margins(data, spec, params, method, quad_order)
    out = []
    for j, it in enumerate(spec.items):
        if it.family != "binomial":
            continue
        Y = np.asarray(data.responses[j]).astype(int)
        for t, n_t in enumerate(it.trials):
            observed = np.bincount(Y[:, t], minlength=n_t + 1).astype(float)
            E = expected[(j, t)]
            stat = _gf_statistic(observed, E)
            if np.any(np.isinf(stat)):
                warnings.warn(
                    f"item {it.name!r} occasion {t + 1}: observed counts with ~zero expected frequency",
                    SparseCellWarning,
                    stacklevel=2,
                )
            out.append(GfMargin(it.name, t + 1, observed, E, stat))
    return out


def gf_bootstrap_null(
    spec: ModelSpec,
    params: ParameterSet,
    n: int,
    replications: int = 200,
    seed: int = 0,
    quad_order: int = 5,
    data: PanelDataset | None = None,
) -> dict[tuple[str, int], np.ndarray]:
    """Parametric-bootstrap distribution of the per-occasion margin sums.

    Datasets of size ``n`` are drawn from ``params`` and scored against the
    same expected frequencies (no refitting).  ``data`` supplies a fixed
    covariate design when the model has covariates.
    """
    from .simulate import SimConfig, simulate_dataset

    fixed = {}
    if data is not None:
        for j, it in enumerate(spec.items):
            for c, name in enumerate(it.covariates):
                fixed.setdefault(name, np.asarray(data.covariates[j])[:, :, c])
    template = data
    if template is None:
        template, _ = simulate_dataset(SimConfig(spec, params, n, seed=seed, covariates=fixed))
    expected = expected_margins(template, spec, params, "quadrature", quad_order)
    sums: dict[tuple[str, int], list[float]] = {}
    rng = np.random.default_rng(seed)
    for _ in range(replications):
        sim, _ = simulate_dataset(
            SimConfig(spec, params, n, seed=int(rng.integers(2**63 - 1)), covariates=fixed)
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SparseCellWarning)
            for margin in gf_fit_margins(sim, spec, params, expected=expected):
                sums.setdefault((margin.item, margin.occasion), []).append(margin.total)
    return {k: np.asarray(v) for k, v in sums.items()}


def correlation_discrepancies(data: PanelDataset, spec: ModelSpec, params: ParameterSet) -> dict[str, np.ndarray]:
    """Sample minus model-implied correlations across occasions, per normal item.

    The implied covariance of the responses is the implied predictor
    covariance plus the residual variance on the diagonal.
    """
    out = {}
    for j, it in enumerate(spec.items):
        if it.family != "normal":
            continue
        T = it.occasions
        cov = np.array(
            [
                [implied_predictor_covariance(spec, params, (j, s + 1), (j, t + 1)) for t in range(T)]
                for s in range(T)
            ]
        )
        cov += np.diag(params.variances[j])
        sd = np.sqrt(np.diag(cov))
        implied = cov / np.outer(sd, sd)
        sample = np.corrcoef(np.asarray(data.responses[j]), rowvar=False) if T > 1 else np.ones((1, 1))
        diff = np.atleast_2d(sample) - implied
        np.fill_diagonal(diff, 0.0)
        out[it.name] = diff
    return out


def information_criteria(fit=None, *, loglik: float | None = None, n_free: int | None = None, n_obs: int | None = None):
    """(AIC, BIC) = (-2 l + 2 k, -2 l + k log n).

    Pass a FitResult, or the three numbers as keywords.
    """
    if fit is not None:
        loglik, n_free, n_obs = fit.loglik, fit.n_free, fit.n_obs
    if loglik is None or n_free is None or n_obs is None:
        raise InputError("information_criteria needs a fit or loglik, n_free and n_obs")
    if n_obs < 1:
        raise InputError("need at least one observation")
    return -2.0 * loglik + 2.0 * n_free, -2.0 * loglik + n_free * math.log(n_obs)
