"""Model specification, parameter container, panel data and the linear predictor.

Every latent vector in the package uses one canonical layout::

    eta = (b0_item1, ..., bp_item1, ..., b0_itemJ, ..., bp_itemJ, z_1, ..., z_q)

so that growth means, the latent covariance, quadrature nodes and design
rows can be indexed with the same slices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import InputError

Family = Literal["binomial", "normal"]
FAMILIES = ("binomial", "normal")
LOADING_SCHEMES = ("time-invariant", "time-varying")
RESIDUAL_SCHEMES = ("heteroscedastic", "homoscedastic")
COVARIATE_EFFECTS = ("common", "occasion")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Item:
    """One observed item measured on ``occasions`` occasions.

    ``trials`` is required for binomial items (one count per occasion).
    ``time_scores`` default to ``0, 1, ..., T-1`` so that the intercept is the
    status at the first occasion.  ``factors`` lists the (0-based) common
    factors the item loads on; ``None`` means all of them.
    """

    name: str
    family: Family
    occasions: int
    degree: int = 1
    trials: tuple[int, ...] | None = None
    time_scores: tuple[float, ...] | None = None
    residuals: str = "heteroscedastic"
    covariates: tuple[str, ...] = ()
    covariate_effects: str = "common"
    factors: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"item {self.name!r}: unknown family {self.family!r}")
        if self.occasions < 1:
            raise InputError(f"item {self.name!r}: needs at least one occasion")
        if self.degree < 0:
            raise InputError(f"item {self.name!r}: growth degree must be >= 0")
        if self.occasions < self.degree + 1:
            raise InputError(
                f"item {self.name!r}: {self.occasions} occasions cannot identify "
                f"a degree-{self.degree} growth curve"
            )
        if self.family == "binomial":
            if self.trials is None or len(self.trials) != self.occasions:
                raise InputError(f"item {self.name!r}: binomial items need one trial count per occasion")
            if any(int(n) != n or n < 1 for n in self.trials):
                raise InputError(f"item {self.name!r}: trial counts must be integers >= 1")
            object.__setattr__(self, "trials", tuple(int(n) for n in self.trials))
        elif self.trials is not None:
            raise InputError(f"item {self.name!r}: normal items take no trial counts")
        if self.time_scores is None:
            object.__setattr__(self, "time_scores", tuple(float(t) for t in range(self.occasions)))
        else:
            ts = tuple(float(t) for t in self.time_scores)
            if len(ts) != self.occasions:
                raise InputError(f"item {self.name!r}: need {self.occasions} time scores, got {len(ts)}")
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise InputError(f"item {self.name!r}: time scores must be strictly increasing")
            object.__setattr__(self, "time_scores", ts)
        if self.residuals not in RESIDUAL_SCHEMES:
            raise InputError(f"item {self.name!r}: unknown residual scheme {self.residuals!r}")
        if self.covariate_effects not in COVARIATE_EFFECTS:
            raise InputError(f"item {self.name!r}: unknown covariate effects {self.covariate_effects!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if len(set(self.covariates)) != len(self.covariates):
            raise InputError(f"item {self.name!r}: duplicated covariate names")
        if self.factors is not None:
            object.__setattr__(self, "factors", tuple(sorted(set(int(k) for k in self.factors))))

    @property
    def n_growth(self) -> int:
        return self.degree + 1

    @property
    def n_coefs(self) -> int:
        b = len(self.covariates)
        return b if self.covariate_effects == "common" else b * self.occasions

    @property
    def growth_design(self) -> np.ndarray:
        """(T, p+1) matrix of time-score powers ``lambda_t ** r``."""
        t = np.asarray(self.time_scores)
        return t[:, None] ** np.arange(self.n_growth)[None, :]

    def covariate_design(self, raw: np.ndarray) -> np.ndarray:
        """Expand raw covariates (n, T, b) into the coefficient design (n, T, n_coefs)."""
        raw = np.asarray(raw, dtype=float)
        if self.covariate_effects == "common":
            return raw
        n, T, b = raw.shape
        out = np.zeros((n, T, T * b))
        for t in range(T):
            out[:, t, t * b:(t + 1) * b] = raw[:, t, :]
        return out


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a multivariate latent growth model."""

    items: tuple[Item, ...]
    n_factors: int = 0
    loadings: str = "time-invariant"
    anchors: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise InputError("model needs at least one item")
        names = [it.name for it in self.items]
        if len(set(names)) != len(names):
            raise InputError("item names must be unique")
        if self.n_factors < 0:
            raise InputError("number of factors must be >= 0")
        if self.loadings not in LOADING_SCHEMES:
            raise InputError(f"unknown loading scheme {self.loadings!r}")
        for it in self.items:
            if it.factors is not None and any(k >= self.n_factors for k in it.factors):
                raise InputError(f"item {it.name!r} loads on a factor that does not exist")
        if self.anchors is None:
            anchors = []
            for k in range(self.n_factors):
                loaders = [it.name for it in self.items if k in self.loaded_factors(it)]
                if not loaders:
                    raise InputError(f"factor {k + 1} has no indicator items")
                anchors.append(loaders[0])
            object.__setattr__(self, "anchors", tuple(anchors))
        else:
            object.__setattr__(self, "anchors", tuple(self.anchors))
            if len(self.anchors) != self.n_factors:
                raise InputError("need exactly one anchor item per factor")
            for k, a in enumerate(self.anchors):
                if a not in names:
                    raise InputError(f"anchor {a!r} is not an item")
                if k not in self.loaded_factors(self.items[names.index(a)]):
                    raise InputError(f"anchor {a!r} does not load on factor {k + 1}")

    # layout ---------------------------------------------------------------
    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def d_beta(self) -> int:
        return sum(it.n_growth for it in self.items)

    @property
    def d(self) -> int:
        return self.d_beta + self.n_factors

    @property
    def growth_slices(self) -> tuple[slice, ...]:
        out, start = [], 0
        for it in self.items:
            out.append(slice(start, start + it.n_growth))
            start += it.n_growth
        return tuple(out)

    @property
    def factor_slice(self) -> slice:
        return slice(self.d_beta, self.d)

    def loaded_factors(self, item: Item) -> tuple[int, ...]:
        return tuple(range(self.n_factors)) if item.factors is None else item.factors

    def item_index(self, item: int | str) -> int:
        if isinstance(item, str):
            for j, it in enumerate(self.items):
                if it.name == item:
                    return j
            raise InputError(f"unknown item {item!r}")
        if not 0 <= int(item) < self.n_items:
            raise InputError(f"item index {item} out of range")
        return int(item)

    def growth_names(self) -> list[str]:
        return [f"{it.name}.b{r}" for it in self.items for r in range(it.n_growth)]

    # free-parameter census ---------------------------------------------------
    def loading_mask(self, j: int) -> np.ndarray:
        """Boolean (T_j, q) mask of free loadings for item ``j`` in canonical order.

        Under time-invariant loadings only the first row is free; the
        remaining rows repeat it.
        """
        it = self.items[j]
        mask = np.zeros((it.occasions, self.n_factors), dtype=bool)
        cols = list(self.loaded_factors(it))
        if self.loadings == "time-varying":
            mask[:, cols] = True
        else:
            mask[0, cols] = True
        return mask

    def n_loadings(self, j: int) -> int:
        return int(self.loading_mask(j).sum())

    def n_variances(self, j: int) -> int:
        it = self.items[j]
        if it.family != "normal":
            return 0
        return 1 if it.residuals == "homoscedastic" else it.occasions

    def n_free(self) -> int:
        db = self.d_beta
        k = db + db * (db + 1) // 2
        for j, it in enumerate(self.items):
            k += self.n_loadings(j) + self.n_variances(j) + it.n_coefs
        return k


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """All model parameters.

    ``loadings[j]`` is always the full (T_j, q) occasion-by-factor matrix,
    whatever the loading scheme, and ``variances[j]`` the length-T_j vector
    of residual variances (``None`` for binomial items).  The factor block
    of the latent distribution is fixed (zero mean, identity covariance) and
    is not stored.
    """

    growth_mean: np.ndarray
    growth_cov: np.ndarray
    loadings: tuple[np.ndarray, ...]
    variances: tuple[np.ndarray | None, ...]
    coefs: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "growth_mean", _frozen(self.growth_mean))
        object.__setattr__(self, "growth_cov", _frozen(self.growth_cov))
        object.__setattr__(self, "loadings", tuple(_frozen(np.atleast_2d(L)) for L in self.loadings))
        object.__setattr__(
            self, "variances", tuple(None if v is None else _frozen(v) for v in self.variances)
        )
        coefs = self.coefs or tuple(np.zeros(0) for _ in self.loadings)
        object.__setattr__(self, "coefs", tuple(_frozen(c) for c in coefs))

    @property
    def n_factors(self) -> int:
        return self.loadings[0].shape[1] if self.loadings else 0

    def latent_mean(self) -> np.ndarray:
        return np.concatenate([self.growth_mean, np.zeros(self.n_factors)])

    def latent_cov(self) -> np.ndarray:
        db, q = len(self.growth_mean), self.n_factors
        out = np.zeros((db + q, db + q))
        out[:db, :db] = self.growth_cov
        out[db:, db:] = np.eye(q)
        return out

    def replace(self, **changes) -> "ParameterSet":
        kw = dict(
            growth_mean=self.growth_mean,
            growth_cov=self.growth_cov,
            loadings=self.loadings,
            variances=self.variances,
            coefs=self.coefs,
        )
        kw.update(changes)
        return ParameterSet(**kw)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Complete panel: ``responses[j]`` is (n, T_j); ``covariates[j]`` is (n, T_j, b_j) or None."""

    ids: tuple[str, ...]
    responses: tuple[np.ndarray, ...]
    covariates: tuple[np.ndarray | None, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "responses", tuple(_frozen(np.atleast_2d(y)) for y in self.responses))
        cov = self.covariates or tuple(None for _ in self.responses)
        object.__setattr__(self, "covariates", tuple(None if c is None else _frozen(c) for c in cov))
        for y in self.responses:
            if y.shape[0] != len(self.ids):
                raise InputError("every item needs one row per individual")

    @property
    def n(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "PanelDataset":
        index = np.atleast_1d(np.asarray(index))
        return PanelDataset(
            ids=tuple(np.asarray(self.ids, dtype=object)[index]),
            responses=tuple(y[index] for y in self.responses),
            covariates=tuple(None if c is None else c[index] for c in self.covariates),
        )

    def check(self, spec: ModelSpec) -> None:
        """Raise InputError unless the panel conforms to ``spec``."""
        if len(self.responses) != spec.n_items:
            raise InputError(f"data has {len(self.responses)} items, model has {spec.n_items}")
        for it, y, x in zip(spec.items, self.responses, self.covariates):
            if y.shape != (self.n, it.occasions):
                raise InputError(f"item {it.name!r}: expected shape {(self.n, it.occasions)}, got {y.shape}")
            if not np.all(np.isfinite(y)):
                raise InputError(f"item {it.name!r}: non-finite responses")
            if it.family == "binomial":
                n_t = np.asarray(it.trials)
                if np.any(y != np.round(y)) or np.any(y < 0) or np.any(y > n_t[None, :]):
                    raise InputError(f"item {it.name!r}: counts must be integers in [0, trials]")
            b = len(it.covariates)
            if b:
                if x is None or x.shape != (self.n, it.occasions, b):
                    raise InputError(f"item {it.name!r}: expected covariates of shape {(self.n, it.occasions, b)}")
            elif x is not None and x.size:
                raise InputError(f"item {it.name!r}: covariates supplied for an item without covariates")


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

def parameter_names(spec: ModelSpec) -> list[str]:
    """Names of the free parameters in canonical packing order."""
    g = spec.growth_names()
    names = [f"mu[{a}]" for a in g]
    names += [f"psi[{g[r]},{g[c]}]" for r in range(len(g)) for c in range(r + 1)]
    q = spec.n_factors
    for j, it in enumerate(spec.items):
        mask = spec.loading_mask(j)
        for t, k in zip(*np.nonzero(mask)):
            parts = [it.name]
            if spec.loadings == "time-varying":
                parts.append(f"t{t + 1}")
            if q > 1:
                parts.append(f"z{k + 1}")
            names.append(f"lambda[{','.join(parts)}]")
        if it.family == "normal":
            if it.residuals == "homoscedastic":
                names.append(f"sigma2[{it.name}]")
            else:
                names += [f"sigma2[{it.name},t{t + 1}]" for t in range(it.occasions)]
        if it.covariate_effects == "common":
            names += [f"gamma[{it.name},{x}]" for x in it.covariates]
        else:
            names += [f"gamma[{it.name},{x},t{t + 1}]" for t in range(it.occasions) for x in it.covariates]
    return names


def pack(spec: ModelSpec, params: ParameterSet) -> np.ndarray:
    """Flatten the free parameters into a vector ordered as ``parameter_names``."""
    rows, cols = np.tril_indices(spec.d_beta)
    parts = [params.growth_mean, params.growth_cov[rows, cols]]
    for j, it in enumerate(spec.items):
        parts.append(params.loadings[j][spec.loading_mask(j)])
        if it.family == "normal":
            v = params.variances[j]
            parts.append(v[:1] if it.residuals == "homoscedastic" else v)
        parts.append(params.coefs[j])
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unpack(spec: ModelSpec, vector: Sequence[float]) -> ParameterSet:
    """Inverse of :func:`pack`."""
    vec = np.asarray(vector, dtype=float)
    if vec.shape != (spec.n_free(),):
        raise InputError(f"expected {spec.n_free()} parameters, got {vec.shape}")
    db = spec.d_beta
    pos = 0

    def take(k):
        nonlocal pos
        out = vec[pos:pos + k]
        pos += k
        return out

    mean = take(db)
    cov = np.zeros((db, db))
    rows, cols = np.tril_indices(db)
    cov[rows, cols] = take(len(rows))
    cov = cov + np.tril(cov, -1).T
    loadings, variances, coefs = [], [], []
    for j, it in enumerate(spec.items):
        mask = spec.loading_mask(j)
        L = np.zeros(mask.shape)
        L[mask] = take(int(mask.sum()))
        if spec.loadings == "time-invariant":
            L[:] = L[0]
        loadings.append(L)
        if it.family == "normal":
            k = spec.n_variances(j)
            variances.append(np.broadcast_to(take(k), (it.occasions,)).copy())
        else:
            variances.append(None)
        coefs.append(take(it.n_coefs).copy())
    return ParameterSet(mean, cov, tuple(loadings), tuple(variances), tuple(coefs))


def params_from_dict(spec: ModelSpec, values: dict[str, float]) -> ParameterSet:
    names = parameter_names(spec)
    missing = [n for n in names if n not in values]
    if missing:
        raise InputError(f"missing parameter values: {', '.join(missing)}")
    extra = sorted(set(values) - set(names))
    if extra:
        raise InputError(f"unknown parameters: {', '.join(extra)}")
    return unpack(spec, [float(values[n]) for n in names])


def params_to_dict(spec: ModelSpec, params: ParameterSet) -> dict[str, float]:
    return dict(zip(parameter_names(spec), (float(v) for v in pack(spec, params))))


# ---------------------------------------------------------------------------
# linear predictor
# ---------------------------------------------------------------------------

def _occasion_index(spec: ModelSpec, j: int, occasion: int) -> int:
    T = spec.items[j].occasions
    if not 1 <= int(occasion) <= T:
        raise InputError(f"item {spec.items[j].name!r} has occasions 1..{T}, got {occasion}")
    return int(occasion) - 1


def design_matrix(spec: ModelSpec, params: ParameterSet, item: int | str) -> np.ndarray:
    """All design rows of one item stacked: shape (T_j, d)."""
    j = spec.item_index(item)
    it = spec.items[j]
    W = np.zeros((it.occasions, spec.d))
    W[:, spec.growth_slices[j]] = it.growth_design
    W[:, spec.factor_slice] = params.loadings[j]
    return W


def design_row(spec: ModelSpec, params: ParameterSet, item: int | str, occasion: int) -> np.ndarray:
    """Design row ``w_tj`` for ``item`` at the 1-based ``occasion``."""
    j = spec.item_index(item)
    t = _occasion_index(spec, j, occasion)
    return design_matrix(spec, params, j)[t]


def linear_predictor(
    spec: ModelSpec,
    params: ParameterSet,
    eta: Sequence[float],
    item: int | str,
    occasion: int,
    covariates: Sequence[float] | None = None,
) -> float:
    """``v_tj = w_tj . eta + gamma_tj . x_tj`` for a single cell.

    ``covariates`` holds the raw covariate values of the cell, in the item's
    covariate order.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (spec.d,):
        raise InputError(f"latent vector must have length {spec.d}, got {eta.shape}")
    j = spec.item_index(item)
    t = _occasion_index(spec, j, occasion)
    it = spec.items[j]
    v = float(design_row(spec, params, j, occasion) @ eta)
    b = len(it.covariates)
    x = np.zeros(b) if covariates is None else np.asarray(covariates, dtype=float)
    if x.shape != (b,):
        raise InputError(f"item {it.name!r} takes {b} covariates, got {x.shape}")
    if b:
        raw = np.zeros((1, it.occasions, b))
        raw[0, t] = x
        v += float(it.covariate_design(raw)[0, t] @ params.coefs[j])
    return v


def validate(spec: ModelSpec, params: ParameterSet) -> list[str]:
    """List every violated invariant; an empty list means the parameters are admissible."""
    out: list[str] = []
    db, q = spec.d_beta, spec.n_factors
    if params.growth_mean.shape != (db,):
        out.append(f"growth mean has shape {params.growth_mean.shape}, expected {(db,)}")
    if params.growth_cov.shape != (db, db):
        out.append(f"growth covariance has shape {params.growth_cov.shape}, expected {(db, db)}")
    else:
        P = params.growth_cov
        if not np.all(np.isfinite(P)):
            out.append("growth covariance: non-finite entries")
        elif not np.allclose(P, P.T, rtol=0, atol=1e-12):
            out.append("growth covariance: not symmetric")
        else:
            try:
                np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                out.append("growth covariance: not positive-definite")
    n_items = spec.n_items
    if not (len(params.loadings) == len(params.variances) == len(params.coefs) == n_items):
        out.append(f"parameter set describes the wrong number of items (model has {n_items})")
        return out
    for j, it in enumerate(spec.items):
        L = params.loadings[j]
        if L.shape != (it.occasions, q):
            out.append(f"{it.name}: loadings have shape {L.shape}, expected {(it.occasions, q)}")
            continue
        free_cols = list(spec.loaded_factors(it))
        fixed = np.ones(q, dtype=bool)
        fixed[free_cols] = False
        if np.any(L[:, fixed] != 0):
            out.append(f"{it.name}: nonzero loading on a factor the item does not load on")
        if spec.loadings == "time-invariant" and np.any(L != L[0]):
            out.append(f"{it.name}: loadings vary over time under the time-invariant scheme")
        v = params.variances[j]
        if it.family == "normal":
            if v is None or v.shape != (it.occasions,):
                out.append(f"{it.name}: expected {it.occasions} residual variances")
            else:
                if np.any(~(v > 0)):
                    out.append(f"{it.name}: nonpositive residual variance")
                if it.residuals == "homoscedastic" and np.any(v != v[0]):
                    out.append(f"{it.name}: residual variances differ under the homoscedastic scheme")
        elif v is not None:
            out.append(f"{it.name}: binomial item carries residual variances")
        if params.coefs[j].shape != (it.n_coefs,):
            out.append(f"{it.name}: expected {it.n_coefs} covariate coefficients")
    for k, name in enumerate(spec.anchors or ()):
        j = spec.item_index(name)
        L = params.loadings[j]
        if L.shape[1] > k and not L[0, k] >= 0:
            out.append(f"anchor loading of {name} on factor {k + 1} is negative")
    return out
