"""Generate synthetic panels from a parameter set."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import expit
from .errors import InputError
from .model import ModelSpec, PanelDataset, ParameterSet, validate


@dataclass(frozen=True, eq=False)
class SimConfig:
    """``covariates`` maps covariate names to fixed (n, T) designs; missing ones are drawn N(0, 1)."""

    spec: ModelSpec
    params: ParameterSet
    n: int
    seed: int = 0
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise InputError("need at least one individual")
        problems = validate(self.spec, self.params)
        if problems:
            raise InputError("invalid parameters: " + "; ".join(problems))


def _covariate_values(cfg: SimConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    t_max = max(it.occasions for it in cfg.spec.items)
    out = {}
    for it in cfg.spec.items:
        for name in it.covariates:
            if name in out:
                continue
            if name in cfg.covariates:
                x = np.asarray(cfg.covariates[name], dtype=float)
                if x.ndim != 2 or x.shape[0] != cfg.n or x.shape[1] < it.occasions:
                    raise InputError(f"fixed covariate {name!r} needs shape (n, T)")
                out[name] = x
            else:
                out[name] = rng.standard_normal((cfg.n, t_max))
    return out


def simulate_dataset(cfg: SimConfig) -> tuple[PanelDataset, np.ndarray]:
    """Draw a complete panel and return it with the latent draws (n, d).

    Draw order (covariates, latent vectors, then responses item by item)
    is fixed, so a seed reproduces the dataset bit for bit.
    """
    spec, params = cfg.spec, cfg.params
    rng = np.random.default_rng(cfg.seed)
    xs = _covariate_values(cfg, rng)
    C = np.linalg.cholesky(params.latent_cov())
    eta = params.latent_mean() + rng.standard_normal((cfg.n, spec.d)) @ C.T
    responses, covariates = [], []
    for j, it in enumerate(spec.items):
        beta = eta[:, spec.growth_slices[j]]
        z = eta[:, spec.factor_slice]
        v = beta @ it.growth_design.T + z @ params.loadings[j].T
        if it.covariates:
            raw = np.stack([xs[name][:, : it.occasions] for name in it.covariates], axis=2)
            v = v + it.covariate_design(raw) @ params.coefs[j]
            covariates.append(raw)
        else:
            covariates.append(None)
        if it.family == "binomial":
            y = rng.binomial(np.asarray(it.trials)[None, :], expit(v)).astype(float)
        else:
            y = v + rng.standard_normal(v.shape) * np.sqrt(params.variances[j])
        responses.append(y)
    ids = tuple(f"{i + 1}" for i in range(cfg.n))
    return PanelDataset(ids, tuple(responses), tuple(covariates)), eta
