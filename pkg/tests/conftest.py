import numpy as np
import pytest

from latgrowth.model import Item, ModelSpec, ParameterSet
from latgrowth.presets import career_spec, reference_params

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def model_a():
    return career_spec()


@pytest.fixture(scope="session")
def truth_a(model_a):
    return reference_params(model_a)


def random_spd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T / d + 0.5 * np.eye(d))


def small_mixed_spec(covariates=False, loadings="time-invariant", residuals="heteroscedastic"):
    """Binomial plus normal item, 2-3 occasions, one factor; small enough for brute force."""
    cov = ("x",) if covariates else ()
    return ModelSpec(
        items=(
            Item("B", "binomial", 3, degree=1, trials=(4, 5, 6), covariates=cov),
            Item("N", "normal", 3, degree=1, residuals=residuals, covariates=cov),
        ),
        n_factors=1,
        loadings=loadings,
    )


def random_params(spec, rng, loading_scale=0.6):
    db = spec.d_beta
    loadings, variances, coefs = [], [], []
    for j, it in enumerate(spec.items):
        L = np.zeros((it.occasions, spec.n_factors))
        mask = spec.loading_mask(j)
        L[mask] = loading_scale * (0.5 + rng.random(int(mask.sum())))
        if spec.loadings == "time-invariant":
            L[:] = L[0]
        loadings.append(L)
        if it.family == "normal":
            v = 0.5 + rng.random(it.occasions)
            if it.residuals == "homoscedastic":
                v[:] = v[0]
            variances.append(v)
        else:
            variances.append(None)
        coefs.append(0.3 * rng.standard_normal(it.n_coefs))
    return ParameterSet(
        growth_mean=0.3 * rng.standard_normal(db),
        growth_cov=random_spd(rng, db, 0.3),
        loadings=tuple(loadings),
        variances=tuple(variances),
        coefs=tuple(coefs),
    )
