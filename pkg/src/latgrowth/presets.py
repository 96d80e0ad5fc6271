"""Ready-made model definitions for the student-career application.

Two items observed over three academic years: the number of exams taken
(binomial, with the yearly maximum as trial count) and the average mark
(normal).  Both follow linear growth curves and load on one common factor.
The reference values are the published estimates for the full cohort and
serve as simulation truth.
"""

from __future__ import annotations

import numpy as np

from .model import Item, ModelSpec, ParameterSet

EXAM_TRIALS = (8, 12, 14)

REFERENCE_GROWTH_MEAN = (0.249, -0.443, 23.98, -0.113)
REFERENCE_GROWTH_COV = (
    (0.231, -0.107, 1.004, -0.363),
    (-0.107, 0.093, -0.531, 0.413),
    (1.004, -0.531, 4.980, -2.183),
    (-0.363, 0.413, -2.183, 2.164),
)
REFERENCE_LOADINGS = {"NE": 0.524, "AM": 2.581}
REFERENCE_VARIANCES = (10.080, 9.953, 14.568)


def career_spec(loadings: str = "time-invariant", residuals: str = "heteroscedastic") -> ModelSpec:
    """Model A by default; ``loadings="time-varying"`` gives Model B and
    ``residuals="homoscedastic"`` Model C."""
    return ModelSpec(
        items=(
            Item("NE", "binomial", 3, degree=1, trials=EXAM_TRIALS),
            Item("AM", "normal", 3, degree=1, residuals=residuals),
        ),
        n_factors=1,
        loadings=loadings,
    )


def reference_params(spec: ModelSpec | None = None) -> ParameterSet:
    spec = spec or career_spec()
    loadings = tuple(
        np.full((it.occasions, 1), REFERENCE_LOADINGS[it.name]) for it in spec.items
    )
    variances = np.asarray(REFERENCE_VARIANCES)
    if spec.items[1].residuals == "homoscedastic":
        variances = np.full(3, variances.mean())
    return ParameterSet(
        growth_mean=np.asarray(REFERENCE_GROWTH_MEAN),
        growth_cov=np.asarray(REFERENCE_GROWTH_COV),
        loadings=loadings,
        variances=(None, variances),
    )
