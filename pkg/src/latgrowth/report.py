"""Plain-text and delimited reports for fits and diagnostics.

The text layout groups the estimates the way growth-model results are
usually tabulated: growth means per item, the growth covariance matrix,
loadings and residual variances, each estimate followed by its standard
error in brackets.  The delimited layout is a flat CSV with full-precision
(``repr``) numbers.
"""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .diagnostics import GfMargin
from .em import FitResult
from .model import ModelSpec, ParameterSet, parameter_names, pack

REPORT_FORMATS = ("text", "delimited")


def _num(x: float, width: int = 10, digits: int = 3) -> str:
    if x is None or not math.isfinite(x):
        return f"{'NA' if x is None else str(x):>{width}}"
    return f"{x:>{width}.{digits}f}"


def _est(value: float, se: float | None) -> str:
    s = f"{value:.3f}"
    if se is not None:
        s += f" ({se:.3f})"
    return s


def _header(spec: ModelSpec) -> list[str]:
    items = ", ".join(
        f"{it.name} ({it.family}, {it.occasions} occasions, degree {it.degree})" for it in spec.items
    )
    return [
        f"items: {items}",
        f"factors: {spec.n_factors}  loadings: {spec.loadings}",
    ]


def parameter_table(spec: ModelSpec, params: ParameterSet, ses: dict[str, float] | None) -> list[str]:
    """Text block with the estimates grouped by parameter type."""
    ses = ses or {}
    names = parameter_names(spec)
    values = dict(zip(names, pack(spec, params)))
    growth = spec.growth_names()
    lines = ["Growth means"]
    for g in growth:
        key = f"mu[{g}]"
        lines.append(f"  {g:<14}{_est(values[key], ses.get(key)):>24}")
    lines += ["", "Growth covariance (lower triangle)"]
    width = 22
    lines.append(" " * 16 + "".join(f"{g:>{width}}" for g in growth))
    for r, a in enumerate(growth):
        cells = []
        for c in range(r + 1):
            key = f"psi[{a},{growth[c]}]"
            cells.append(f"{_est(values[key], ses.get(key)):>{width}}")
        lines.append(f"  {a:<14}" + "".join(cells))
    lam = [n for n in names if n.startswith("lambda[")]
    if lam:
        lines += ["", "Factor loadings"]
        lines += [f"  {n[7:-1]:<14}{_est(values[n], ses.get(n)):>24}" for n in lam]
    s2 = [n for n in names if n.startswith("sigma2[")]
    if s2:
        lines += ["", "Residual variances"]
        lines += [f"  {n[7:-1]:<14}{_est(values[n], ses.get(n)):>24}" for n in s2]
    gam = [n for n in names if n.startswith("gamma[")]
    if gam:
        lines += ["", "Covariate effects"]
        lines += [f"  {n[6:-1]:<14}{_est(values[n], ses.get(n)):>24}" for n in gam]
    return lines


def fit_report_text(fit: FitResult) -> str:
    spec = fit.spec
    lines = ["Latent growth model: maximum likelihood fit", ""]
    lines += _header(spec)
    lines += [
        f"individuals: {fit.n_obs}  quadrature order: {fit.options.quad_order}",
        f"converged: {'yes' if fit.converged else 'no'} ({fit.reason})  iterations: {fit.n_iter}",
        f"log-likelihood: {fit.loglik:.6f}",
        f"free parameters: {fit.n_free}  AIC: {fit.aic:.4f}  BIC: {fit.bic:.4f}",
        "",
    ]
    lines += parameter_table(spec, fit.params, fit.standard_errors)
    lines.append("")
    if fit.standard_errors is None:
        lines.append(f"standard errors unavailable: {fit.se_message}")
    else:
        lines.append("standard errors in brackets")
    return "\n".join(lines) + "\n"


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _r(x) -> str:
    return "" if x is None else repr(float(x))


def fit_report_delimited(fit: FitResult) -> str:
    rows = [("section", "name", "value", "se")]
    rows += [
        ("fit", "converged", str(fit.converged).lower(), ""),
        ("fit", "reason", fit.reason, ""),
        ("fit", "iterations", str(fit.n_iter), ""),
        ("fit", "n", str(fit.n_obs), ""),
        ("fit", "quad_order", str(fit.options.quad_order), ""),
        ("fit", "loglik", _r(fit.loglik), ""),
        ("fit", "n_free", str(fit.n_free), ""),
        ("fit", "aic", _r(fit.aic), ""),
        ("fit", "bic", _r(fit.bic), ""),
    ]
    ses = fit.standard_errors or {}
    for name, value in fit.estimates().items():
        rows.append(("parameter", name, _r(value), _r(ses.get(name))))
    return _csv(rows)


def trace_csv(fit: FitResult) -> str:
    rows = [("iteration", "loglik")]
    rows += [(str(k), repr(float(v))) for k, v in enumerate(fit.loglik_trace)]
    return _csv(rows)


def diagnostics_report_text(
    spec: ModelSpec,
    loadings: dict,
    margins: list[GfMargin],
    discrepancies: dict[str, np.ndarray],
    criteria: tuple[float, float] | None = None,
    null_p99: dict | None = None,
) -> str:
    lines = ["Latent growth model: diagnostics", ""]
    lines += _header(spec)
    if criteria is not None:
        lines.append(f"AIC: {criteria[0]:.4f}  BIC: {criteria[1]:.4f}")
    lines += ["", "Standardized loadings"]
    for (item, t), value in loadings.items():
        vals = np.atleast_1d(value)
        lines.append(f"  {item:<8} t{t:<4}" + "".join(f"{v:>10.3f}" for v in vals))
    lines += ["", "GF-fit one-way margins, (O - E)^2 / E"]
    for m in margins:
        lines.append(f"  {m.item} t{m.occasion}")
        lines.append("    " + f"{'count':>6}{'O':>10}{'E':>12}{'GF':>10}")
        for c, (o, e, s) in enumerate(zip(m.observed, m.expected, m.statistic)):
            lines.append("    " + f"{c:>6}{o:>10.0f}{e:>12.3f}{_num(s, 10, 3)}")
        tail = f"    total {m.total:.3f}"
        if null_p99 is not None and (m.item, m.occasion) in null_p99:
            tail += f"  (bootstrap 99th percentile {null_p99[(m.item, m.occasion)]:.3f})"
        lines.append(tail)
    lines += ["", "Correlation discrepancies (sample - implied)"]
    for item, D in discrepancies.items():
        T = D.shape[0]
        lines.append(f"  {item}")
        lines.append("    " + " " * 6 + "".join(f"{'t' + str(t + 1):>10}" for t in range(T)))
        for s in range(T):
            lines.append("    " + f"{'t' + str(s + 1):<6}" + "".join(f"{D[s, t]:>10.3f}" for t in range(s + 1)))
    return "\n".join(lines) + "\n"


def diagnostics_report_delimited(
    spec: ModelSpec,
    loadings: dict,
    margins: list[GfMargin],
    discrepancies: dict[str, np.ndarray],
    criteria: tuple[float, float] | None = None,
    null_p99: dict | None = None,
) -> str:
    rows = [("section", "item", "occasion", "key", "value")]
    if criteria is not None:
        rows += [("criteria", "", "", "aic", _r(criteria[0])), ("criteria", "", "", "bic", _r(criteria[1]))]
    for (item, t), value in loadings.items():
        vals = np.atleast_1d(value)
        for k, v in enumerate(vals):
            rows.append(("standardized_loading", item, str(t), f"z{k + 1}", _r(v)))
    for m in margins:
        for c, (o, e, s) in enumerate(zip(m.observed, m.expected, m.statistic)):
            rows.append(("gf_observed", m.item, str(m.occasion), str(c), _r(o)))
            rows.append(("gf_expected", m.item, str(m.occasion), str(c), _r(e)))
            rows.append(("gf_statistic", m.item, str(m.occasion), str(c), _r(s)))
        rows.append(("gf_total", m.item, str(m.occasion), "", _r(m.total)))
        if null_p99 is not None and (m.item, m.occasion) in null_p99:
            rows.append(("gf_null_p99", m.item, str(m.occasion), "", _r(null_p99[(m.item, m.occasion)])))
    for item, D in discrepancies.items():
        T = D.shape[0]
        for s in range(T):
            for t in range(s + 1):
                rows.append(("correlation_discrepancy", item, str(s + 1), f"t{t + 1}", _r(D[s, t])))
    return _csv(rows)
