"""Command-line front end: ``latgrowth {fit,simulate,diagnose}``.

Exit status: 0 success, 2 input error, 3 numerical failure, 4 no
convergence (the report is still written).  Failures print one line to
stderr of the form ``latgrowth: error: <Class>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io as lio
from .diagnostics import (
    correlation_discrepancies,
    gf_bootstrap_null,
    gf_fit_margins,
    information_criteria,
    standardized_loadings,
)
from .em import FitOptions, fit
from .errors import InputError, LatgrowthError, NumericalError
from .quadrature import build_grid, marginal_loglik
from .report import (
    REPORT_FORMATS,
    diagnostics_report_delimited,
    diagnostics_report_text,
    fit_report_delimited,
    fit_report_text,
    trace_csv,
)
from .simulate import SimConfig, simulate_dataset

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_NOT_CONVERGED = 0, 2, 3, 4

log = logging.getLogger("latgrowth")


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--data", required=True, help="long-format panel CSV")
    p.add_argument("--model", required=True, help="model config (TOML)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=REPORT_FORMATS, default="text", help="report format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latgrowth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="maximum likelihood fit by EM")
    _common(f)
    f.add_argument("--quad-order", type=int, default=5, help="Gauss-Hermite points per latent dimension")
    f.add_argument("--tol", type=float, default=1e-5, help="tolerance on the largest parameter change")
    f.add_argument("--tol-loglik", type=float, default=1e-7, help="tolerance on the log-likelihood change")
    f.add_argument("--max-iter", type=int, default=500)
    f.add_argument("--no-se", action="store_true", help="skip standard errors")
    f.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("simulate", help="draw a panel from a parameter file")
    _common(s, data=False)
    s.add_argument("--params", required=True, help="parameter file (JSON)")
    s.add_argument("--n", type=int, required=True, help="number of individuals")

    d = sub.add_parser("diagnose", help="standardized loadings, GF-fit margins, correlation discrepancies")
    _common(d)
    d.add_argument("--params", required=True, help="fitted parameter file (JSON)")
    d.add_argument("--quad-order", type=int, default=5)
    d.add_argument("--margins", choices=("quadrature", "monte-carlo"), default="quadrature",
                   help="how expected margin frequencies are integrated")
    d.add_argument("--bootstrap", type=int, default=0,
                   help="parametric-bootstrap replications for GF reference percentiles (0: none)")
    d.add_argument("--no-figures", action="store_true")
    return parser


def _report_name(fmt: str, stem: str) -> str:
    return f"{stem}.txt" if fmt == "text" else f"{stem}.csv"


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"{out}: cannot create output directory ({exc.strerror})") from None
    return out


def cmd_fit(args) -> int:
    spec = lio.read_model(args.model)
    data = lio.ingest_panel(args.data, spec)
    options = FitOptions(
        quad_order=args.quad_order,
        max_iter=args.max_iter,
        tol=args.tol,
        tol_loglik=args.tol_loglik,
        seed=args.seed,
        compute_se=not args.no_se,
    )
    out = _outdir(args.out)
    result = fit(data, spec, options)
    text = fit_report_text(result) if args.format == "text" else fit_report_delimited(result)
    (out / _report_name(args.format, "fit")).write_text(text)
    (out / "trace.csv").write_text(trace_csv(result))
    lio.write_params(spec, result.params, out / "params.json")
    if not args.no_figures:
        from .plotting import plot_loglik_trace

        plot_loglik_trace(result.loglik_trace, out / "loglik_trace.png")
    if not result.converged:
        print(f"latgrowth: warning: NotConverged: {result.reason} after {result.n_iter} iterations",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = lio.read_model(args.model)
    params = lio.read_params(args.params, spec)
    if args.n < 1:
        raise InputError("--n must be at least 1")
    data, _ = simulate_dataset(SimConfig(spec, params, args.n, seed=args.seed))
    out = _outdir(args.out)
    lio.write_panel(data, spec, out / "panel.csv")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    spec = lio.read_model(args.model)
    data = lio.ingest_panel(args.data, spec)
    params = lio.read_params(args.params, spec)
    out = _outdir(args.out)
    loglik = marginal_loglik(data, spec, params, build_grid(spec, params, args.quad_order))
    criteria = information_criteria(loglik=loglik, n_free=spec.n_free(), n_obs=data.n)
    loadings = standardized_loadings(spec, params)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        margins = gf_fit_margins(data, spec, params, method=args.margins, quad_order=args.quad_order)
    for w in caught:
        print(f"latgrowth: warning: {w.category.__name__}: {w.message}", file=sys.stderr)
    discrepancies = correlation_discrepancies(data, spec, params)
    null_p99 = None
    if args.bootstrap > 0:
        null = gf_bootstrap_null(spec, params, data.n, args.bootstrap, seed=args.seed,
                                 quad_order=args.quad_order, data=data)
        null_p99 = {k: float(np.quantile(v, 0.99)) for k, v in null.items()}
    render = diagnostics_report_text if args.format == "text" else diagnostics_report_delimited
    text = render(spec, loadings, margins, discrepancies, criteria, null_p99)
    (out / _report_name(args.format, "diagnostics")).write_text(text)
    if not args.no_figures:
        from .plotting import plot_correlation_discrepancies, plot_gf_margins, plot_standardized_loadings

        plot_standardized_loadings(loadings, out / "standardized_loadings.png")
        if margins:
            plot_gf_margins(margins, out / "gf_margins.png")
        if discrepancies:
            plot_correlation_discrepancies(discrepancies, out / "correlation_discrepancies.png")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "diagnose": cmd_diagnose}


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"latgrowth: error: {type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        return _fail(exc, EXIT_INPUT)
    except OSError as exc:
        return _fail(exc, EXIT_INPUT)
    except (NumericalError, LatgrowthError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(exc, EXIT_NUMERICAL)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
