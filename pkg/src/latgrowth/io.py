"""File formats: model configs (TOML), parameter files (JSON) and long-format panel CSV.

Panel CSV
---------
One row per individual, item and occasion::

    id,item,time,value,trials[,<covariate>...]

``time`` is the 1-based occasion, ``trials`` is empty for normal items and
covariate columns are empty where an item does not use them.  Individuals
keep the order of their first appearance.

Model config
------------
::

    format_version = 1
    n_factors = 1
    loadings = "time-invariant"      # or "time-varying"

    [[items]]
    name = "NE"
    family = "binomial"
    occasions = 3
    degree = 1
    trials = [8, 12, 14]

    [[items]]
    name = "AM"
    family = "normal"
    occasions = 3
    residuals = "heteroscedastic"    # or "homoscedastic"

Optional keys: top-level ``anchors`` (one item name per factor); per item
``time_scores``, ``covariates``, ``covariate_effects`` ("common" or
"occasion") and ``factors`` (1-based factor numbers).
"""

from __future__ import annotations

import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import Item, ModelSpec, PanelDataset, ParameterSet, params_from_dict, params_to_dict, validate

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

FORMAT_VERSION = 1
PANEL_HEADER = ("id", "item", "time", "value", "trials")

_ITEM_KEYS = {
    "name", "family", "occasions", "degree", "trials", "time_scores",
    "residuals", "covariates", "covariate_effects", "factors",
}
_TOP_KEYS = {"format_version", "n_factors", "loadings", "anchors", "items"}


# ---------------------------------------------------------------------------
# model config
# ---------------------------------------------------------------------------

def spec_from_mapping(cfg: dict, source: str = "model config") -> ModelSpec:
    version = cfg.get("format_version")
    if version is None:
        raise InputError(f"{source}: missing format_version")
    if version != FORMAT_VERSION:
        raise InputError(f"{source}: unsupported format_version {version!r}")
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise InputError(f"{source}: unknown keys {sorted(unknown)}")
    raw_items = cfg.get("items")
    if not raw_items:
        raise InputError(f"{source}: no [[items]] defined")
    items = []
    for k, entry in enumerate(raw_items, start=1):
        unknown = set(entry) - _ITEM_KEYS
        if unknown:
            raise InputError(f"{source}: item #{k}: unknown keys {sorted(unknown)}")
        missing = {"name", "family", "occasions"} - set(entry)
        if missing:
            raise InputError(f"{source}: item #{k}: missing {sorted(missing)}")
        kw = dict(entry)
        for key in ("trials", "time_scores", "covariates"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "factors" in kw:
            kw["factors"] = tuple(int(f) - 1 for f in kw["factors"])
        try:
            items.append(Item(**kw))
        except TypeError as exc:
            raise InputError(f"{source}: item #{k}: {exc}") from None
    return ModelSpec(
        items=tuple(items),
        n_factors=int(cfg.get("n_factors", 0)),
        loadings=cfg.get("loadings", "time-invariant"),
        anchors=tuple(cfg["anchors"]) if "anchors" in cfg else None,
    )


def read_model(path) -> ModelSpec:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: cannot read model config ({exc.strerror})") from None
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None
    return spec_from_mapping(cfg, str(path))


def _toml_value(v) -> str:
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def model_to_toml(spec: ModelSpec) -> str:
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"n_factors = {spec.n_factors}",
        f"loadings = {_toml_value(spec.loadings)}",
    ]
    if spec.n_factors:
        lines.append(f"anchors = {_toml_value(list(spec.anchors))}")
    for it in spec.items:
        lines += ["", "[[items]]"]
        lines.append(f"name = {_toml_value(it.name)}")
        lines.append(f"family = {_toml_value(it.family)}")
        lines.append(f"occasions = {it.occasions}")
        lines.append(f"degree = {it.degree}")
        if it.trials is not None:
            lines.append(f"trials = {_toml_value(list(it.trials))}")
        lines.append(f"time_scores = {_toml_value([float(t) for t in it.time_scores])}")
        if it.family == "normal":
            lines.append(f"residuals = {_toml_value(it.residuals)}")
        if it.covariates:
            lines.append(f"covariates = {_toml_value(list(it.covariates))}")
            lines.append(f"covariate_effects = {_toml_value(it.covariate_effects)}")
        if it.factors is not None:
            lines.append(f"factors = {_toml_value([k + 1 for k in it.factors])}")
    return "\n".join(lines) + "\n"


def write_model(spec: ModelSpec, path) -> None:
    Path(path).write_text(model_to_toml(spec))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def read_params(path, spec: ModelSpec) -> ParameterSet:
    """Read a JSON object ``{"format_version": 1, "parameters": {name: value}}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"{path}: cannot read parameter file ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "parameters" not in doc:
        raise InputError(f"{path}: expected an object with a 'parameters' mapping")
    if doc.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    params = params_from_dict(spec, doc["parameters"])
    problems = validate(spec, params)
    if problems:
        raise InputError(f"{path}: " + "; ".join(problems))
    return params


def params_json(spec: ModelSpec, params: ParameterSet) -> str:
    doc = {"format_version": FORMAT_VERSION, "parameters": params_to_dict(spec, params)}
    return json.dumps(doc, indent=2) + "\n"


def write_params(spec: ModelSpec, params: ParameterSet, path) -> None:
    Path(path).write_text(params_json(spec, params))


# ---------------------------------------------------------------------------
# panel CSV
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def covariate_columns(spec: ModelSpec) -> list[str]:
    cols: list[str] = []
    for it in spec.items:
        cols += [c for c in it.covariates if c not in cols]
    return cols


def write_panel(data: PanelDataset, spec: ModelSpec, path) -> None:
    """Write ``data`` in long format; floats are written with ``repr`` so they round-trip exactly."""
    data.check(spec)
    cols = covariate_columns(spec)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(PANEL_HEADER) + cols)
        for i, pid in enumerate(data.ids):
            for j, it in enumerate(spec.items):
                for t in range(it.occasions):
                    y = data.responses[j][i, t]
                    trials = str(it.trials[t]) if it.family == "binomial" else ""
                    row = [pid, it.name, str(t + 1), _fmt(y) if it.family == "binomial" else repr(float(y)), trials]
                    x = data.covariates[j]
                    for c in cols:
                        row.append(repr(float(x[i, t, it.covariates.index(c)])) if c in it.covariates else "")
                    w.writerow(row)


def _number(text: str, what: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"{where}: {what} {text!r} is not a number") from None
    if not math.isfinite(v):
        raise InputError(f"{where}: {what} {text!r} is not finite")
    return v


def ingest_panel(path, spec: ModelSpec) -> PanelDataset:
    """Read a long-format panel and check it against ``spec``.

    Errors name the file line or the missing (id, item, time) cell.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"{path}: cannot read data ({exc.strerror})") from None
    names = [it.name for it in spec.items]
    cells: dict[tuple[str, int, int], tuple[float, tuple[float, ...]]] = {}
    order: dict[str, None] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if tuple(header[:5]) != PANEL_HEADER:
            raise InputError(f"{path}: line 1: header must start with {','.join(PANEL_HEADER)}")
        cov_cols = header[5:]
        needed = covariate_columns(spec)
        for c in needed:
            if c not in cov_cols:
                raise InputError(f"{path}: line 1: missing covariate column {c!r}")
        for row in reader:
            line = reader.line_num
            where = f"{path}: line {line}"
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{where}: expected {len(header)} fields, got {len(row)}")
            pid, item, time_s, value_s, trials_s = (f.strip() for f in row[:5])
            if not pid:
                raise InputError(f"{where}: empty id")
            if item not in names:
                raise InputError(f"{where}: unknown item {item!r}")
            j = names.index(item)
            it = spec.items[j]
            try:
                t = int(time_s)
            except ValueError:
                raise InputError(f"{where}: time {time_s!r} is not an integer") from None
            if not 1 <= t <= it.occasions:
                raise InputError(f"{where}: item {item!r} has occasions 1..{it.occasions}, got {t}")
            y = _number(value_s, "value", where)
            if it.family == "binomial":
                if not trials_s:
                    raise InputError(f"{where}: binomial item {item!r} needs a trials value")
                n_t = _number(trials_s, "trials", where)
                if n_t != it.trials[t - 1]:
                    raise InputError(
                        f"{where}: trials {trials_s} for ({pid}, {item}, {t}) "
                        f"differ from the model's {it.trials[t - 1]}"
                    )
                if y != round(y) or not 0 <= y <= n_t:
                    raise InputError(f"{where}: value {value_s} outside 0..{int(n_t)} trials")
            elif trials_s:
                raise InputError(f"{where}: normal item {item!r} takes no trials value")
            x = []
            for c in it.covariates:
                x.append(_number(row[5 + cov_cols.index(c)].strip(), f"covariate {c!r}", where))
            key = (pid, j, t)
            if key in cells:
                raise InputError(f"{where}: duplicate cell ({pid}, {item}, {t})")
            cells[key] = (y, tuple(x))
            order.setdefault(pid, None)
    ids = list(order)
    if not ids:
        raise InputError(f"{path}: no data rows")
    responses, covariates = [], []
    for j, it in enumerate(spec.items):
        Y = np.empty((len(ids), it.occasions))
        X = np.empty((len(ids), it.occasions, len(it.covariates))) if it.covariates else None
        for i, pid in enumerate(ids):
            for t in range(it.occasions):
                cell = cells.get((pid, j, t + 1))
                if cell is None:
                    raise InputError(f"{path}: missing cell (id={pid}, item={it.name}, time={t + 1})")
                Y[i, t] = cell[0]
                if X is not None:
                    X[i, t] = cell[1]
        responses.append(Y)
        covariates.append(X)
    data = PanelDataset(tuple(ids), tuple(responses), tuple(covariates))
    data.check(spec)
    return data
