"""Model spec loading and report, trace and plot writers.

Numbers are written at 12 significant digits and fields in a fixed order, so
the same input always produces byte-identical files.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence
from xml.sax.saxutils import escape

import jsonschema
import numpy as np

from .gibbs import Trace
from .model import ModelError, ModelInstance, simulate_data
from .params import CenteringAssignment
from .rates import RateReport
from .tree import HierarchyTree, build_tree

DIGITS = 12


class SpecError(ValueError):
    """Malformed model spec or config; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


# -- numbers ------------------------------------------------------------------


def fmt(x) -> str:
    """Format one number at 12 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, f".{DIGITS}g")


def _round_tree(obj):
    """Round floats recursively; non-finite floats become ``None``."""
    if isinstance(obj, Mapping):
        return {str(k): _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_tree(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round_tree(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(format(x, f".{DIGITS}g")) if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    """Deterministic JSON text with rounded numbers."""
    return json.dumps(_round_tree(obj), indent=2, allow_nan=False) + "\n"


def write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _csv_text(header: Sequence[str], rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


# -- model specs --------------------------------------------------------------


def load_schema() -> dict:
    text = resources.files("hiergibbs").joinpath("schemas/model_spec.schema.json").read_text("utf-8")
    return json.loads(text)


def _field_name(error: jsonschema.ValidationError) -> str:
    path = "/".join(str(p) for p in error.absolute_path)
    if error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        if extra:
            path = "/".join(filter(None, [path, extra[0]]))
    if error.validator == "required":
        missing = [r for r in error.validator_value if r not in error.instance]
        if missing:
            path = "/".join(filter(None, [path, missing[0]]))
    return path or "<root>"


def validate_spec(spec: Mapping) -> None:
    """Check ``spec`` against the shipped schema, naming the first bad field."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(spec), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    err = errors[0]
    if err.validator == "oneOf" and not err.absolute_path:
        if "branching" in spec and "parent_list" in spec:
            raise SpecError("give either branching or parent_list, not both", "branching")
        raise SpecError("need one of branching or parent_list", "branching")
    if err.validator == "not" and not err.absolute_path:
        raise SpecError("give either data or simulate, not both", "data")
    if err.validator == "oneOf" and list(err.absolute_path) == ["variances"]:
        raise SpecError("give exactly one of levels or nodes", "variances")
    raise SpecError(err.message, _field_name(err))


def _per_leaf(value, tree: HierarchyTree, name: str, dtype=float) -> np.ndarray:
    leaves = tree.leaves
    if isinstance(value, Mapping):
        labels = [tree.labels[t] for t in leaves]
        unknown = sorted(set(value) - set(labels))
        if unknown:
            raise SpecError(f"unknown leaf label {unknown[0]!r}", f"{name}/{unknown[0]}")
        missing = [lab for lab in labels if lab not in value]
        if missing:
            raise SpecError(f"missing leaf {missing[0]!r}", f"{name}/{missing[0]}")
        return np.array([value[lab] for lab in labels], dtype=dtype)
    if isinstance(value, (list, tuple)):
        if len(value) != len(leaves):
            raise SpecError(f"expected {len(leaves)} per-leaf values, got {len(value)}", name)
        return np.array(value, dtype=dtype)
    return np.full(len(leaves), value, dtype=dtype)


def model_from_spec(spec: Mapping) -> tuple[ModelInstance, dict[str, Any]]:
    """Build a model from a parsed spec.

    Returns the model and a dict of extras: ``centering`` (a per-node
    ``CenteringAssignment`` or ``None``) and ``prior`` (the raw prior dict or
    ``None``). Malformed fields raise ``SpecError``; structurally invalid
    trees or precisions raise ``ModelError``.
    """
    validate_spec(spec)
    if "branching" in spec:
        tree = build_tree(spec["branching"])
    else:
        tree = build_tree(parents=spec["parent_list"])
    if "levels" in spec and spec["levels"] != tree.depth:
        raise SpecError(f"tree has {tree.depth} levels, spec says {spec['levels']}", "levels")

    var = spec["variances"]
    tau = np.zeros(tree.n_nodes)
    if "levels" in var:
        if len(var["levels"]) != tree.depth - 1:
            raise SpecError(f"need {tree.depth - 1} level variances, got {len(var['levels'])}", "variances/levels")
        for d, v in enumerate(var["levels"], start=1):
            tau[tree.levels[d]] = 1.0 / v
    else:
        nodes = var["nodes"]
        for lab, v in nodes.items():
            try:
                t = tree.index(lab)
            except KeyError:
                raise SpecError(f"unknown node label {lab!r}", f"variances/nodes/{lab}") from None
            if t == 0:
                raise SpecError("the root has a flat prior and takes no variance", f"variances/nodes/{lab}")
            tau[t] = 1.0 / v
        missing = [tree.labels[t] for t in range(1, tree.n_nodes) if tau[t] == 0]
        if missing:
            raise SpecError(f"missing node {missing[0]!r}", f"variances/nodes/{missing[0]}")
    tau_e = 1.0 / _per_leaf(var["noise"], tree, "variances/noise")
    n_obs = _per_leaf(spec["leaf_counts"], tree, "leaf_counts", dtype=np.int64)
    model = ModelInstance(tree, tau, tau_e, n_obs)

    if "data" in spec:
        data = spec["data"]
        ybar = _per_leaf(data["ybar"], tree, "data/ybar")
        ss = _per_leaf(data["ss_within"], tree, "data/ss_within") if "ss_within" in data else None
        if ss is not None and np.any(ss < 0):
            raise SpecError("within-leaf sums of squares must be non-negative", "data/ss_within")
        model = model.with_data(ybar, ss)
    elif "simulate" in spec:
        sim = spec["simulate"]
        model = simulate_data(model, float(sim.get("mu", 0.0)), int(sim["seed"]))

    centering = None
    if "centering" in spec:
        values = np.zeros(tree.n_nodes, dtype=np.int64)
        for lab, v in spec["centering"].items():
            try:
                values[tree.index(lab)] = v
            except KeyError:
                raise SpecError(f"unknown node label {lab!r}", f"centering/{lab}") from None
        if values[0]:
            raise SpecError("the root cannot be non-centred", f"centering/{tree.labels[0]}")
        centering = CenteringAssignment(tuple(int(v) for v in values), per_level=False)
    return model, {"centering": centering, "prior": spec.get("prior")}


def load_model_spec(path) -> tuple[ModelInstance, dict[str, Any]]:
    """Read and build a model spec file."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise SpecError(f"model spec {path} does not exist", "model") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid JSON at line {exc.lineno}: {exc.msg}", "model") from None
    if not isinstance(spec, dict):
        raise SpecError("model spec must be a JSON object", "model")
    return model_from_spec(spec)


def spec_from_model(model: ModelInstance) -> dict:
    """Inverse of ``model_from_spec`` for models with data (or none)."""
    tree = model.tree
    parents = {tree.labels[t]: tree.labels[tree.parent[t]] for t in range(1, tree.n_nodes)}
    spec: dict[str, Any] = {
        "levels": tree.depth,
        "parent_list": parents,
        "variances": {
            "nodes": {tree.labels[t]: 1.0 / model.tau[t] for t in range(1, tree.n_nodes)},
            "noise": (1.0 / model.tau_e).tolist(),
        },
        "leaf_counts": model.n_obs.tolist(),
    }
    if tree.n_nodes == 1:
        raise ModelError("a single-node tree cannot be written as a parent list")
    if model.has_data:
        spec["data"] = {"ybar": model.ybar.tolist()}
        if model.ss_within is not None:
            spec["data"]["ss_within"] = model.ss_within.tolist()
    return spec


# -- reports ------------------------------------------------------------------


def report_json(report: RateReport) -> str:
    return dumps(report.to_dict())


def report_rows(report: RateReport) -> tuple[list[str], list[list]]:
    """Per-parametrization rows ``(param, rho, rho_delta0, ...)``.

    Subchain columns are empty when the model is not certified symmetric.
    """
    k = report.depth
    header = ["param", "rho"] + [f"rho_delta{p}" for p in range(k)]
    rows = []
    for code in sorted(report.rates):
        sub = report.subchains.get(code)
        tail = [fmt(v) for v in sub] if sub else [""] * k
        rows.append([code, fmt(report.rates[code])] + tail)
    return header, rows


def report_csv(report: RateReport) -> str:
    header, rows = report_rows(report)
    return _csv_text(header, rows)


def grid_csv(rows) -> str:
    """Long-format grid ``(log_tvar_a, log_tvar_b, param, log1m_rho)``."""
    return _csv_text(["log_tvar_a", "log_tvar_b", "param", "log1m_rho"], rows)


def emit_report(report: RateReport, path, format: str = "json") -> Path:
    """Write ``report`` as JSON or as the per-parametrization CSV."""
    if format == "json":
        return write_text(path, report_json(report))
    if format == "csv":
        return write_text(path, report_csv(report))
    raise ValueError(f"unknown report format {format!r}")


# -- traces -------------------------------------------------------------------


def trace_csv(trace: Trace, thin: int = 1, include_variances: bool = True) -> str:
    """CSV with node labels as header, one row per kept iteration."""
    if thin < 1:
        raise ValueError("thin must be at least 1")
    header = list(trace.labels)
    cols = [trace.states[::thin]]
    if include_variances and trace.variances is not None:
        header += [f"var_{v}" for v in trace.variance_labels]
        cols.append(trace.variances[::thin])
    data = np.hstack(cols)
    body = [header] + [[fmt(v) for v in row] for row in data]
    buf = _io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(body)
    return buf.getvalue()


def write_trace(trace: Trace, path, thin: int = 1) -> Path:
    return write_text(path, trace_csv(trace, thin))


def read_trace_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))


# -- plots --------------------------------------------------------------------

_PANEL_W, _PANEL_H, _PAD_L, _PAD_R, _PAD_T, _PAD_B = 640, 120, 70, 20, 24, 22
_MAX_POINTS = 2000


def _series(source, coordinates: Sequence[str]) -> list[np.ndarray]:
    out = []
    for name in coordinates:
        if isinstance(source, Trace):
            out.append(np.asarray(source.column(name), dtype=float))
        else:
            if name not in source:
                raise KeyError(f"coordinate {name!r} not in trace")
            out.append(np.asarray(source[name], dtype=float).ravel())
    return out


def traceplot_svg(
    source: Trace | Mapping[str, np.ndarray],
    coordinates: Sequence[str],
    y_range: tuple[float, float] | None = None,
    shared_range: bool = False,
    title: str | None = None,
) -> str:
    """Stacked line plots, one panel per coordinate.

    ``y_range`` fixes every panel's axis; ``shared_range`` uses the common
    range of all panels. Long series are thinned to at most 2000 points.
    """
    if not coordinates:
        raise ValueError("no coordinates requested")
    series = _series(source, coordinates)
    if any(len(s) == 0 for s in series):
        raise ValueError("cannot plot an empty trace")
    if y_range is None and shared_range:
        y_range = (min(float(np.min(s)) for s in series), max(float(np.max(s)) for s in series))
    top = _PAD_T if title else 4
    height = top + len(series) * (_PANEL_H + _PAD_T + _PAD_B)
    width = _PAD_L + _PANEL_W + _PAD_R
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for i, (name, s) in enumerate(zip(coordinates, series)):
        y0 = top + i * (_PANEL_H + _PAD_T + _PAD_B) + _PAD_T
        lo, hi = y_range if y_range is not None else (float(np.min(s)), float(np.max(s)))
        if not hi > lo:
            lo, hi = lo - 0.5, hi + 0.5
        stride = max(1, math.ceil(len(s) / _MAX_POINTS))
        idx = np.arange(0, len(s), stride)
        xs = _PAD_L + (idx / max(len(s) - 1, 1)) * _PANEL_W
        ys = y0 + _PANEL_H - (np.clip(s[idx], lo, hi) - lo) / (hi - lo) * _PANEL_H
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        parts += [
            f'<text x="{_PAD_L}" y="{y0 - 6:.1f}">{escape(name)}</text>',
            f'<rect x="{_PAD_L}" y="{y0}" width="{_PANEL_W}" height="{_PANEL_H}" fill="none" stroke="#888"/>',
            f'<text x="{_PAD_L - 4}" y="{y0 + 10}" text-anchor="end">{escape(fmt(float(f"{hi:.4g}")))}</text>',
            f'<text x="{_PAD_L - 4}" y="{y0 + _PANEL_H}" text-anchor="end">{escape(fmt(float(f"{lo:.4g}")))}</text>',
            f'<text x="{_PAD_L + _PANEL_W}" y="{y0 + _PANEL_H + 14}" text-anchor="end">{len(s)}</text>',
            f'<polyline fill="none" stroke="#1f4e9c" stroke-width="0.8" points="{pts}"/>',
        ]
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_traceplot(
    source: Trace | Mapping[str, np.ndarray],
    coordinates: Sequence[str],
    path,
    y_range: tuple[float, float] | None = None,
    shared_range: bool = False,
    title: str | None = None,
) -> Path:
    return write_text(path, traceplot_svg(source, coordinates, y_range, shared_range, title))
