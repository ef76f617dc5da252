"""Command-line interface: ``hiergibbs {analyze,sample,recommend,verify,bench}``.

Settings come from defaults, then an optional JSON config file, then flags;
later sources win. Exit codes: 0 success, 2 bad config or spec, 3 invalid
model, 4 verification counterexample under ``--strict``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .gibbs import SamplerError, run_chain, run_variance_augmented, spectral_radius, update_matrix
from .io import SpecError, dumps, emit_report, emit_traceplot, grid_csv, load_model_spec, write_text, write_trace
from .model import ModelError, ModelInstance, posterior_precision
from .multigrid import ResidualDecomposition, skeleton, verify_factorization
from .params import (
    ParametrizationError,
    as_reparam,
    bespoke_recommend_2,
    bespoke_recommend_3,
    optimal_pncp,
)
from .rates import analyze, assignment_codes, empirical_rate, rate_grid
from .symmetry import DegenerateWalkError, aux_walk, check_symmetry
from .tree import TreeStructureError

COMMANDS = ("analyze", "sample", "recommend", "verify", "bench")
EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_VERIFY = 0, 2, 3, 4
DEFAULT_ITERS = 10_000
MIN_EMPIRICAL = 1000


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs; ``None`` means "not requested".

    ``param`` is a per-level code such as ``"cn"``, a single letter applied to
    every level, or one of ``recommended``, ``spec`` (the model file's
    per-node centring), ``pncp`` and ``adaptive``.
    """

    command: str
    model: str | None = None
    param: str = "c"
    iters: int | None = None
    seed: int = 0
    burn_in: int = 0
    thin: int = 1
    init: str = "zero"
    unknown_variances: bool = False
    out: str | None = None
    csv: str | None = None
    grid: str | None = None
    plot: str | None = None
    shared_range: bool = False
    grid_min: float = -8.0
    grid_max: float = 8.0
    grid_points: int = 33
    tol: float = 1e-9
    block_tol: float = 1e-10
    strict: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TYPES: dict[str, tuple[type, ...]] = {
    "command": (str,),
    "model": (str, type(None)),
    "param": (str,),
    "iters": (int, type(None)),
    "seed": (int,),
    "burn_in": (int,),
    "thin": (int,),
    "init": (str,),
    "unknown_variances": (bool,),
    "out": (str, type(None)),
    "csv": (str, type(None)),
    "grid": (str, type(None)),
    "plot": (str, type(None)),
    "shared_range": (bool,),
    "grid_min": (float, int),
    "grid_max": (float, int),
    "grid_points": (int,),
    "tol": (float, int),
    "block_tol": (float, int),
    "strict": (bool,),
}
assert set(_TYPES) == {f.name for f in fields(RunConfig)}


def serialize_config(config: RunConfig) -> str:
    """JSON text accepted back by ``parse_config`` as a config file."""
    return json.dumps(config.to_dict(), indent=2) + "\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(
        prog="hiergibbs",
        description="Convergence rates and Gibbs samplers for Gaussian hierarchical models.",
        argument_default=S,
    )
    p.add_argument("command", nargs="?", choices=COMMANDS, default=None, help="what to run")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--model", help="model spec JSON")
    p.add_argument("--param", help="cn-style code, or recommended | spec | pncp | adaptive (verify also takes all)")
    p.add_argument("--iters", type=int, help="sweeps to run (analyze: adds empirical rates)")
    p.add_argument("--seed", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int, help="keep every n-th row in the trace file")
    p.add_argument("--init", choices=("zero", "truth"), help="starting state of the sampler")
    p.add_argument("--unknown-variances", dest="unknown_variances", action="store_true")
    p.add_argument("--out", help="main output file (report JSON or trace CSV)")
    p.add_argument("--csv", help="per-parametrization rate table")
    p.add_argument("--grid", help="long-format log(1-rho) grid over log tvar axes")
    p.add_argument("--plot", help="SVG trace plot of the skeleton")
    p.add_argument("--shared-range", dest="shared_range", action="store_true")
    p.add_argument("--grid-min", dest="grid_min", type=float)
    p.add_argument("--grid-max", dest="grid_max", type=float)
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--tol", type=float, help="symmetry certification tolerance")
    p.add_argument("--block-tol", dest="block_tol", type=float, help="off-block tolerance for verify")
    p.add_argument("--strict", action="store_true", help="exit 4 when verification fails")
    return p


def _config_file(file) -> dict:
    if file is None:
        return {}
    if isinstance(file, Mapping):
        data = dict(file)
    else:
        path = Path(file)
        try:
            data = json.loads(path.read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config: file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("config: must be a JSON object")
    unknown = sorted(set(data) - set(_TYPES))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    for key, value in data.items():
        types = _TYPES[key]
        ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
        if not ok:
            raise ConfigError(f"{key}: expected {' or '.join(t.__name__ for t in types)}, got {value!r}")
    return data


def parse_config(args: Sequence[str] | None = None, file=None) -> RunConfig:
    """Merge defaults, a config file (path or dict) and command-line flags.

    ``--config`` inside ``args`` names the file when ``file`` is not given.
    """
    ns = vars(_build_parser().parse_args(list(args) if args is not None else None))
    cfg_path = ns.pop("config", None)
    if ns.get("command") is None:
        ns.pop("command", None)
    merged = _config_file(file if file is not None else cfg_path)
    merged.update(ns)
    if "command" not in merged or merged["command"] is None:
        raise ConfigError(f"command: choose one of {', '.join(COMMANDS)}")
    for key in ("grid_min", "grid_max", "tol", "block_tol"):
        if key in merged:
            merged[key] = float(merged[key])
    config = RunConfig(**merged)
    _validate(config)
    return config


def _validate(c: RunConfig) -> None:
    if c.command not in COMMANDS:
        raise ConfigError(f"command: unknown command {c.command!r}")
    if c.command != "bench" or c.model is not None:
        if c.model is None:
            raise ConfigError("model: a model spec is required")
    if c.model is not None and not Path(c.model).is_file():
        raise ConfigError(f"model: file {c.model} does not exist")
    if c.iters is not None and c.iters < 1:
        raise ConfigError("iters: must be positive")
    if c.burn_in < 0:
        raise ConfigError("burn_in: must be non-negative")
    iters = c.iters if c.iters is not None else (DEFAULT_ITERS if c.command == "sample" else None)
    if iters is not None and iters <= c.burn_in:
        raise ConfigError(f"iters: must exceed burn_in ({iters} <= {c.burn_in})")
    if c.thin < 1:
        raise ConfigError("thin: must be at least 1")
    if not 0 <= c.seed < 2**64:
        raise ConfigError("seed: must be a 64-bit unsigned integer")
    if c.init not in ("zero", "truth"):
        raise ConfigError("init: must be 'zero' or 'truth'")
    if c.grid_points < 2 or not c.grid_max > c.grid_min:
        raise ConfigError("grid_points: need at least 2 points on a non-empty range")
    if not (c.tol > 0 and c.block_tol > 0):
        raise ConfigError("tol: tolerances must be positive")
    if c.command == "sample" and c.out is None:
        raise ConfigError("out: sample needs an output path for the trace")


# -- helpers ------------------------------------------------------------------


def thread_count() -> int:
    """Worker threads, capped by ``HIERGIBBS_THREADS`` when set."""
    n = os.cpu_count() or 1
    cap = os.environ.get("HIERGIBBS_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"HIERGIBBS_THREADS: expected an integer, got {cap!r}") from None
    return n


def _resolve_param(c: RunConfig, model: ModelInstance, extras: dict):
    tree = model.tree
    name = c.param
    if name == "spec":
        if extras.get("centering") is None:
            raise ConfigError("param: the model spec has no centering map")
        return extras["centering"]
    if name == "pncp":
        return optimal_pncp(posterior_precision(model), tree).reparam
    if name == "recommended":
        report = analyze(model, c.tol, factorize=False)
        return report.recommended
    if name == "adaptive":
        return "c"
    return name


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        write_text(path, text)


def _grid_rows(c: RunConfig):
    axis = np.linspace(c.grid_min, c.grid_max, c.grid_points)
    return rate_grid(axis, axis, 1.0, workers=thread_count())


def _empirical_summary(est) -> dict:
    return {"estimate": est.estimate, "stderr": est.stderr, "n": est.n, "widened": est.widened}


# -- commands -----------------------------------------------------------------


def cmd_analyze(c: RunConfig, model: ModelInstance, extras: dict) -> int:
    report = analyze(model, c.tol)
    if c.iters is not None and model.tree.depth > 1:
        if not model.has_data:
            raise ConfigError("model: empirical rates need data or a simulate block")
        if c.iters - c.burn_in < MIN_EMPIRICAL:
            raise ConfigError(f"iters: need at least {MIN_EMPIRICAL} sweeps after burn-in")
        walk = aux_walk(posterior_precision(model), model.tree)

        def one(code):
            trace = run_chain(model, code, c.iters, c.seed)
            return code, empirical_rate(trace, c.burn_in, walk=walk, seed=c.seed)

        with ThreadPoolExecutor(max_workers=thread_count()) as pool:
            results = list(pool.map(one, sorted(report.rates)))
        report.empirical = {code: _empirical_summary(est) for code, est in results}
    if c.out is None:
        sys.stdout.write(dumps(report.to_dict()))
    else:
        emit_report(report, c.out, "json")
    if c.csv is not None:
        emit_report(report, c.csv, "csv")
    if c.grid is not None:
        write_text(c.grid, grid_csv(_grid_rows(c)))
    return EXIT_OK


def cmd_sample(c: RunConfig, model: ModelInstance, extras: dict) -> int:
    if not model.has_data:
        raise ConfigError("model: sampling needs data or a simulate block")
    iters = c.iters if c.iters is not None else DEFAULT_ITERS
    param = _resolve_param(c, model, extras)
    rep = as_reparam(param, model.tree)
    init = None
    if c.init == "truth":
        if model.true_latent is None:
            raise ConfigError("init: 'truth' needs a simulated model")
        init = model.true_latent if c.param == "adaptive" else rep.apply(model.true_latent)
    adaptive = c.param == "adaptive"
    if c.unknown_variances or adaptive:
        trace = run_variance_augmented(
            model, extras.get("prior"), iters, c.seed, adaptive=adaptive, param=rep, init=init
        )
    else:
        trace = run_chain(model, rep, iters, c.seed, init=init)
    write_trace(trace, c.out, c.thin)
    summary: dict[str, Any] = {"iters": iters, "param": trace.param, "rows": len(trace.states[:: c.thin])}
    walk = aux_walk(posterior_precision(model), model.tree)
    if iters - c.burn_in >= MIN_EMPIRICAL:
        summary["empirical_rate"] = _empirical_summary(empirical_rate(trace, c.burn_in, walk=walk, seed=c.seed))
    if trace.assignments is not None:
        kept = trace.assignments[c.burn_in :]
        summary["assignments"] = {a: kept.count(a) for a in sorted(set(kept))}
    if c.plot is not None:
        sk = skeleton(trace, walk)[c.burn_in :]
        names = [f"level {d} mean" for d in range(sk.shape[1])]
        emit_traceplot(dict(zip(names, sk.T)), names, c.plot, shared_range=c.shared_range, title=trace.param)
    sys.stdout.write(dumps(summary))
    return EXIT_OK


def cmd_recommend(c: RunConfig, model: ModelInstance, extras: dict) -> int:
    tree = model.tree
    report = analyze(model, c.tol, factorize=False)
    out: dict[str, Any] = {
        "recommended": report.recommended,
        "rates": report.rates,
        "normalized_variances": report.normalized_variances,
    }
    bespoke = None
    if tree.depth == 2:
        bespoke = bespoke_recommend_2(model)
    elif tree.depth == 3:
        bespoke = bespoke_recommend_3(model)
    if bespoke is not None:
        vals = bespoke.resolve(tree)
        out["bespoke"] = {tree.labels[t]: int(vals[t]) for t in range(1, tree.n_nodes)}
        out["bespoke_rate"] = spectral_radius(update_matrix(model, bespoke).B)
    _emit(dumps(out), c.out)
    return EXIT_OK


def cmd_verify(c: RunConfig, model: ModelInstance, extras: dict) -> int:
    tree = model.tree
    Q = posterior_precision(model)
    cert = check_symmetry(Q, tree, c.tol)
    dec = ResidualDecomposition(aux_walk(Q, tree))
    if c.param == "all":
        codes = assignment_codes(tree.depth)
    else:
        codes = [c.param]
    out: dict[str, Any] = {
        "certified": cert.certified,
        "condition": cert.condition,
        "max_deviation": cert.max_deviation,
        "worst_pair": list(cert.worst_pair) if cert.worst_pair else None,
        "params": {},
    }
    failed = False
    for code in codes:
        param = _resolve_param(dataclasses.replace(c, param=code), model, extras)
        upd = update_matrix(model, param)
        rep = verify_factorization(upd, dec)
        ok = rep.is_block_diagonal(c.block_tol)
        failed |= not ok
        out["params"][code] = {
            "rate": upd.spectral_radius,
            "block_rates": rep.block_rates,
            "max_off_block": rep.max_off_block,
            "block_diagonal": ok,
        }
    out["worst_off_block"] = max(v["max_off_block"] for v in out["params"].values())
    _emit(dumps(out), c.out)
    return EXIT_VERIFY if (c.strict and failed) else EXIT_OK


def cmd_bench(c: RunConfig, model: ModelInstance | None, extras: dict) -> int:
    timings: dict[str, float] = {}
    result: dict[str, Any] = {"threads": thread_count()}
    if model is not None:
        t0 = time.perf_counter()
        report = analyze(model, c.tol)
        timings["analyze"] = time.perf_counter() - t0
        result["rates"] = report.rates
        if c.iters is not None and model.has_data:
            t0 = time.perf_counter()
            run_chain(model, _resolve_param(c, model, extras), c.iters, c.seed)
            timings["sample"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    rows = _grid_rows(c)
    timings["grid"] = time.perf_counter() - t0
    result["grid_rows"] = len(rows)
    result["seconds"] = timings
    _emit(dumps(result), c.out)
    return EXIT_OK


_HANDLERS = {
    "analyze": cmd_analyze,
    "sample": cmd_sample,
    "recommend": cmd_recommend,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def run(config: RunConfig) -> int:
    """Execute a validated config and return the exit code."""
    model, extras = (None, {})
    if config.model is not None:
        model, extras = load_model_spec(config.model)
    return _HANDLERS[config.command](config, model, extras)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        config = parse_config(argv)
        return run(config)
    except (ConfigError, SpecError) as exc:
        print(f"hiergibbs: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParametrizationError as exc:
        print(f"hiergibbs: config error: param: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, TreeStructureError, SamplerError, DegenerateWalkError) as exc:
        print(f"hiergibbs: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"hiergibbs: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
