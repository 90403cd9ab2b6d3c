"""Command line entry point: ``regem impute`` and ``regem compare``.

The report builder used by the command line is importable
(:func:`execute` and :func:`render_report`), so a report produced by
``regem impute`` is byte-for-byte what the same library calls give.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .closed_form import ImputationSet, impute_closed_form
from .constraints import CONSTRAINED_MAX_ITER, ConstraintSpec, constrained_nls, impute_with_total
from .dataset import COMPLETE, RESPONSE_ONLY, Dataset, load_csv, validate
from .em import DEFAULT_MAX_ITER as EM_MAX_ITER
from .em import DEFAULT_TOL as EM_TOL
from .em import run_em
from .errors import RegemError
from .multivar import DEFAULT_MAX_ITER as NLS_MAX_ITER
from .multivar import DEFAULT_TOL as NLS_TOL
from .multivar import NlsResult, build_concatenated, solve_concatenated
from .uncertainty import ImputationDraws, bootstrap_impute, multiple_impute, two_way_impute

log = logging.getLogger("regem")

SCHEMA = 1
METHODS = ("closed-form", "em", "nls", "constrained", "two-way", "bootstrap", "mi")
STOCHASTIC = ("bootstrap", "mi")
DF_CONVENTIONS = ("raw", "adjusted", "both")


class ConfigError(ValueError):
    """Invalid command line configuration."""


@dataclass(frozen=True)
class RunConfig:
    input: str
    method: str
    response: str | None = None
    predictors: tuple[str, ...] | None = None
    constraints: str | None = None
    tol: float | None = None
    max_iter: int | None = None
    B: int = 1000
    M: int = 100
    seed: int | None = None
    df_convention: str = "raw"
    init: str = "complete-case"
    min_valid: float | None = None
    target_count: int | None = None
    out: str | None = None
    trace_out: str | None = None
    draws_out: str | None = None
    missing_tokens: tuple[str, ...] = field(default=("", ".", "NA"))

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.df_convention not in DF_CONVENTIONS:
            raise ConfigError(f"df convention must be one of {DF_CONVENTIONS}")
        if self.method in STOCHASTIC and self.seed is None:
            raise ConfigError(f"method {self.method} needs --seed")
        if self.method == "constrained" and not self.constraints:
            raise ConfigError("method constrained needs --constraints")
        if self.constraints and self.method not in ("constrained", "closed-form"):
            raise ConfigError("--constraints applies to methods constrained and closed-form only")
        if self.trace_out and self.method != "em":
            raise ConfigError("--trace-out is only produced by method em")
        if self.draws_out and self.method not in STOCHASTIC:
            raise ConfigError("--draws-out is only produced by methods bootstrap and mi")
        if self.init != "complete-case" and self.method != "em":
            raise ConfigError("only method em accepts explicit starting coefficients")
        if self.B < 1 or self.M < 1:
            raise ConfigError("B and M must be positive")
        if self.tol is not None and not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ConfigError("max-iter must be positive")


@dataclass
class RunOutput:
    report: dict
    trace_csv: str | None = None
    draws_csv: str | None = None


def _default_tol(method: str) -> float:
    return EM_TOL if method == "em" else NLS_TOL


def _default_max_iter(method: str) -> int:
    if method == "em":
        return EM_MAX_ITER
    if method == "constrained":
        return CONSTRAINED_MAX_ITER
    return NLS_MAX_ITER


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _cells_from_set(imp: ImputationSet, convention: str) -> list[dict]:
    return [
        {"cell": c.label, "variable": c.variable, "row": c.row, "point": _num(c.point), "se": {convention: _num(c.se)}}
        for c in imp.cells
    ]


def _cells_from_nls(res: NlsResult, df_convention: str) -> list[dict]:
    conventions = ("raw", "adjusted") if df_convention == "both" else (df_convention,)
    nc = res.system.n_coef
    out = []
    for q, c in enumerate(res.imputations("raw").cells):
        ses = {f"nls-{k}": _num(res.se(k)[nc + q]) for k in conventions}
        out.append(
            {"cell": c.label, "variable": c.variable, "row": c.row, "point": _num(c.point), "se": ses,
             "at_bound": bool(res.active[nc + q])}
        )
    return out


def _cells_from_draws(draws: ImputationDraws) -> list[dict]:
    conv = draws.method
    out = []
    for k, s in draws.summary().items():
        variable, row = k.rsplit("@", 1)
        out.append(
            {"cell": k, "variable": variable, "row": int(row), "point": s["mean"], "se": {conv: s["sd"]},
             "count": s["count"], "percentiles": {p: s[p] for p in ("p2.5", "p50", "p97.5")}}
        )
    return out


def _nls_convergence(res: NlsResult) -> dict:
    return {
        "converged": res.converged,
        "iterations": res.iterations,
        "message": res.message,
        "sse": _num(res.sse),
        "grad_norm": _num(res.grad_norm),
        "df_raw": res.df_raw,
        "df_adjusted": res.df_adjusted,
        "se_available": res.se_available,
    }


def _response_only_target(d: Dataset, cfg: RunConfig) -> str:
    pattern = validate(d)
    if cfg.response is not None:
        return cfg.response
    if len(pattern.incomplete_variables) != 1:
        raise ConfigError(
            f"method {cfg.method} needs a single incomplete response; found "
            f"{list(pattern.incomplete_variables)} (use --response or method nls)"
        )
    return pattern.incomplete_variables[0]


def _base_imputation(d: Dataset, cfg: RunConfig, tol, max_iter) -> ImputationSet:
    """Analytic imputations that seed normal multiple imputation."""
    pattern = validate(d)
    if pattern.classification == RESPONSE_ONLY or cfg.response is not None:
        return impute_closed_form(d, _response_only_target(d, cfg), cfg.predictors)
    res = solve_concatenated(build_concatenated(d), init=cfg.init, tol=tol, max_iter=max_iter)
    conv = "raw" if cfg.df_convention == "both" else cfg.df_convention
    return res.imputations(conv)


def execute(cfg: RunConfig) -> RunOutput:
    """Run one configuration and build its report (nothing is written)."""
    cfg.validate()
    d = load_csv(cfg.input, set(cfg.missing_tokens))
    pattern = validate(d)
    if pattern.classification == COMPLETE and cfg.method != "two-way":
        raise RegemError("input has no missing values; nothing to impute")
    tol = cfg.tol if cfg.tol is not None else _default_tol(cfg.method)
    max_iter = cfg.max_iter if cfg.max_iter is not None else _default_max_iter(cfg.method)

    convergence = None
    notes: list[str] = []
    trace_csv = draws_csv = None
    draws_summary = None
    m = cfg.method
    if m == "closed-form":
        response = _response_only_target(d, cfg)
        spec = ConstraintSpec.from_json(cfg.constraints) if cfg.constraints else None
        if spec is None:
            imp = impute_closed_form(d, response, cfg.predictors)
        else:
            vc = spec.variables.get(response)
            if vc is None or vc.mode != "total-linear" or spec.lower_bounds or len(spec.variables) != 1:
                raise ConfigError("closed-form accepts only a total-linear constraint on the response")
            imp = impute_with_total(d, response, cfg.predictors, vc.total, vc.mean_preserving)
        cells = _cells_from_set(imp, imp.se_convention)
        notes.extend(imp.notes)
    elif m == "em":
        init = cfg.init if cfg.init == "complete-case" else [float(v) for v in cfg.init.split(",")]
        fit, imp, trace = run_em(d, _response_only_target(d, cfg), cfg.predictors, init, tol, max_iter)
        cells = _cells_from_set(imp, "prediction")
        convergence = {"converged": trace.converged, "iterations": trace.final_tau, "trace_rows": len(trace.iterations)}
        trace_csv = trace.to_csv()
    elif m in ("nls", "constrained"):
        system = build_concatenated(d)
        if m == "nls":
            res = solve_concatenated(system, init=cfg.init, tol=tol, max_iter=max_iter)
        else:
            spec = ConstraintSpec.from_json(cfg.constraints)
            res = constrained_nls(system, spec, init=cfg.init, tol=tol, max_iter=max_iter)
        cells = _cells_from_nls(res, cfg.df_convention)
        convergence = _nls_convergence(res)
    elif m == "two-way":
        imp = two_way_impute(d)
        cells = _cells_from_set(imp, "two-way")
        notes.extend(imp.notes)
    elif m == "bootstrap":
        draws = bootstrap_impute(
            d, "auto", cfg.B, cfg.seed, cfg.min_valid, cfg.response, cfg.predictors, cfg.target_count
        )
        cells = _cells_from_draws(draws)
        draws_csv = draws.to_csv()
        draws_summary = {k: v for k, v in draws.summary_dict().items() if k != "cells"}
    else:
        base = _base_imputation(d, cfg, tol, max_iter)
        draws = multiple_impute(base, cfg.M, cfg.seed)
        cells = _cells_from_draws(draws)
        draws_csv = draws.to_csv()
        draws_summary = {k: v for k, v in draws.summary_dict().items() if k != "cells"}
        notes.append(f"normal draws around {base.method} imputations ({base.se_convention} standard errors)")

    report = {
        "schema": SCHEMA,
        "method": m,
        "cells": cells,
        "convergence": convergence,
        "draws": draws_summary,
        "notes": notes,
        "metadata": {
            "version": __version__,
            "input": str(cfg.input),
            "dataset": {
                "n": d.n,
                "p": d.p,
                "names": list(d.names),
                "missing": pattern.total_missing,
                "pattern": pattern.classification,
            },
            "parameters": {
                "response": cfg.response,
                "predictors": None if cfg.predictors is None else list(cfg.predictors),
                "constraints": cfg.constraints,
                "tol": tol,
                "max_iter": max_iter,
                "df_convention": cfg.df_convention,
                "init": cfg.init,
                "B": cfg.B if m == "bootstrap" else None,
                "M": cfg.M if m == "mi" else None,
                "seed": cfg.seed,
                "min_valid": cfg.min_valid,
                "target_count": cfg.target_count,
            },
            "defaults": {
                "tol_nls": NLS_TOL,
                "tol_em": EM_TOL,
                "max_iter": NLS_MAX_ITER,
                "max_iter_em": EM_MAX_ITER,
                "max_iter_constrained": CONSTRAINED_MAX_ITER,
                "df_convention": "raw",
                "init": "complete-case",
            },
        },
    }
    return RunOutput(report, trace_csv, draws_csv)


def render_report(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"


def compare_reports(reports: Sequence[dict], labels: Sequence[str] | None = None) -> str:
    """Long-format ``cell,method,point,se`` CSV over two or more reports."""
    if len(reports) < 2:
        raise ConfigError("compare needs at least two reports")
    labels = list(labels) if labels else [r.get("method", f"run{k}") for k, r in enumerate(reports)]
    if len(labels) != len(reports):
        raise ConfigError("one label per report is required")
    if len(set(labels)) != len(labels):
        labels = [f"{lab}#{k + 1}" for k, lab in enumerate(labels)]
    ref = [c["cell"] for c in reports[0]["cells"]]
    for lab, r in zip(labels, reports):
        got = [c["cell"] for c in r["cells"]]
        if sorted(got) != sorted(ref):
            raise ConfigError(f"report {lab!r} covers different cells: {sorted(set(got) ^ set(ref))}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "method", "point", "se"])
    for lab, r in zip(labels, reports):
        by_cell = {c["cell"]: c for c in r["cells"]}
        for k in ref:
            c = by_cell[k]
            se = next(iter(c["se"].values()), None)
            w.writerow([k, lab, "" if c["point"] is None else repr(c["point"]), "" if se is None else repr(se)])
    return buf.getvalue()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip()) if text else ()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regem", description="Regression-based imputation of missing values.")
    p.add_argument("--version", action="version", version=f"regem {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    imp = sub.add_parser("impute", help="impute the missing cells of a CSV file")
    imp.add_argument("--input", required=True, help="CSV with a header row; '.', 'NA' or empty mark missing")
    imp.add_argument("--method", required=True, choices=METHODS)
    imp.add_argument("--response", help="response variable for response-only methods")
    imp.add_argument("--predictors", type=_csv_list, help="comma-separated predictor names")
    imp.add_argument("--constraints", help="constraint spec JSON file")
    imp.add_argument("--tol", type=float, help=f"convergence tolerance (default {NLS_TOL:g}, em {EM_TOL:g})")
    imp.add_argument("--max-iter", type=int, dest="max_iter", help="iteration cap")
    imp.add_argument("--B", type=int, default=1000, help="bootstrap replicates (default 1000)")
    imp.add_argument("--M", type=int, default=100, help="multiple imputations (default 100)")
    imp.add_argument("--seed", type=int, help="seed, required for bootstrap and mi")
    imp.add_argument("--min-valid", type=float, dest="min_valid", help="discard bootstrap replicates below this")
    imp.add_argument("--target-count", type=int, dest="target_count", help="bootstrap until each cell has this many draws")
    imp.add_argument("--df-convention", choices=DF_CONVENTIONS, default="raw", dest="df_convention")
    imp.add_argument("--init", default="complete-case", help="'complete-case' or comma-separated em coefficients")
    imp.add_argument("--out", help="report JSON path (default stdout)")
    imp.add_argument("--trace-out", dest="trace_out", help="em iteration trace CSV")
    imp.add_argument("--draws-out", dest="draws_out", help="draws CSV for bootstrap and mi")

    cmp_ = sub.add_parser("compare", help="combine reports into a long-format CSV")
    cmp_.add_argument("reports", nargs="+", help="report JSON files")
    cmp_.add_argument("--labels", type=_csv_list, help="comma-separated label per report")
    cmp_.add_argument("--out", help="CSV path (default stdout)")
    return p


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        input=args.input,
        method=args.method,
        response=args.response,
        predictors=args.predictors,
        constraints=args.constraints,
        tol=args.tol,
        max_iter=args.max_iter,
        B=args.B,
        M=args.M,
        seed=args.seed,
        df_convention=args.df_convention,
        init=args.init,
        min_valid=args.min_valid,
        target_count=args.target_count,
        out=args.out,
        trace_out=args.trace_out,
        draws_out=args.draws_out,
    )


def _write(path: str | None, text: str, stdout) -> None:
    if path is None:
        stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _setup_logging() -> None:
    level = os.environ.get("REGEM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    """Run the command line; returns the exit status.

    Exit 0 on success, 2 for configuration errors and 1 for estimation
    errors.  Errors are written to stderr as ``{"schema": 1, "error": ...}``.
    """
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command == "impute":
            cfg = _config_from_args(args)
            out = execute(cfg)
            _write(cfg.out, render_report(out.report), stdout)
            if cfg.trace_out:
                Path(cfg.trace_out).write_text(out.trace_csv, encoding="utf-8")
            if cfg.draws_out:
                Path(cfg.draws_out).write_text(out.draws_csv, encoding="utf-8")
        else:
            reports = []
            for path in args.reports:
                try:
                    reports.append(json.loads(Path(path).read_text(encoding="utf-8")))
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}: not a JSON report ({exc})") from None
            _write(args.out, compare_reports(reports, args.labels), stdout)
    except (ConfigError, OSError) as exc:
        return _fail(stderr, exc, 2)
    except (RegemError, ValueError, ArithmeticError) as exc:
        return _fail(stderr, exc, 1)
    return 0


def _fail(stderr, exc: Exception, status: int) -> int:
    doc = {"schema": SCHEMA, "error": {"type": type(exc).__name__, "message": str(exc)}}
    stderr.write(json.dumps(doc) + "\n")
    log.debug("failure", exc_info=exc)
    return status


def main_entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    main_entry()
