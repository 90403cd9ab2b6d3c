"""Imputation under known totals, lower bounds and nonnegativity.

Two routes are offered.  :func:`impute_with_total` is the closed form for a
response-only pattern whose imputations must add up to a known total: every
prediction is shifted by the same amount so that the sum hits the total.
:func:`constrained_nls` works on the stacked multi-variable system and
enforces constraints by reparameterising cell parameters (elimination for
totals, ``exp`` for nonnegativity, a logistic share for nonnegative totals)
or by bounds honoured inside the solver.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._lm import levenberg_marquardt
from .closed_form import ImputationSet, ImputedCell, _resolve
from .dataset import Dataset
from .errors import ConstraintError
from .multivar import (
    DEFAULT_GTOL,
    DEFAULT_TOL,
    ConcatenatedSystem,
    NlsResult,
    _assemble,
    _resolve_init,
)
from .ols import add_intercept, fit_ols

MODES = ("none", "total-linear", "nonneg-exp", "total-ratio")
_EXP_FLOOR = 1e-8
CONSTRAINED_MAX_ITER = 5000


@dataclass(frozen=True)
class VariableConstraint:
    mode: str = "none"
    total: float | None = None
    mean_preserving: bool = False


@dataclass(frozen=True)
class ConstraintSpec:
    """Per-variable modes and totals plus per-cell lower bounds.

    ``lower_bounds`` maps ``(variable, row)`` with a 1-based row to a bound.

    JSON form::

        {"variables": {"X1": {"mode": "total-linear", "total": 43},
                       "X4": {"mode": "total-ratio", "mean_preserving": true}},
         "lower_bounds": [{"variable": "X1", "row": 11, "value": 0}]}
    """

    variables: Mapping[str, VariableConstraint] = field(default_factory=dict)
    lower_bounds: Mapping[tuple[str, int], float] = field(default_factory=dict)

    def __post_init__(self):
        for name, vc in self.variables.items():
            if vc.mode not in MODES:
                raise ConstraintError(f"{name}: unknown mode {vc.mode!r}; expected one of {MODES}")
            if vc.mean_preserving and vc.total is not None:
                raise ConstraintError(f"{name}: an explicit total and mean preservation are mutually exclusive")
            if vc.mode.startswith("total"):
                if vc.total is None and not vc.mean_preserving:
                    raise ConstraintError(f"{name}: mode {vc.mode} needs a total or mean_preserving")
            elif vc.total is not None or vc.mean_preserving:
                raise ConstraintError(f"{name}: a total only applies to total-linear or total-ratio")
            if vc.mode == "total-ratio" and vc.total is not None and not vc.total > 0:
                raise ConstraintError(f"{name}: total-ratio needs a positive total, got {vc.total}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ConstraintSpec":
        unknown = set(doc) - {"variables", "lower_bounds"}
        if unknown:
            raise ConstraintError(f"unknown constraint keys {sorted(unknown)}")
        variables = {}
        for name, entry in (doc.get("variables") or {}).items():
            extra = set(entry) - {"mode", "total", "mean_preserving"}
            if extra:
                raise ConstraintError(f"{name}: unknown keys {sorted(extra)}")
            total = entry.get("total")
            variables[name] = VariableConstraint(
                entry.get("mode", "none"),
                None if total is None else float(total),
                bool(entry.get("mean_preserving", False)),
            )
        bounds = {}
        for b in doc.get("lower_bounds") or []:
            try:
                bounds[(str(b["variable"]), int(b["row"]))] = float(b.get("value", 0.0))
            except KeyError as exc:
                raise ConstraintError(f"lower bound entry {b} lacks {exc}") from None
        return cls(variables, bounds)

    @classmethod
    def from_json(cls, text_or_path) -> "ConstraintSpec":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text_or_path).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConstraintError(f"constraint spec is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "variables": {
                k: {"mode": v.mode, "total": v.total, "mean_preserving": v.mean_preserving}
                for k, v in self.variables.items()
            },
            "lower_bounds": [
                {"variable": v, "row": r, "value": x} for (v, r), x in self.lower_bounds.items()
            ],
        }

    def resolved_total(self, d: Dataset, variable: str) -> float:
        vc = self.variables[variable]
        if vc.mean_preserving:
            j = d.index(variable)
            obs = d.values[d.mask[:, j], j]
            return float((~d.mask[:, j]).sum() * obs.mean())
        return float(vc.total)


# --------------------------------------------------------------------------
# closed form with a known total


def impute_with_total(
    d: Dataset,
    response,
    predictors: Sequence | None = None,
    total: float | None = None,
    mean_preserving: bool = False,
    last: int | None = None,
) -> ImputationSet:
    """Response-only imputations constrained to sum to ``total``.

    The first ``n_m - 1`` values are::

        (1/n_m) [ (n_m I - 1 1') X_{m-1} b - (x_last' b - T) 1 ]

    with ``b`` the complete-case coefficients, and the remaining one is ``T``
    minus their sum.  ``last`` (0-based position among the missing cells)
    picks which cell is eliminated; the result does not depend on it.
    With ``mean_preserving=True`` the total is ``n_m`` times the observed mean.

    Standard errors are the unconstrained prediction covariance
    ``sigma2 (I + X_m (X_o'X_o)^{-1} X_m')`` projected onto the sum-zero
    subspace; they are an approximation.
    """
    j, cols = _resolve(d, response, predictors)
    obs = d.mask[:, j]
    miss = np.flatnonzero(~obs)
    n_m = len(miss)
    if n_m == 0:
        raise ConstraintError("nothing to constrain: the response has no missing values")
    if mean_preserving:
        if total is not None:
            raise ConstraintError("give either total or mean_preserving, not both")
        total = n_m * float(d.values[obs, j].mean())
    if total is None:
        raise ConstraintError("a total is required")
    X = add_intercept(d.values[:, cols]) if cols else np.ones((d.n, 1))
    fit = fit_ols(X[obs], d.values[obs, j])
    pred = X[miss] @ fit.coef

    last = n_m - 1 if last is None else int(last)
    if not 0 <= last < n_m:
        raise ValueError(f"last must index one of the {n_m} missing cells")
    rest = [k for k in range(n_m) if k != last]
    points = np.empty(n_m)
    if rest:
        m1 = len(rest)
        M = n_m * np.eye(m1) - np.ones((m1, m1))
        points[rest] = (M @ pred[rest] - (pred[last] - total) * np.ones(m1)) / n_m
    points[last] = total - points[rest].sum()

    V = fit.sigma2 * (np.eye(n_m) + X[miss] @ fit.xtx_inv @ X[miss].T)
    P = np.eye(n_m) - np.ones((n_m, n_m)) / n_m
    se = np.sqrt(np.maximum(np.diag(P @ V @ P), 0.0))
    cells = tuple(
        ImputedCell(d.names[j], int(i) + 1, float(pt), float(s)) for i, pt, s in zip(miss, points, se)
    )
    return ImputationSet(cells, fit, "closed-form-total", "projected-prediction",
                         (f"imputations constrained to total {total!r}",))


# --------------------------------------------------------------------------
# constrained stacked system


class _Reparam:
    """Map between solver parameters ``z`` and system parameters ``theta``."""

    def __init__(self, sys: ConcatenatedSystem, spec: ConstraintSpec):
        d = sys.dataset
        nc = sys.n_coef
        self.sys = sys
        self.n_theta = sys.n_params
        by_var: dict[int, list[int]] = {}
        for q, (_, j) in enumerate(sys.cells):
            by_var.setdefault(j, []).append(q)

        bounds: dict[int, float] = {}
        for (var, row), value in spec.lower_bounds.items():
            if not math.isfinite(value):
                raise ConstraintError(f"lower bound for {var}@{row} must be finite")
            bounds[sys.cell_index(var, row)] = value

        for name in spec.variables:
            if d.index(name) not in by_var:
                raise ConstraintError(f"{name} has no missing cells to constrain")

        # solver parameter list: coefficients, then per cell group
        self.z_of_coef = list(range(nc))
        self.groups = []  # (mode, cell positions, z positions, total, eliminated position)
        k = nc
        lower = [-np.inf] * nc
        for j, qs in by_var.items():
            name = d.names[j]
            vc = spec.variables.get(name, VariableConstraint())
            mode = vc.mode
            bounded = [q for q in qs if q in bounds]
            if mode in ("nonneg-exp", "total-ratio") and bounded:
                raise ConstraintError(f"{name}: lower bounds cannot be combined with mode {mode}")
            total = spec.resolved_total(d, name) if mode.startswith("total") else None
            if mode == "total-ratio" and not total > 0:
                raise ConstraintError(f"{name}: total-ratio needs a positive total, got {total}")
            if mode == "total-linear":
                free_cells = [q for q in qs if q not in bounds]
                if not free_cells:
                    lb_sum = sum(bounds[q] for q in qs)
                    if lb_sum > total:
                        raise ConstraintError(
                            f"{name}: infeasible, total {total} is below the sum of lower bounds {lb_sum}"
                        )
                    raise ConstraintError(f"{name}: at least one cell must be unbounded under total-linear")
                elim = free_cells[-1]
                zs = [q for q in qs if q != elim]
                zpos = list(range(k, k + len(zs)))
                lower += [bounds.get(q, -np.inf) for q in zs]
                self.groups.append((mode, qs, zs, zpos, total, elim))
                k += len(zs)
            elif mode == "total-ratio":
                zs = qs[:-1]
                zpos = list(range(k, k + len(zs)))
                lower += [-np.inf] * len(zs)
                self.groups.append((mode, qs, zs, zpos, total, qs[-1]))
                k += len(zs)
            else:
                zpos = list(range(k, k + len(qs)))
                lower += [bounds.get(q, -np.inf) if mode == "none" else -np.inf for q in qs]
                self.groups.append((mode, qs, qs, zpos, None, None))
                k += len(qs)
        self.n_z = k
        self.lower = np.array(lower)
        self.upper = np.full(k, np.inf)

    def to_z(self, theta: np.ndarray) -> np.ndarray:
        nc = self.sys.n_coef
        z = np.zeros(self.n_z)
        z[:nc] = theta[:nc]
        for mode, qs, zs, zpos, total, elim in self.groups:
            vals = theta[nc + np.array(zs, dtype=int)] if zs else np.zeros(0)
            if mode == "nonneg-exp":
                z[zpos] = np.log(np.maximum(vals, _EXP_FLOOR))
            elif mode == "total-ratio":
                z[zpos] = 0.0
            else:
                z[zpos] = vals
        return np.maximum(z, self.lower)

    def theta(self, z: np.ndarray) -> np.ndarray:
        nc = self.sys.n_coef
        th = np.zeros(self.n_theta)
        th[:nc] = z[:nc]
        for mode, qs, zs, zpos, total, elim in self.groups:
            zz = z[zpos]
            if mode == "none":
                th[nc + np.array(qs)] = zz
            elif mode == "nonneg-exp":
                th[nc + np.array(qs)] = np.exp(zz)
            elif mode == "total-linear":
                if zs:
                    th[nc + np.array(zs)] = zz
                th[nc + elim] = total - zz.sum()
            else:
                e = np.exp(zz)
                den = 1.0 + e.sum()
                if zs:
                    th[nc + np.array(zs)] = total * e / den
                th[nc + elim] = total / den
        return th

    def dtheta_dz(self, z: np.ndarray) -> np.ndarray:
        nc = self.sys.n_coef
        G = np.zeros((self.n_theta, self.n_z))
        G[np.arange(nc), np.arange(nc)] = 1.0
        for mode, qs, zs, zpos, total, elim in self.groups:
            zz = z[zpos]
            if mode == "none":
                G[nc + np.array(qs), zpos] = 1.0
            elif mode == "nonneg-exp":
                G[nc + np.array(qs), zpos] = np.exp(zz)
            elif mode == "total-linear":
                if zs:
                    G[nc + np.array(zs), zpos] = 1.0
                    G[nc + elim, zpos] = -1.0
            elif zs:
                e = np.exp(zz)
                den = 1.0 + e.sum()
                share = e / den
                # d(T e_k/den)/d z_l = T (share_k delta_kl - share_k share_l)
                block = total * (np.diag(share) - np.outer(share, share))
                G[np.ix_(nc + np.array(zs), zpos)] = block
                G[nc + elim, zpos] = -total * share / den
        return G


def constrained_nls(
    sys: ConcatenatedSystem,
    spec: ConstraintSpec,
    init=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = CONSTRAINED_MAX_ITER,
    gtol: float = DEFAULT_GTOL,
) -> NlsResult:
    """Solve the stacked system subject to ``spec``.

    Bounds are handled by projected Levenberg-Marquardt steps with an active
    set; a cell held at its bound reports SE 0.  Reparameterised cells get
    delta-method SEs.  Specifications that cannot be satisfied are rejected
    before any iteration.

    A cell whose optimum is 0 under ``nonneg-exp`` sits at ``alpha -> -inf``,
    which Levenberg-Marquardt approaches slowly; hence the larger default
    iteration cap.
    """
    rp = _Reparam(sys, spec)
    z0 = rp.to_z(_resolve_init(sys, init))

    def fun(z):
        return sys.residuals(rp.theta(z))

    def jac(z):
        return sys.jacobian(rp.theta(z)) @ rp.dtheta_dz(z)

    res = levenberg_marquardt(fun, jac, z0, rp.lower, rp.upper, tol, gtol, max_iter)
    free = ~res.active
    theta = rp.theta(res.x)
    G = rp.dtheta_dz(res.x)
    # a theta entry is held at a bound when it depends only on frozen z's
    active_theta = (np.abs(G[:, res.active]).sum(axis=1) > 0) & (np.abs(G[:, free]).sum(axis=1) == 0)
    return _assemble(
        sys, theta, res.jac[:, free], free, G, res.sse, "constrained-nls",
        res.iterations, res.converged, res.grad_norm, res.message, active_theta,
    )


# --------------------------------------------------------------------------
# accuracy against known values


def _as_map(x) -> dict[str, float]:
    if isinstance(x, ImputationSet):
        return x.as_dict()
    return {str(k): float(v) for k, v in dict(x).items()}


def mse(imputed, truth) -> float:
    """Mean squared difference between two cell->value maps with equal keys."""
    a, b = _as_map(imputed), _as_map(truth)
    if set(a) != set(b):
        raise KeyError(f"cell sets differ: {sorted(set(a) ^ set(b))}")
    if not a:
        raise ValueError("no cells to compare")
    return float(np.mean([(a[k] - b[k]) ** 2 for k in a]))


def rmse(imputed, truth) -> float:
    """Root mean squared difference between two cell->value maps with equal keys."""
    return math.sqrt(mse(imputed, truth))
