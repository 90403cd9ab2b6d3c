"""Imputation when several variables have missing values.

Every incomplete variable gets its own regression on all other variables.
Missing cells are zero filled and each one becomes a single parameter shared
by every equation: in its own variable's equation it is subtracted from both
sides (coefficient -1 on the left, so it appears with +1 in the residual),
and wherever the variable is a predictor it is added back into the design,
so it enters multiplied by that equation's slope.  Stacking the equations
gives one least-squares problem that is bilinear in (slopes, cells) and is
solved by Levenberg-Marquardt.

Residuals are ``observed - fitted``; for block ``e`` with response column
``j`` and predictor columns ``P``::

    r_e = F[:, j] - (a_e + F[:, P] @ s_e)

where ``F`` is the data matrix with the current cell parameters written in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from ._lm import levenberg_marquardt, scaled_gradient
from .closed_form import ImputationSet, ImputedCell
from .dataset import Dataset, cell_label, validate
from .errors import DataError, SingularSystemError
from .ols import add_intercept, fit_ols, prediction_se, leverage

DEFAULT_TOL = 1e-12
DEFAULT_GTOL = 1e-8
DEFAULT_MAX_ITER = 500
SE_CONVENTIONS = ("raw", "adjusted")


@dataclass(frozen=True)
class ConcatenatedSystem:
    """Stacked multi-equation system with one parameter per missing cell.

    Parameter vector layout: for each equation in order, its intercept and
    then one slope per predictor; after all equations, one value per missing
    cell in the order of ``cells``.
    """

    dataset: Dataset
    equations: tuple[int, ...]
    predictors: tuple[tuple[int, ...], ...]
    cells: tuple[tuple[int, int], ...]
    coef_offsets: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        offs, k = [], 0
        for preds in self.predictors:
            offs.append(k)
            k += 1 + len(preds)
        object.__setattr__(self, "coef_offsets", tuple(offs))
        rows = np.array([c[0] for c in self.cells], dtype=int)
        cols = np.array([c[1] for c in self.cells], dtype=int)
        object.__setattr__(self, "_cell_rows", rows)
        object.__setattr__(self, "_cell_cols", cols)

    @property
    def n_blocks(self) -> int:
        return len(self.equations)

    @property
    def n_rows(self) -> int:
        return self.n_blocks * self.dataset.n

    @property
    def n_coef(self) -> int:
        return sum(1 + len(p) for p in self.predictors)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_params(self) -> int:
        return self.n_coef + self.n_cells

    @property
    def cell_labels(self) -> list[str]:
        names = self.dataset.names
        return [cell_label(names[j], i) for i, j in self.cells]

    @property
    def param_names(self) -> list[str]:
        names = self.dataset.names
        out = []
        for j, preds in zip(self.equations, self.predictors):
            out.append(f"{names[j]}:intercept")
            out.extend(f"{names[j]}:{names[k]}" for k in preds)
        return out + self.cell_labels

    def cell_index(self, variable, row: int) -> int:
        """Position among the cell parameters of a missing cell (row 1-based)."""
        j = self.dataset.index(variable)
        try:
            return self.cells.index((row - 1, j))
        except ValueError:
            raise DataError(f"{cell_label(self.dataset.names[j], row - 1)} is not a missing cell") from None

    def block_coefs(self, theta, e: int) -> np.ndarray:
        o = self.coef_offsets[e]
        return theta[o : o + 1 + len(self.predictors[e])]

    def fill(self, theta) -> np.ndarray:
        F = np.array(self.dataset.values, dtype=float)
        F[self._cell_rows, self._cell_cols] = theta[self.n_coef :]
        return F

    def stacked_response(self) -> np.ndarray:
        """Zero-filled responses, one block per equation."""
        return np.concatenate([self.dataset.values[:, j] for j in self.equations])

    def residuals(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        F = self.fill(theta)
        out = []
        for e, (j, preds) in enumerate(zip(self.equations, self.predictors)):
            c = self.block_coefs(theta, e)
            out.append(F[:, j] - c[0] - F[:, list(preds)] @ c[1:])
        return np.concatenate(out)

    def jacobian(self, theta) -> np.ndarray:
        """Analytic derivative of :meth:`residuals` with respect to theta."""
        theta = np.asarray(theta, dtype=float)
        n = self.dataset.n
        F = self.fill(theta)
        J = np.zeros((self.n_rows, self.n_params))
        base = self.n_coef
        for e, (j, preds) in enumerate(zip(self.equations, self.predictors)):
            rows = slice(e * n, (e + 1) * n)
            o = self.coef_offsets[e]
            c = self.block_coefs(theta, e)
            J[rows, o] = -1.0
            J[rows, o + 1 : o + 1 + len(preds)] = -F[:, list(preds)]
            slope_of = {k: c[1 + t] for t, k in enumerate(preds)}
            for q, (i, jc) in enumerate(self.cells):
                if jc == j:
                    J[e * n + i, base + q] += 1.0
                elif jc in slope_of:
                    J[e * n + i, base + q] -= slope_of[jc]
        return J

    def sse(self, theta) -> float:
        r = self.residuals(theta)
        return float(r @ r)


def build_concatenated(
    d: Dataset,
    responses: Sequence | None = None,
    predictors: Mapping | None = None,
) -> ConcatenatedSystem:
    """One equation block per incomplete variable, each regressed on all others.

    ``responses`` restricts or reorders the blocks; by default every variable
    with missing cells gets a block, in column order.  Complete variables only
    act as predictors.  ``predictors`` optionally maps a response name to its
    own predictor list (an empty list leaves only the intercept).
    """
    validate(d)
    miss = ~d.mask
    if responses is None:
        eqs = [j for j in range(d.p) if miss[:, j].any()]
    else:
        eqs = [d.index(v) for v in responses]
    for j in range(d.p):
        if miss[:, j].all():
            raise DataError(f"variable {d.names[j]!r} is missing in every row and cannot be identified")
    for j in range(d.p):
        if miss[:, j].any() and j not in eqs:
            raise DataError(f"incomplete variable {d.names[j]!r} needs its own equation block")
    if d.p < 2:
        raise DataError("need at least two variables")
    preds = []
    for j in eqs:
        chosen = (predictors or {}).get(d.names[j])
        cols = [k for k in range(d.p) if k != j] if chosen is None else [d.index(c) for c in chosen]
        if j in cols:
            raise DataError(f"{d.names[j]!r} cannot predict itself")
        preds.append(tuple(cols))
    preds = tuple(preds)
    cells = tuple((int(i), j) for j in eqs for i in np.flatnonzero(miss[:, j]))
    return ConcatenatedSystem(d, tuple(eqs), preds, cells)


def initial_theta(sys: ConcatenatedSystem) -> np.ndarray:
    """Complete-case regressions for the coefficients, observed means for cells.

    If an equation's complete-case fit is not estimable its intercept starts
    at the response mean and its slopes at zero.
    """
    d = sys.dataset
    theta = np.zeros(sys.n_params)
    cc = d.complete_rows()
    for e, (j, preds) in enumerate(zip(sys.equations, sys.predictors)):
        o = sys.coef_offsets[e]
        try:
            X = add_intercept(d.values[np.ix_(cc, list(preds))])
            theta[o : o + 1 + len(preds)] = fit_ols(X, d.values[cc, j]).coef
        except (SingularSystemError, ValueError):
            theta[o] = d.values[d.mask[:, j], j].mean()
    for q, (_, j) in enumerate(sys.cells):
        theta[sys.n_coef + q] = d.values[d.mask[:, j], j].mean()
    return theta


def _resolve_init(sys, init) -> np.ndarray:
    if init is None or (isinstance(init, str) and init == "complete-case"):
        return initial_theta(sys)
    if isinstance(init, str):
        raise ValueError(f"unknown init policy {init!r}")
    theta = np.asarray(init, dtype=float)
    if theta.shape != (sys.n_params,):
        raise ValueError(f"init has shape {theta.shape}, system needs ({sys.n_params},)")
    return theta.copy()


@dataclass(frozen=True)
class NlsResult:
    """Solution of a concatenated system.

    Standard errors are ``sqrt(diag((J'J)^{-1}) * sse / df)`` under two
    degrees-of-freedom conventions: ``raw`` counts every stacked row
    (``n_rows - free parameters``), ``adjusted`` divides that count by the
    number of equation blocks, since stacking replicates each observation
    once per block.  Parameters held at a bound have SE 0.  When J'J is
    numerically singular ``se_available`` is False and SEs are NaN.
    """

    system: ConcatenatedSystem
    theta: np.ndarray
    se_raw: np.ndarray
    se_adjusted: np.ndarray
    sse: float
    df_raw: int
    df_adjusted: float
    iterations: int
    converged: bool
    grad_norm: float
    active: np.ndarray
    se_available: bool
    method: str = "nls"
    message: str = ""

    @property
    def cell_values(self) -> np.ndarray:
        return self.theta[self.system.n_coef :]

    def completed(self) -> np.ndarray:
        return self.system.fill(self.theta)

    def se(self, convention: str = "raw") -> np.ndarray:
        if convention not in SE_CONVENTIONS:
            raise ValueError(f"convention must be one of {SE_CONVENTIONS}")
        return self.se_raw if convention == "raw" else self.se_adjusted

    def imputations(self, convention: str = "raw") -> ImputationSet:
        sys = self.system
        se = self.se(convention)[sys.n_coef :]
        names = sys.dataset.names
        cells = tuple(
            ImputedCell(names[j], i + 1, float(v), float(s))
            for (i, j), v, s in zip(sys.cells, self.cell_values, se)
        )
        return ImputationSet(cells, None, self.method, f"nls-{convention}")

    def coefficients(self) -> dict[str, dict[str, float]]:
        sys, names = self.system, self.system.dataset.names
        out = {}
        for e, (j, preds) in enumerate(zip(sys.equations, sys.predictors)):
            c = sys.block_coefs(self.theta, e)
            block = {"intercept": float(c[0])}
            block.update({names[k]: float(v) for k, v in zip(preds, c[1:])})
            out[names[j]] = block
        return out

    def to_dict(self) -> dict:
        sys = self.system
        nc = sys.n_coef
        imps = [
            {
                "variable": sys.dataset.names[j],
                "row": i + 1,
                "point": float(v),
                "se_raw": _num(self.se_raw[nc + q]),
                "se_adjusted": _num(self.se_adjusted[nc + q]),
                "at_bound": bool(self.active[nc + q]),
            }
            for q, ((i, j), v) in enumerate(zip(sys.cells, self.cell_values))
        ]
        return {
            "equations": self.coefficients(),
            "imputations": imps,
            "sse": self.sse,
            "df": {"raw": self.df_raw, "adjusted": self.df_adjusted},
            "iterations": self.iterations,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
            "se_available": self.se_available,
            "message": self.message,
        }


def _num(x: float):
    return None if not math.isfinite(x) else float(x)


def unit_covariance(J_free: np.ndarray) -> np.ndarray | None:
    """``(J'J)^{-1}`` via SVD, or None when J is numerically rank deficient."""
    if J_free.shape[1] == 0:
        return np.zeros((0, 0))
    _, s, Vt = np.linalg.svd(J_free, full_matrices=False)
    if s[-1] <= 1e-10 * s[0]:
        return None
    return (Vt.T / s**2) @ Vt


def _assemble(sys, theta, J_free, free, G, sse, method, iterations, converged, gnorm, message, active=None):
    """Build an NlsResult from a solution found in some parameterisation.

    ``J_free`` is the residual Jacobian with respect to the solver's free
    parameters, ``free`` marks those parameters, and ``G`` is d theta / d
    (solver parameters), used to carry the covariance over to theta (delta
    method).  Parameters held at a bound contribute no variance.
    """
    m = sys.n_params
    k = J_free.shape[1]
    df_raw = sys.n_rows - k
    df_adj = df_raw / sys.n_blocks
    cov = unit_covariance(J_free) if df_raw > 0 else None
    ok = cov is not None
    if ok:
        Gf = G[:, free]
        var = np.maximum(np.einsum("ij,jk,ik->i", Gf, cov, Gf), 0.0)
        se_raw = np.sqrt(var * sse / df_raw)
        se_adj = np.sqrt(var * sse / df_adj)
    else:
        se_raw = np.full(m, np.nan)
        se_adj = np.full(m, np.nan)
    return NlsResult(
        system=sys,
        theta=np.asarray(theta, dtype=float),
        se_raw=se_raw,
        se_adjusted=se_adj,
        sse=float(sse),
        df_raw=df_raw,
        df_adjusted=df_adj,
        iterations=iterations,
        converged=converged,
        grad_norm=gnorm,
        active=np.zeros(m, dtype=bool) if active is None else active,
        se_available=ok,
        method=method,
        message=message,
    )


def solve_concatenated(
    sys: ConcatenatedSystem,
    init=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    bounds: tuple | None = None,
    gtol: float = DEFAULT_GTOL,
) -> NlsResult:
    """Least-squares solution of the stacked system by Levenberg-Marquardt.

    Parameters
    ----------
    init : None, "complete-case" or array_like
        Starting parameter vector; by default complete-case regression
        coefficients and observed means for the cells.
    bounds : (lower, upper), optional
        Arrays of length ``sys.n_params``; use +-inf for unbounded entries.
    """
    d = sys.dataset
    if len(d.complete_rows()) == 0:
        raise DataError("no complete rows link the variables")
    theta0 = _resolve_init(sys, init)
    lower = upper = None
    if bounds is not None:
        lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    res = levenberg_marquardt(sys.residuals, sys.jacobian, theta0, lower, upper, tol, gtol, max_iter)
    free = ~res.active
    return _assemble(
        sys, res.x, res.jac[:, free], free, np.eye(sys.n_params), res.sse, "nls",
        res.iterations, res.converged, res.grad_norm, res.message, res.active,
    )


def _coef_step(sys: ConcatenatedSystem, theta: np.ndarray) -> np.ndarray:
    theta = theta.copy()
    F = sys.fill(theta)
    for e, (j, preds) in enumerate(zip(sys.equations, sys.predictors)):
        X = add_intercept(F[:, list(preds)])
        o = sys.coef_offsets[e]
        theta[o : o + 1 + len(preds)] = np.linalg.lstsq(X, F[:, j], rcond=None)[0]
    return theta


def _cell_step(sys: ConcatenatedSystem, theta: np.ndarray) -> np.ndarray:
    # with coefficients fixed the residual is affine in the cells: r = r0 + A z
    theta = theta.copy()
    nc = sys.n_coef
    theta[nc:] = 0.0
    r0 = sys.residuals(theta)
    A = sys.jacobian(theta)[:, nc:]
    theta[nc:] = np.linalg.lstsq(A, -r0, rcond=None)[0]
    return theta


def _sweep(sys, theta):
    return _cell_step(sys, _coef_step(sys, theta))


def alternating_solve(
    sys: ConcatenatedSystem,
    init=None,
    tol: float = 1e-10,
    max_iter: int = 5000,
) -> NlsResult:
    """Block-coordinate descent: OLS per equation, then a linear solve for the cells.

    The plain alternation crawls along the nearly flat directions these
    systems tend to have, so the sweep map is extrapolated with the SQUAREM
    scheme (squared steplength, monotone safeguard).  Stops when no parameter
    moves by more than ``tol * max(1, |theta|)`` in an accelerated cycle.
    """
    if len(sys.dataset.complete_rows()) == 0:
        raise DataError("no complete rows link the variables")
    theta = _sweep(sys, _resolve_init(sys, init))
    sse = sys.sse(theta)
    converged = False
    it = 0
    stalls = 0
    while it < max_iter:
        it += 1
        t1 = _sweep(sys, theta)
        t2 = _sweep(sys, t1)
        r = t1 - theta
        v = t2 - 2 * t1 + theta
        nr, nv = np.linalg.norm(r), np.linalg.norm(v)
        if nv == 0.0 or nr == 0.0:
            cand = t2
        else:
            alpha = min(-nr / nv, -1.0)
            cand = _sweep(sys, theta - 2 * alpha * r + alpha * alpha * v)
        sse2 = sys.sse(t2)
        sse_c = sys.sse(cand)
        if not np.isfinite(sse_c) or sse_c > sse2:
            cand, sse_c = t2, sse2
        step = np.abs(cand - theta)
        stalls = stalls + 1 if sse_c >= sse else 0
        theta, sse = cand, sse_c
        if np.all(step <= tol * np.maximum(1.0, np.abs(theta))) or stalls >= 25:
            converged = True
            break

    J = sys.jacobian(theta)
    r = sys.residuals(theta)
    free = np.ones(sys.n_params, dtype=bool)
    gnorm = scaled_gradient(J, r, free)
    message = "converged" if converged else "maximum iterations reached"
    return _assemble(
        sys, theta, J, free, np.eye(sys.n_params), float(r @ r), "alternating",
        it, converged, gnorm, message,
    )


class DirectionalEstimates(NamedTuple):
    yx: ImputationSet
    xy: ImputationSet


def _directional(d: Dataset, resp: int, pred: int, complete: np.ndarray, tag: str) -> ImputationSet:
    fit = fit_ols(add_intercept(d.values[complete, pred]), d.values[complete, resp])
    b0, b1 = fit.coef
    names = d.names
    cells = []
    # forward: predict the response where it is missing
    for i in np.flatnonzero(~d.mask[:, resp]):
        x0 = np.array([1.0, d.values[i, pred]])
        cells.append(ImputedCell(names[resp], int(i) + 1, float(x0 @ fit.coef),
                                 prediction_se(fit.sigma2, leverage(fit, x0))))
    # inverse: solve the fitted line for the predictor where it is missing
    inv_rows = np.flatnonzero(~d.mask[:, pred])
    if len(inv_rows) and abs(b1) < 1e-12:
        labels = ", ".join(cell_label(names[pred], i) for i in inv_rows)
        raise DataError(f"slope of {names[resp]} on {names[pred]} is zero; cannot invert for {labels}")
    for i in inv_rows:
        cells.append(ImputedCell(names[pred], int(i) + 1, float((d.values[i, resp] - b0) / b1),
                                 math.sqrt(fit.sigma2) / abs(b1)))
    order = {names[pred]: 0, names[resp]: 1} if pred < resp else {names[resp]: 0, names[pred]: 1}
    cells.sort(key=lambda c: (order[c.variable], c.row))
    return ImputationSet(tuple(cells), fit, f"directional-{tag}", "prediction/inverse")


def bivariate_directional(d: Dataset, x, y) -> DirectionalEstimates:
    """Both single-regression imputations for a complementary bivariate pattern.

    ``yx`` regresses y on x over the complete pairs: missing y get the usual
    prediction (with prediction SE) and missing x are read off the inverted
    line ``(y - b0) / b1`` (SE ``sigma / |b1|``).  ``xy`` does the same with
    the roles swapped.  The simultaneous solution of the stacked system
    usually lies between the two.
    """
    jx, jy = d.index(x), d.index(y)
    if jx == jy:
        raise DataError("x and y must be different variables")
    mx, my = d.mask[:, jx], d.mask[:, jy]
    if np.any(~mx & ~my):
        rows = ", ".join(str(i + 1) for i in np.flatnonzero(~mx & ~my))
        raise DataError(f"rows {rows} miss both variables; pattern is not complementary")
    complete = np.flatnonzero(mx & my)
    if len(complete) < 3:
        raise DataError(f"need at least 3 complete pairs, have {len(complete)}")
    return DirectionalEstimates(
        yx=_directional(d, jy, jx, complete, "yx"),
        xy=_directional(d, jx, jy, complete, "xy"),
    )
