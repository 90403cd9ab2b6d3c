"""The classical iterative EM loop for a response-only missingness pattern.

Each step fills the missing responses with predictions from the current
coefficients and refits on the completed data.  Started from the
complete-case fit it stops immediately; from any other start it converges to
that same fit.  The per-iteration trace is kept so convergence behaviour can
be inspected.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .closed_form import ImputationSet, ImputedCell, _resolve
from .dataset import Dataset
from .ols import OlsFit, add_intercept, fit_ols, leverage, neg2_loglik, prediction_se

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 500


@dataclass(frozen=True)
class EmIteration:
    tau: int
    coef: np.ndarray
    sse: float
    neg2ll: float
    imputations: np.ndarray

    @property
    def b0(self) -> float:
        return float(self.coef[0])


@dataclass
class EmTrace:
    iterations: list[EmIteration] = field(default_factory=list)
    converged: bool = False
    final_tau: int = 0
    coef_names: tuple[str, ...] = ()

    def to_csv(self, path=None) -> str | None:
        """Serialise as ``tau,<coef names>,sse,neg2ll``; returns text if no path."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.coef_names or tuple(f"b{i}" for i in range(len(self.iterations[0].coef)))
        w.writerow(["tau", *names, "sse", "neg2ll"])
        for it in self.iterations:
            w.writerow([it.tau, *(repr(float(c)) for c in it.coef), repr(it.sse), repr(it.neg2ll)])
        text = buf.getvalue()
        if path is None:
            return text
        Path(path).write_text(text, encoding="utf-8")
        return None


class _Problem:
    """Arrays shared by every EM step for one (dataset, response, predictors)."""

    def __init__(self, d: Dataset, response, predictors):
        j, cols = _resolve(d, response, predictors)
        self.d, self.j, self.cols = d, j, cols
        self.X = add_intercept(d.values[:, cols]) if cols else np.ones((d.n, 1))
        self.obs = d.mask[:, j]
        self.miss = np.flatnonzero(~self.obs)
        self.y = d.values[:, j]
        self.coef_names = ("b0", *(f"b_{d.names[k]}" for k in cols))

    def complete_case(self) -> OlsFit:
        return fit_ols(self.X[self.obs], self.y[self.obs])

    def step(self, coef) -> OlsFit:
        y = self.y.copy()
        y[self.miss] = self.X[self.miss] @ coef
        return fit_ols(self.X, y)

    def record(self, tau: int, coef) -> EmIteration:
        r = self.y[self.obs] - self.X[self.obs] @ coef
        sse = float(r @ r)
        n_o = int(self.obs.sum())
        # sigma^2 profiled out at its ML value; a perfect fit has no finite -2 log L
        neg2ll = neg2_loglik(self.y[self.obs], self.X[self.obs], coef, sse / n_o) if sse > 0 else -math.inf
        return EmIteration(tau, np.array(coef, dtype=float), sse, neg2ll, self.X[self.miss] @ coef)


def em_step(d: Dataset, response, predictors, coef) -> OlsFit:
    """One E (fill) + M (refit) update starting from coefficients ``coef``."""
    if isinstance(coef, OlsFit):
        coef = coef.coef
    return _Problem(d, response, predictors).step(np.asarray(coef, dtype=float))


def _converged(new: np.ndarray, old: np.ndarray, tol: float) -> bool:
    return bool(np.all(np.abs(new - old) <= tol * np.maximum(1.0, np.abs(old))))


def run_em(
    d: Dataset,
    response,
    predictors=None,
    init="complete-case",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[OlsFit, ImputationSet, EmTrace]:
    """Iterate EM until the coefficients stop moving.

    Parameters
    ----------
    init : "complete-case" or array_like
        Starting coefficients (intercept first).
    tol : float
        Convergence when every coefficient changes by less than
        ``tol * max(1, |coef|)``.
    max_iter : int
        Upper bound on the number of updates; on hitting it the trace comes
        back with ``converged=False``.

    Returns
    -------
    fit : OlsFit
        Fit on the completed data at the last iterate.
    imputations : ImputationSet
        Final fills, with standard errors from the complete-case fit.
    trace : EmTrace
    """
    prob = _Problem(d, response, predictors)
    cc = prob.complete_case()
    if isinstance(init, str):
        if init != "complete-case":
            raise ValueError(f"unknown init {init!r}")
        coef = cc.coef.copy()
    else:
        coef = np.asarray(init, dtype=float)
        if coef.shape != cc.coef.shape:
            raise ValueError(f"init has {coef.size} entries, model has {cc.coef.size}")

    trace = EmTrace(coef_names=prob.coef_names)
    trace.iterations.append(prob.record(0, coef))
    fit = prob.step(coef)
    tau = 0
    while not _converged(fit.coef, coef, tol):
        if tau >= max_iter:
            break
        tau += 1
        coef = fit.coef
        trace.iterations.append(prob.record(tau, coef))
        fit = prob.step(coef)
    else:
        trace.converged = True
    trace.final_tau = tau

    name = d.names[prob.j]
    h = leverage(cc, prob.X[prob.miss]) if len(prob.miss) else np.zeros(0)
    points = prob.X[prob.miss] @ fit.coef
    cells = tuple(
        ImputedCell(name, int(i) + 1, float(pt), prediction_se(cc.sigma2, float(hh)))
        for i, pt, hh in zip(prob.miss, points, h)
    )
    return fit, ImputationSet(cells, cc, "em"), trace
