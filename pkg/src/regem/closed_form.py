"""Closed-form EM imputation when only the response has missing values.

Zero-fill the missing responses and add one 0/-1 indicator column per
missing row.  The indicator coefficients of that ANCOVA regression are the EM
imputations, and they coincide with new-observation predictions from the
complete-case fit; their standard errors are the usual prediction standard
errors.  :func:`impute_closed_form` uses the prediction shortcut,
:func:`solve_augmented_ols` solves the full indicator regression directly and
exists to cross-check it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .dataset import Dataset
from .errors import DataError, SingularSystemError
from .ols import OlsFit, add_intercept, fit_ols, leverage, predict_new, prediction_se


@dataclass(frozen=True)
class ImputedCell:
    """One imputed cell.  ``row`` is 1-based."""

    variable: str
    row: int
    point: float
    se: float

    @property
    def label(self) -> str:
        return f"{self.variable}@{self.row}"


@dataclass(frozen=True)
class ImputationSet:
    """Point estimates and standard errors for a collection of missing cells."""

    cells: tuple[ImputedCell, ...]
    fit: OlsFit | None = None
    method: str = "closed-form"
    se_convention: str = "prediction"
    notes: tuple[str, ...] = field(default=())

    def __len__(self):
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.cells]

    @property
    def points(self) -> np.ndarray:
        return np.array([c.point for c in self.cells])

    @property
    def ses(self) -> np.ndarray:
        return np.array([c.se for c in self.cells])

    def as_dict(self) -> dict[str, float]:
        return {c.label: c.point for c in self.cells}

    def __getitem__(self, label: str) -> ImputedCell:
        for c in self.cells:
            if c.label == label:
                return c
        raise KeyError(label)


@dataclass(frozen=True)
class AncovaSystem:
    """Zero-filled response and indicator-augmented design.

    Columns of ``design`` are ``[1 | predictors | sign * I_m]`` with one
    indicator column per missing response row (``sign`` is -1 by default).
    """

    response: np.ndarray
    design: np.ndarray
    missing_rows: np.ndarray
    n_coef: int
    response_name: str
    predictor_names: tuple[str, ...]
    sign: float = -1.0

    @property
    def n_missing(self) -> int:
        return len(self.missing_rows)


class AugmentedSolution(NamedTuple):
    b_o: np.ndarray
    b_m: np.ndarray
    s_bm: np.ndarray
    sigma2: float
    df: int
    residuals: np.ndarray


class BivariateMoments(NamedTuple):
    mu2: float
    sigma12: float
    sigma22: float
    slope: float


def _resolve(d: Dataset, response, predictors) -> tuple[int, list[int]]:
    j = d.index(response)
    if predictors is None:
        cols = [k for k in range(d.p) if k != j]
    else:
        cols = [d.index(c) for c in predictors]
    if j in cols:
        raise DataError(f"response {d.names[j]!r} also listed as a predictor")
    for k in cols:
        if not d.mask[:, k].all():
            raise DataError(
                f"predictor {d.names[k]!r} has missing values; "
                "use regem.multivar for missingness in several variables"
            )
    return j, cols


def build_ancova(d: Dataset, response, predictors: Sequence | None = None, sign: float = -1.0) -> AncovaSystem:
    """Indicator-variable (ANCOVA) system for a response-only missingness pattern.

    ``predictors=None`` uses every other column.  ``sign=+1`` builds the
    naive 0/1 indicators, whose coefficients come out negated.
    """
    j, cols = _resolve(d, response, predictors)
    miss = np.flatnonzero(~d.mask[:, j])
    X = add_intercept(d.values[:, cols]) if cols else np.ones((d.n, 1))
    ind = np.zeros((d.n, len(miss)))
    ind[miss, np.arange(len(miss))] = sign
    return AncovaSystem(
        response=d.values[:, j].copy(),
        design=np.hstack([X, ind]),
        missing_rows=miss,
        n_coef=X.shape[1],
        response_name=d.names[j],
        predictor_names=tuple(d.names[k] for k in cols),
        sign=sign,
    )


def impute_closed_form(d: Dataset, response, predictors: Sequence | None = None) -> ImputationSet:
    """EM imputations and their standard errors without iterating.

    Fits the complete-case regression and returns, for each missing response,
    the new-observation prediction ``x_m' b_o`` with standard error
    ``sqrt(sigma2 (1 + x_m' (X_o'X_o)^{-1} x_m))``.
    """
    j, cols = _resolve(d, response, predictors)
    obs = d.mask[:, j]
    X = add_intercept(d.values[:, cols]) if cols else np.ones((d.n, 1))
    fit = fit_ols(X[obs], d.values[obs, j])
    miss = np.flatnonzero(~obs)
    points = predict_new(fit, X[miss])
    h = leverage(fit, X[miss]) if len(miss) else np.zeros(0)
    cells = tuple(
        ImputedCell(d.names[j], int(i) + 1, float(pt), prediction_se(fit.sigma2, float(hh)))
        for i, pt, hh in zip(miss, points, h)
    )
    return ImputationSet(cells, fit, "closed-form")


def solve_augmented_ols(sys: AncovaSystem) -> AugmentedSolution:
    """Solve the full indicator regression by inverting its normal matrix.

    No partitioning is exploited; the coefficient covariance is taken from the
    diagonal of the inverted augmented normal matrix times the residual
    variance.
    """
    A, y = sys.design, sys.response
    n, m = A.shape
    df = n - m
    if df < 1:
        raise SingularSystemError(f"augmented system has {df} residual degrees of freedom")
    if np.linalg.matrix_rank(A) < m:
        raise SingularSystemError("augmented design is rank deficient")
    inv = np.linalg.inv(A.T @ A)
    theta = inv @ (A.T @ y)
    resid = y - A @ theta
    sigma2 = float(resid @ resid) / df
    se = np.sqrt(np.diag(inv) * sigma2)
    k = sys.n_coef
    return AugmentedSolution(theta[:k], theta[k:], se[k:], sigma2, df, resid)


def monotone_bivariate_mle(
    n: int,
    n_o: int,
    sum_x_all: float,
    mean_sq_x_all: float,
    sum_x_obs: float,
    sum_y_obs: float,
    s_xx_obs: float,
    s_yy_obs: float,
    s_xy_obs: float,
) -> BivariateMoments:
    """ML estimates for a bivariate normal sample with Y missing on n - n_o rows.

    Parameters
    ----------
    n, n_o : int
        Total rows and rows with Y observed.
    sum_x_all, sum_x_obs, sum_y_obs : float
        Sums of X over all rows, of X over the complete rows, of observed Y.
    mean_sq_x_all : float
        Second central moment of X over all n rows (divisor n).
    s_xx_obs, s_yy_obs, s_xy_obs : float
        Centred sums of squares and cross products over the complete rows
        (not divided by n_o).

    Returns
    -------
    BivariateMoments
        ``mu2`` (mean of Y), ``sigma12``, ``sigma22`` and the complete-case
        slope of Y on X.
    """
    if n_o < 2 or n < n_o:
        raise ValueError(f"need 2 <= n_o <= n, got n={n}, n_o={n_o}")
    if not s_xx_obs > 0:
        raise ValueError("X has no variation among the complete rows")
    b = s_xy_obs / s_xx_obs
    mu2 = sum_y_obs / n_o + b * (sum_x_all / n - sum_x_obs / n_o)
    sigma12 = b * mean_sq_x_all
    sigma22 = s_yy_obs / n_o + b * b * (mean_sq_x_all - s_xx_obs / n_o)
    return BivariateMoments(mu2, sigma12, sigma22, b)


def cells_from_arrays(d: Dataset, cells, points, ses) -> tuple[ImputedCell, ...]:
    """ImputedCell records for 0-based ``(row, col)`` pairs."""
    return tuple(
        ImputedCell(d.names[j], i + 1, float(pt), float(se) if se is not None else math.nan)
        for (i, j), pt, se in zip(cells, points, ses)
    )


__all__ = [
    "AncovaSystem",
    "AugmentedSolution",
    "BivariateMoments",
    "ImputationSet",
    "ImputedCell",
    "build_ancova",
    "impute_closed_form",
    "monotone_bivariate_mle",
    "solve_augmented_ols",
]
