"""Complete-case least squares and new-observation prediction.

Imputation for a response-only missingness pattern reduces to predicting new
observations from the complete-case fit, so this module carries the pieces
needed for that: the fit itself, point prediction, leverage, the prediction
standard error and the Gaussian -2 log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, lapack

from .errors import SingularSystemError

PIVOT_RTOL = 1e-12

_DODGE = (
    "complete-case normal equations are singular; with this many missing "
    "values not all parametric functions are estimable"
)


@dataclass(frozen=True)
class OlsFit:
    """Result of an ordinary least squares fit.

    Attributes
    ----------
    coef : ndarray, shape (k,)
        Intercept first (when the design has one), then slopes.
    sigma2 : float
        Unbiased residual variance ``sse / df``.
    df : int
        Residual degrees of freedom ``n_obs - k``.
    xtx_inv : ndarray, shape (k, k)
        Inverse of the normal matrix.
    sse : float
        Sum of squared residuals.
    n_obs : int
        Number of rows used in the fit.
    """

    coef: np.ndarray
    sigma2: float
    df: int
    xtx_inv: np.ndarray
    sse: float
    n_obs: int

    @property
    def k(self) -> int:
        return len(self.coef)


def add_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X])


def _cholesky(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix, or SingularSystemError."""
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        # pivoted factorisation only to report the numerical rank
        _, _, rank, _ = lapack.dpstrf(A, lower=1, tol=-1.0)
        raise SingularSystemError(f"{_DODGE} (numerical rank {rank} of {A.shape[0]})") from None
    pivots = np.diag(L) ** 2
    if pivots.min() < PIVOT_RTOL * pivots.max():
        raise SingularSystemError(f"{_DODGE} (pivot ratio {pivots.min() / pivots.max():.3g})")
    return L


def fit_ols(X, y) -> OlsFit:
    """Fit ``y = X b + e`` by Cholesky-factorised normal equations.

    ``X`` must already contain the intercept column if one is wanted.

    Raises
    ------
    SingularSystemError
        If ``X`` is rank deficient or there are no residual degrees of freedom.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes X{X.shape}, y{y.shape}")
    n, k = X.shape
    if n <= k:
        raise SingularSystemError(f"{_DODGE} ({n} observations for {k} coefficients)")
    xtx = X.T @ X
    L = _cholesky(xtx)
    coef = cho_solve((L, True), X.T @ y)
    xtx_inv = cho_solve((L, True), np.eye(k))
    xtx_inv = 0.5 * (xtx_inv + xtx_inv.T)
    resid = y - X @ coef
    sse = float(resid @ resid)
    df = n - k
    return OlsFit(coef, sse / df, df, xtx_inv, sse, n)


def predict_new(fit: OlsFit, X_new) -> np.ndarray:
    """Point predictions ``X_new @ b`` for new design rows."""
    X_new = np.asarray(X_new, dtype=float)
    if X_new.size == 0:
        return np.zeros(0)
    X_new = np.atleast_2d(X_new)
    if X_new.shape[1] != fit.k:
        raise ValueError(f"design has {X_new.shape[1]} columns, fit has {fit.k}")
    return X_new @ fit.coef


def leverage(fit: OlsFit, x0) -> float | np.ndarray:
    """``x0' (X'X)^{-1} x0`` for one row, or row-wise for a 2-D array."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != fit.k:
        raise ValueError(f"vector has {x0.shape[-1]} entries, fit has {fit.k}")
    if x0.ndim == 1:
        return float(x0 @ fit.xtx_inv @ x0)
    return np.einsum("ij,jk,ik->i", x0, fit.xtx_inv, x0)


def prediction_se(sigma2: float, h: float) -> float:
    """Standard error for predicting a new observation: sqrt(sigma2 * (1 + h))."""
    if sigma2 < 0 or h < 0:
        raise ValueError(f"sigma2 and leverage must be nonnegative, got {sigma2}, {h}")
    return math.sqrt(sigma2 * (1.0 + h))


def neg2_loglik(y, X, b, sigma2: float) -> float:
    """-2 log L of a Gaussian linear model: n ln(2 pi) + n ln(sigma2) + SSE / sigma2."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    y = np.asarray(y, dtype=float)
    r = y - np.asarray(X, dtype=float) @ np.asarray(b, dtype=float)
    n = len(y)
    return n * math.log(2 * math.pi) + n * math.log(sigma2) + float(r @ r) / sigma2
