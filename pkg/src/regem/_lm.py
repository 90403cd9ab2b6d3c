"""Bound-constrained Levenberg-Marquardt for small dense problems."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LAMBDA_INIT = 1e-3
LAMBDA_MAX = 1e16


@dataclass
class LMResult:
    x: np.ndarray
    resid: np.ndarray
    jac: np.ndarray
    sse: float
    iterations: int
    converged: bool
    grad_norm: float
    active: np.ndarray
    message: str


def scaled_gradient(J: np.ndarray, r: np.ndarray, free: np.ndarray) -> float:
    """Infinity norm of J'r over free parameters, divided by max(1, |r|)."""
    if not free.any():
        return 0.0
    g = J[:, free].T @ r
    return float(np.max(np.abs(g)) / max(1.0, math.sqrt(float(r @ r))))


def _active_set(x, g, lower, upper) -> np.ndarray:
    # a bound is active when the descent direction -g points out of the box
    at_lo = (x <= lower) & (g > 0)
    at_hi = (x >= upper) & (g < 0)
    return at_lo | at_hi


def levenberg_marquardt(
    fun,
    jac,
    x0,
    lower=None,
    upper=None,
    tol: float = 1e-12,
    gtol: float = 1e-8,
    max_iter: int = 500,
) -> LMResult:
    """Minimise ``|fun(x)|^2`` subject to ``lower <= x <= upper``.

    Steps solve the Marquardt-scaled damped problem
    ``min |J d + r|^2 + lam |D^(1/2) d|^2`` by least squares on the stacked
    system (no normal equations are formed), then project onto the box.
    Parameters sitting on a bound with the gradient pushing outward are
    frozen for that iteration.  ``lam`` starts at 1e-3 and is divided by 10
    after an accepted step and multiplied by 10 after a rejected one.

    Convergence requires both a relative SSE decrease below ``tol`` on the
    last accepted step and a scaled gradient (see :func:`scaled_gradient`)
    below ``gtol``.
    """
    x = np.array(x0, dtype=float)
    m = x.size
    lower = np.full(m, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(m, np.inf) if upper is None else np.asarray(upper, dtype=float)
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    x = np.clip(x, lower, upper)

    r = fun(x)
    J = jac(x)
    sse = float(r @ r)
    lam = LAMBDA_INIT
    last_rel = math.inf
    converged = False
    message = "maximum iterations reached"
    it = 0
    active = np.zeros(m, dtype=bool)
    gnorm = math.inf

    while True:
        g = J.T @ r
        active = _active_set(x, g, lower, upper)
        free = ~active
        gnorm = scaled_gradient(J, r, free)
        if sse == 0.0:
            converged, message = True, "exact fit"
            break
        if gnorm < gtol and last_rel < tol:
            converged, message = True, "converged"
            break
        if it >= max_iter:
            break
        it += 1

        Jf = J[:, free]
        diag = np.einsum("ij,ij->j", Jf, Jf)
        diag = np.maximum(diag, 1e-12 * max(diag.max(initial=0.0), 1.0))
        A = np.vstack([Jf, np.diag(np.sqrt(lam * diag))])
        b = np.concatenate([-r, np.zeros(Jf.shape[1])])
        step = np.linalg.lstsq(A, b, rcond=None)[0]

        x_new = x.copy()
        x_new[free] += step
        x_new = np.clip(x_new, lower, upper)
        r_new = fun(x_new)
        sse_new = float(r_new @ r_new)
        if np.isfinite(sse_new) and sse_new <= sse:
            last_rel = (sse - sse_new) / sse
            x, r, sse = x_new, r_new, sse_new
            J = jac(x)
            lam = max(lam / 10.0, 1e-15)
        else:
            lam *= 10.0
            if lam > LAMBDA_MAX:
                # no representable descent left; accept if stationary
                g = J.T @ r
                free = ~_active_set(x, g, lower, upper)
                gnorm = scaled_gradient(J, r, free)
                converged = gnorm < gtol
                message = "converged (step stalled)" if converged else "stalled before gradient tolerance"
                active = ~free
                break

    return LMResult(x, r, J, sse, it, converged, gnorm, active, message)
