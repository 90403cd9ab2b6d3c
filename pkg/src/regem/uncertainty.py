"""Stochastic uncertainty for imputations: normal draws, bootstrap, two-way model.

Every stochastic routine takes an explicit integer seed.  Bootstrap replicate
``a`` draws from its own substream ``default_rng([seed, a])``, so a replicate's
rows do not depend on how many replicates came before it or on the order in
which they run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .closed_form import ImputationSet, ImputedCell, impute_closed_form
from .dataset import COMPLETE, RESPONSE_ONLY, Dataset, cell_label, validate
from .errors import BootstrapError, DataError, RegemError
from .multivar import build_concatenated, solve_concatenated

log = logging.getLogger(__name__)

ESTIMATORS = ("auto", "closed-form", "nls")
MAX_DISCARD_FRACTION = 0.9
_MIN_ATTEMPTS_BEFORE_ABORT = 10
PERCENTILES = (2.5, 50.0, 97.5)
TWO_WAY_NOTE = (
    "the additive two-way model is likely misspecified; its errors are "
    "correlated within rows and columns and the standard errors ignore that"
)


@dataclass(frozen=True)
class ImputationDraws:
    """Draws per missing cell plus bookkeeping.

    ``draws[label]`` holds the values and ``replicates[label]`` the replicate
    (or imputation) index each value came from.  For the bootstrap, counts
    differ between cells because a cell only gets a value when its row is
    resampled.
    """

    labels: tuple[str, ...]
    draws: dict[str, np.ndarray]
    replicates: dict[str, np.ndarray]
    seed: int
    method: str
    attempted: int = 0
    accepted: int = 0
    discarded: int = 0
    discard_reasons: dict[str, int] = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        return {k: int(self.draws[k].size) for k in self.labels}

    def summary(self) -> dict[str, dict[str, float | int | None]]:
        """Mean, sd (ddof=1), 2.5/50/97.5 percentiles and count per cell."""
        out = {}
        for k in self.labels:
            x = self.draws[k]
            row: dict[str, float | int | None] = {"count": int(x.size)}
            if x.size:
                row["mean"] = float(x.mean())
                row["sd"] = float(x.std(ddof=1)) if x.size > 1 else None
                for q, v in zip(PERCENTILES, np.percentile(x, PERCENTILES)):
                    row[f"p{q:g}"] = float(v)
            else:
                row.update(mean=None, sd=None, **{f"p{q:g}": None for q in PERCENTILES})
            out[k] = row
        return out

    def summary_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "attempted": self.attempted,
            "accepted": self.accepted,
            "discarded": self.discarded,
            "discard_reasons": dict(sorted(self.discard_reasons.items())),
            "cells": self.summary(),
        }

    def summary_json(self, path=None) -> str | None:
        text = json.dumps(self.summary_dict(), indent=2) + "\n"
        if path is None:
            return text
        Path(path).write_text(text, encoding="utf-8")
        return None

    def to_csv(self, path=None) -> str | None:
        """Long format ``cell,replicate,value``; returns text if no path."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "replicate", "value"])
        for k in self.labels:
            for r, v in zip(self.replicates[k], self.draws[k]):
                w.writerow([k, int(r), repr(float(v))])
        text = buf.getvalue()
        if path is None:
            return text
        Path(path).write_text(text, encoding="utf-8")
        return None


def multiple_impute(imp: ImputationSet, M: int, seed: int) -> ImputationDraws:
    """``M`` independent normal draws per cell with mean = point and sd = se."""
    if int(M) != M or M < 1:
        raise ValueError(f"M must be a positive integer, got {M}")
    M = int(M)
    ses = imp.ses
    if np.any(~np.isfinite(ses)) or np.any(ses < 0):
        raise ValueError("every cell needs a finite, nonnegative standard error")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((len(imp), M))
    vals = imp.points[:, None] + ses[:, None] * z
    labels = tuple(imp.labels)
    reps = np.arange(M)
    return ImputationDraws(
        labels,
        {k: vals[i] for i, k in enumerate(labels)},
        {k: reps for k in labels},
        seed,
        "normal-mi",
        attempted=M,
        accepted=M,
    )


def _pick_estimator(d: Dataset, estimator, response, predictors) -> tuple[str, Callable[[Dataset], ImputationSet]]:
    if callable(estimator):
        return getattr(estimator, "__name__", "custom"), estimator
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS} or a callable")
    pattern = validate(d)
    if pattern.classification == COMPLETE:
        raise DataError("no missing values to bootstrap")
    if estimator == "auto":
        estimator = "closed-form" if pattern.classification == RESPONSE_ONLY else "nls"
    if estimator == "closed-form":
        if response is None:
            incomplete = pattern.incomplete_variables
            if len(incomplete) != 1:
                raise DataError("closed-form bootstrap needs a single incomplete response")
            response = incomplete[0]

        def run(rep: Dataset) -> ImputationSet:
            return impute_closed_form(rep, response, predictors)

    else:

        def run(rep: Dataset) -> ImputationSet:
            res = solve_concatenated(build_concatenated(rep))
            if not res.converged:
                raise _Discard("not converged")
            return res.imputations()

    return estimator, run


class _Discard(Exception):
    pass


def bootstrap_impute(
    d: Dataset,
    estimator="auto",
    B: int = 1000,
    seed: int = 0,
    min_valid: float | None = None,
    response=None,
    predictors=None,
    target_count: int | None = None,
    max_attempts: int | None = None,
) -> ImputationDraws:
    """Row bootstrap of an imputation estimator.

    Each replicate resamples ``n`` rows with replacement and reruns the
    estimator.  Every originally missing cell whose row was drawn gets the
    replicate's estimate (averaged over duplicate copies of the row).

    Parameters
    ----------
    estimator : {"auto", "closed-form", "nls"} or callable
        ``"auto"`` uses the closed form for response-only patterns and the
        stacked least-squares solver otherwise.  A callable receives the
        replicate dataset and returns an :class:`ImputationSet`.
    B : int
        Accepted replicates wanted.  Ignored when ``target_count`` is given.
    seed : int
        Replicate ``a`` uses ``numpy.random.default_rng([seed, a])``.
    min_valid : float, optional
        Replicates that impute any value below this are discarded and redrawn.
    target_count : int, optional
        Keep drawing until every missing cell has at least this many values.
    max_attempts : int, optional
        Hard cap on attempted replicates.

    Raises
    ------
    BootstrapError
        When more than 90% of (at least ten) attempts were discarded, or the
        attempt cap is reached first.
    """
    if target_count is None and (int(B) != B or B < 1):
        raise ValueError(f"B must be a positive integer, got {B}")
    if target_count is not None and target_count < 1:
        raise ValueError("target_count must be positive")
    name, run = _pick_estimator(d, estimator, response, predictors)

    cells = d.missing_cells()
    labels = tuple(cell_label(d.names[j], i) for i, j in cells)
    position = {(int(i), int(j)): q for q, (i, j) in enumerate(cells)}
    values: list[list[float]] = [[] for _ in cells]
    reps: list[list[int]] = [[] for _ in cells]
    reasons: Counter[str] = Counter()
    attempted = accepted = 0
    if max_attempts is None:
        max_attempts = 100 * (target_count if target_count is not None else int(B)) + 100

    def done() -> bool:
        if target_count is not None:
            return min(len(v) for v in values) >= target_count
        return accepted >= B

    while not done():
        if attempted >= max_attempts:
            raise BootstrapError(
                f"attempt cap {max_attempts} reached with {accepted} accepted replicates; "
                f"discards: {dict(reasons)}"
            )
        a = attempted
        attempted += 1
        rng = np.random.default_rng([seed, a])
        idx = np.sort(rng.integers(0, d.n, d.n))
        try:
            imp = run(d.take_rows(idx))
            got = _collect(d, imp, idx, position, min_valid)
        except _Discard as exc:
            reasons[str(exc)] += 1
            got = None
        except (RegemError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            reasons[type(exc).__name__] += 1
            got = None
        if got is None:
            discarded = attempted - accepted
            if attempted >= _MIN_ATTEMPTS_BEFORE_ABORT and discarded > MAX_DISCARD_FRACTION * attempted:
                raise BootstrapError(
                    f"{discarded} of {attempted} bootstrap replicates discarded "
                    f"(more than {MAX_DISCARD_FRACTION:.0%}); reasons: {dict(reasons)}"
                )
            continue
        accepted += 1
        for q, v in got.items():
            values[q].append(v)
            reps[q].append(a)

    log.info("bootstrap: %d attempted, %d accepted", attempted, accepted)
    return ImputationDraws(
        labels,
        {k: np.array(v, dtype=float) for k, v in zip(labels, values)},
        {k: np.array(r, dtype=int) for k, r in zip(labels, reps)},
        seed,
        f"bootstrap:{name}",
        attempted=attempted,
        accepted=accepted,
        discarded=attempted - accepted,
        discard_reasons=dict(reasons),
    )


def _collect(d: Dataset, imp: ImputationSet, idx: np.ndarray, position, min_valid) -> dict[int, float]:
    """Map a replicate's imputations back to original cells, averaging duplicates."""
    sums: dict[int, float] = {}
    n: dict[int, int] = {}
    for c in imp.cells:
        if not math.isfinite(c.point):
            raise _Discard("non-finite imputation")
        if min_valid is not None and c.point < min_valid:
            raise _Discard("below minimum")
        q = position[(int(idx[c.row - 1]), d.index(c.variable))]
        sums[q] = sums.get(q, 0.0) + c.point
        n[q] = n.get(q, 0) + 1
    return {q: sums[q] / n[q] for q in sorted(sums)}


def two_way_impute(tbl) -> ImputationSet:
    """Impute a table through an additive row + column effects model.

    The table is stacked column by column into one response.  The design has
    an intercept, ``n - 1`` row indicators and ``p - 1`` column indicators, and
    the missing entries are then imputed by the closed form.  Cells are
    labelled with the original variable and row.
    """
    d = tbl if isinstance(tbl, Dataset) else Dataset.from_array(np.asarray(tbl, dtype=float))
    n, p = d.n, d.p
    if n < 2 or p < 2:
        raise DataError("a two-way table needs at least two rows and two columns")
    y = np.where(d.mask, d.values, np.nan).T.reshape(-1)
    row_of = np.tile(np.arange(n), p)
    col_of = np.repeat(np.arange(p), n)
    design = np.column_stack(
        [(row_of == i).astype(float) for i in range(1, n)] + [(col_of == j).astype(float) for j in range(1, p)]
    )
    names = tuple(f"R{i + 1}" for i in range(1, n)) + tuple(f"C{j + 1}" for j in range(1, p)) + ("y",)
    stacked = Dataset.from_array(np.column_stack([design, y]), names)
    if stacked.mask[:, -1].all():
        return ImputationSet((), None, "two-way", "prediction", (TWO_WAY_NOTE,))
    imp = impute_closed_form(stacked, "y", list(names[:-1]))
    cells = tuple(
        ImputedCell(d.names[int(col_of[c.row - 1])], int(row_of[c.row - 1]) + 1, c.point, c.se)
        for c in imp.cells
    )
    return ImputationSet(cells, imp.fit, "two-way", "prediction", (TWO_WAY_NOTE,))
