from pathlib import Path

import numpy as np
import pytest

from regem import Dataset, embedded_hald13, load_csv

DATA = Path(__file__).parent / "data"
HALD_TRUTH = DATA / "hald13_truth.csv"


@pytest.fixture(scope="session")
def hald13():
    return embedded_hald13()


@pytest.fixture(scope="session")
def hald_truth(hald13):
    """True values of the hald13 missing cells, keyed by cell label."""
    if not HALD_TRUTH.exists():
        pytest.skip("complete hald truth file not present")
    t = load_csv(HALD_TRUTH)
    return {f"{t.names[j]}@{i + 1}": float(t.values[i, j]) for i, j in hald13.missing_cells()}


def response_only_instance(rng: np.random.Generator, n: int | None = None, k: int | None = None, n_m=None):
    """Random MCAR instance with missing values only in the last column.

    Returns the dataset with ``k`` complete predictors (``k + 1`` coefficients
    with the intercept) and at least ``k + 2`` complete rows.
    """
    k = int(rng.integers(1, 4)) if k is None else k
    n = int(rng.integers(k + 4, 31)) if n is None else n
    X = rng.normal(size=(n, k)) * rng.uniform(0.5, 3, size=k)
    beta = rng.normal(size=k + 1) * 2
    y = beta[0] + X @ beta[1:] + rng.normal(scale=rng.uniform(0.2, 2), size=n)
    max_m = n - (k + 1) - 1
    n_m = int(rng.integers(1, max_m + 1)) if n_m is None else n_m
    miss = rng.choice(n, size=n_m, replace=False)
    y[miss] = np.nan
    return Dataset.from_array(np.column_stack([X, y]))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
