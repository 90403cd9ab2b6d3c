"""Missing-data matrix, missingness patterns and CSV ingestion.

Missing cells are stored as a literal 0 in ``values`` together with a boolean
``mask`` (True = observed).  Zero filling is what the indicator-variable
regressions operate on, and the mask keeps observedness unambiguous when 0 is
also a legitimate observed value.

Rows and variables are 0-based internally; anything user facing (cell labels,
error messages, reports) uses 1-based row numbers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CSVParseError, DataError

DEFAULT_MISSING_TOKENS = frozenset({"", ".", "NA"})

COMPLETE = "complete"
RESPONSE_ONLY = "response-only"
COMPLEMENTARY_BIVARIATE = "complementary-bivariate"
GENERAL_MULTIVARIATE = "general-multivariate"


def cell_label(name: str, row: int) -> str:
    """Label for a cell given its variable name and 0-based row."""
    return f"{name}@{row + 1}"


@dataclass(frozen=True)
class Dataset:
    """An n x p numeric matrix with an explicit missingness mask.

    Parameters
    ----------
    values : array_like, shape (n, p)
        Cell values.  Entries where ``mask`` is False are overwritten with 0.
    mask : array_like of bool, shape (n, p)
        True where the cell is observed.
    names : sequence of str, optional
        Variable labels; defaults to ``X1 .. Xp``.

    Both arrays are copied and made read-only, so a Dataset can be shared
    freely between concurrent estimator runs.
    """

    values: np.ndarray
    mask: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        mask = np.array(self.mask, dtype=bool, copy=True)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        if mask.shape != values.shape:
            raise DataError(f"mask shape {mask.shape} != values shape {values.shape}")
        n, p = values.shape
        if n < 1 or p < 1:
            raise DataError("a dataset needs at least one row and one column")
        names = tuple(self.names) if self.names else tuple(f"X{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} names given for {p} columns")
        if len(set(names)) != p:
            raise DataError(f"duplicate variable names in {names}")
        values[~mask] = 0.0
        if not np.all(np.isfinite(values)):
            raise DataError("observed cells must be finite")
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_array(cls, data, names: Sequence[str] | None = None) -> "Dataset":
        """Build a Dataset from an array whose missing cells are NaN."""
        arr = np.asarray(data, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        mask = ~np.isnan(arr)
        return cls(np.where(mask, arr, 0.0), mask, tuple(names or ()))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def index(self, name: str | int) -> int:
        """Column index of a variable given by name (or passed through if int)."""
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < self.p:
                raise DataError(f"column index {name} out of range")
            return int(name)
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown variable {name!r}; have {list(self.names)}") from None

    def to_nan_array(self) -> np.ndarray:
        return np.where(self.mask, self.values, np.nan)

    def missing_cells(self) -> list[tuple[int, int]]:
        """(row, column) pairs of all missing cells, column-major order."""
        return [(int(i), j) for j in range(self.p) for i in np.flatnonzero(~self.mask[:, j])]

    def complete_rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask.all(axis=1))

    def take_rows(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.values[rows], self.mask[rows], self.names)

    def select(self, columns: Iterable[str | int]) -> "Dataset":
        idx = [self.index(c) for c in columns]
        return Dataset(self.values[:, idx], self.mask[:, idx], tuple(self.names[j] for j in idx))

    def fill(self, imputed: dict[tuple[int, int], float]) -> np.ndarray:
        """Completed matrix with ``imputed[(row, col)]`` written into missing cells."""
        out = self.values.copy()
        for (i, j), v in imputed.items():
            if self.mask[i, j]:
                raise DataError(f"cell {cell_label(self.names[j], i)} is observed")
            out[i, j] = v
        return out

    def to_csv(self, path_or_buf=None, missing_token: str = ".") -> str | None:
        """Write the dataset as CSV; returns the text when no path is given."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.names)
        for row, mrow in zip(self.values, self.mask):
            writer.writerow([repr(float(v)) if m else missing_token for v, m in zip(row, mrow)])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        Path(path_or_buf).write_text(text, encoding="utf-8")
        return None


@dataclass(frozen=True)
class MissingnessPattern:
    """Summary of which cells are missing.

    ``missing_rows`` and ``observed_rows`` map variable names to 0-based row
    index arrays.
    """

    names: tuple[str, ...]
    missing_rows: dict[str, np.ndarray]
    observed_rows: dict[str, np.ndarray]
    classification: str

    @property
    def n_missing(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.missing_rows.items()}

    @property
    def n_observed(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.observed_rows.items()}

    @property
    def total_missing(self) -> int:
        return sum(self.n_missing.values())

    @property
    def total_observed(self) -> int:
        return sum(self.n_observed.values())

    @property
    def incomplete_variables(self) -> list[str]:
        return [k for k in self.names if len(self.missing_rows[k])]


def _classify(mask: np.ndarray) -> str:
    miss = ~mask
    incomplete = np.flatnonzero(miss.any(axis=0))
    if len(incomplete) == 0:
        return COMPLETE
    if len(incomplete) == 1:
        return RESPONSE_ONLY
    if mask.shape[1] == 2 and not miss.all(axis=1).any():
        return COMPLEMENTARY_BIVARIATE
    return GENERAL_MULTIVARIATE


def validate(d: Dataset) -> MissingnessPattern:
    """Check that every row has an observed cell and summarise the pattern.

    Raises
    ------
    DataError
        If some row has no observed values at all.
    """
    empty = np.flatnonzero(~d.mask.any(axis=1))
    if len(empty):
        rows = ", ".join(str(i + 1) for i in empty)
        raise DataError(f"row(s) {rows} have no observed values")
    missing = {name: np.flatnonzero(~d.mask[:, j]) for j, name in enumerate(d.names)}
    observed = {name: np.flatnonzero(d.mask[:, j]) for j, name in enumerate(d.names)}
    return MissingnessPattern(d.names, missing, observed, _classify(d.mask))


def _parse(text: str, missing_tokens, source: str) -> Dataset:
    tokens = {t.strip() for t in missing_tokens}
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CSVParseError(f"{source} is empty") from None
    header = [h.strip() for h in header]
    if not any(header):
        raise CSVParseError(f"{source} has an empty header", line=1)
    rows, mask = [], []
    for rec in reader:
        line = reader.line_num
        if not rec or all(not c.strip() for c in rec) and len(rec) <= 1:
            continue
        if len(rec) != len(header):
            raise CSVParseError(f"expected {len(header)} fields, found {len(rec)}", line=line)
        vals, obs = [], []
        for name, cell in zip(header, rec):
            cell = cell.strip()
            if cell in tokens:
                vals.append(0.0)
                obs.append(False)
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise CSVParseError(f"non-numeric value {cell!r} in column {name!r}", line=line) from None
            obs.append(True)
        rows.append(vals)
        mask.append(obs)
    if not rows:
        raise CSVParseError(f"{source} has a header but no data rows")
    return Dataset(np.array(rows), np.array(mask), tuple(header))


def load_csv(path, missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS) -> Dataset:
    """Read a rectangular CSV with a header row into a Dataset.

    Cells equal (after stripping whitespace) to one of ``missing_tokens`` are
    marked missing.  The result is not validated; call :func:`validate`.
    """
    text = Path(path).read_text(encoding="utf-8")
    return _parse(text, missing_tokens, str(path))


def loads_csv(text: str, missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS) -> Dataset:
    return _parse(text, missing_tokens, "<string>")


# Little & Rubin's incomplete version of the Hald cement data (13 x 5).
_NA = np.nan
_HALD13 = np.array(
    [
        [7, 26, 6, 60, 78.5],
        [1, 29, 15, 52, 74.3],
        [11, 56, 8, 20, 104.3],
        [11, 31, 8, 47, 87.6],
        [7, 52, 6, 33, 95.9],
        [11, 55, 9, 22, 109.2],
        [3, 71, 17, _NA, 102.7],
        [1, 31, 22, _NA, 72.5],
        [2, 54, 18, _NA, 93.1],
        [_NA, _NA, 4, _NA, 115.9],
        [_NA, _NA, 23, _NA, 83.8],
        [_NA, _NA, 9, _NA, 113.3],
        [_NA, _NA, 8, _NA, 109.4],
    ]
)
HALD13_NAMES = ("X1", "X2", "X3", "X4", "X5")


def embedded_hald13() -> Dataset:
    """The 13-row incomplete Hald cement dataset (15 missing cells)."""
    return Dataset.from_array(_HALD13, HALD13_NAMES)


def hald13_csv_path():
    """Path-like handle to the packaged copy of the hald13 CSV."""
    return resources.files("regem") / "data" / "hald13.csv"
