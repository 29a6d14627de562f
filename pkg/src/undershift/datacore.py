"""Tabular data container, CSV ingestion, and cross-validation folds.

All downstream modules consume the immutable :class:`Dataset`; fold
assignment is deterministic in ``(n, V, seed)`` so that repeated runs
reproduce identical splits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ColumnError,
    EmptyInputError,
    InvalidFoldError,
    ParseError,
)

__all__ = ["Dataset", "FoldAssignment", "load_csv", "write_csv", "split_folds"]


@dataclass(frozen=True)
class Dataset:
    """Covariates, treatment, and (optionally) outcome for n units.

    Attributes:
        covariates: (n, d) float array of baseline covariates.
        treatment: (n,) float array.
        outcome: (n,) float array, or None for density-only workflows.
        covariate_names: names of the covariate columns, length d.
        treatment_name: name of the treatment column.
        outcome_name: name of the outcome column, or None.
        outcome_bounds: (lo, hi) used to map the outcome onto [0, 1];
            None means the outcome is stored on its original scale.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: Optional[np.ndarray] = None
    covariate_names: tuple = ()
    treatment_name: str = "A"
    outcome_name: Optional[str] = None
    outcome_bounds: Optional[tuple] = None

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        trt = np.asarray(self.treatment, dtype=float).ravel()
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treatment", trt)
        if self.outcome is not None:
            out = np.asarray(self.outcome, dtype=float).ravel()
            object.__setattr__(self, "outcome", out)
            if out.shape[0] != trt.shape[0]:
                raise ValueError("outcome and treatment lengths differ")
        if cov.shape[0] != trt.shape[0]:
            raise ValueError("covariates and treatment lengths differ")
        if trt.shape[0] < 1:
            raise EmptyInputError("dataset needs at least one unit")
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(trt)):
            raise ValueError("non-finite values in dataset")
        if self.outcome is not None and not np.all(np.isfinite(self.outcome)):
            raise ValueError("non-finite values in outcome")
        if not self.covariate_names:
            object.__setattr__(
                self,
                "covariate_names",
                tuple(f"W{j + 1}" for j in range(cov.shape[1])),
            )
        else:
            object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

        self.covariates.setflags(write=False)
        self.treatment.setflags(write=False)
        if self.outcome is not None:
            self.outcome.setflags(write=False)

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def rescale_outcome(self) -> "Dataset":
        """Return a copy whose outcome is min-max mapped onto [0, 1].

        The original bounds are retained in ``outcome_bounds`` for the
        inverse transform. A dataset already carrying bounds, or whose
        outcome lies in [0, 1], is returned with bounds filled in and
        values unchanged.
        """
        if self.outcome is None:
            raise ValueError("dataset has no outcome to rescale")
        if self.outcome_bounds is not None:
            return self
        lo = float(np.min(self.outcome))
        hi = float(np.max(self.outcome))
        if lo >= 0.0 and hi <= 1.0:
            return replace(self, outcome_bounds=(0.0, 1.0))
        if hi == lo:
            raise ValueError("constant outcome cannot be rescaled")
        scaled = (self.outcome - lo) / (hi - lo)
        return replace(self, outcome=scaled, outcome_bounds=(lo, hi))


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of units {0..n-1} into V cross-validation folds."""

    fold_of_unit: np.ndarray  # values in {1..V}
    V: int

    def __post_init__(self):
        object.__setattr__(
            self, "fold_of_unit", np.asarray(self.fold_of_unit, dtype=np.int64)
        )
        self.fold_of_unit.setflags(write=False)

    def train_indices(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_unit != v)

    def test_indices(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_unit == v)


def split_folds(n: int, V: int, seed: int) -> FoldAssignment:
    """Assign n units to V balanced folds, deterministically in the seed.

    Units are shuffled with a seeded generator and dealt round-robin, so
    fold sizes differ by at most one.
    """
    if V < 2:
        raise InvalidFoldError(f"V must be >= 2, got {V}")
    if V > n:
        raise InvalidFoldError(f"V={V} exceeds the number of units n={n}")
    order = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    fold[order] = np.arange(n) % V + 1
    return FoldAssignment(fold_of_unit=fold, V=V)


def _parse_cell(text: str, row: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(
            f"could not parse value {text!r} in column {col!r} at data row {row}"
        ) from None


def load_csv(
    path,
    treatment_col: str,
    outcome_col: Optional[str] = None,
    covariate_cols: Optional[Sequence[str]] = None,
) -> Dataset:
    """Read a header-bearing CSV into a Dataset.

    Args:
        path: file to read (UTF-8, comma-separated, '.' decimals).
        treatment_col: name of the treatment column.
        outcome_col: name of the outcome column; omit for density-only use.
        covariate_cols: covariate column names; defaults to every column
            that is neither the treatment nor the outcome.

    Raises:
        EmptyInputError: file has no header or no data rows.
        ColumnError: a named column is absent.
        ParseError: a cell is not numeric (reported with its row index).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        rows = [r for r in reader if r]
    if not rows:
        raise EmptyInputError(f"{path} has a header but no data rows")

    def col_index(name: str) -> int:
        try:
            return header.index(name)
        except ValueError:
            raise ColumnError(f"column {name!r} not found in {path}") from None

    t_idx = col_index(treatment_col)
    y_idx = col_index(outcome_col) if outcome_col is not None else None
    if covariate_cols is None:
        covariate_cols = [
            h for h in header if h != treatment_col and h != outcome_col
        ]
    w_idx = [col_index(c) for c in covariate_cols]

    n = len(rows)
    treatment = np.empty(n)
    outcome = np.empty(n) if y_idx is not None else None
    covariates = np.empty((n, len(w_idx)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"data row {i} has {len(row)} cells, expected {len(header)}")
        treatment[i] = _parse_cell(row[t_idx], i, treatment_col)
        if outcome is not None:
            outcome[i] = _parse_cell(row[y_idx], i, outcome_col)
        for k, j in enumerate(w_idx):
            covariates[i, k] = _parse_cell(row[j], i, covariate_cols[k])

    return Dataset(
        covariates=covariates,
        treatment=treatment,
        outcome=outcome,
        covariate_names=tuple(covariate_cols),
        treatment_name=treatment_col,
        outcome_name=outcome_col,
    )


def write_csv(dataset: Dataset, path) -> None:
    """Write a Dataset back to CSV with full-precision floats."""
    header = list(dataset.covariate_names) + [dataset.treatment_name]
    if dataset.outcome is not None:
        header.append(dataset.outcome_name or "Y")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(v) for v in dataset.covariates[i]]
            row.append(repr(float(dataset.treatment[i])))
            if dataset.outcome is not None:
                row.append(repr(float(dataset.outcome[i])))
            writer.writerow(row)
