"""Indicator basis expansion over observed data rows.

A basis function is a product of coordinatewise threshold indicators:
it evaluates to 1 at a point z exactly when z_j >= knot_j for every
covariate j in its subset. Knots are observed values (or per-covariate
empirical quantiles of them, when a knot budget is set), so the basis
set is data-adaptive but finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidConfigError, ShapeError

__all__ = ["BasisFunction", "BasisSet", "enumerate_bases", "evaluate_design"]

KnotBudget = Union[int, str, Sequence[int]]


@dataclass(frozen=True)
class BasisFunction:
    """Threshold indicator over a subset of covariates.

    Attributes:
        subset: strictly increasing covariate indices (0-based).
        knots: one cut value per index in ``subset``.
    """

    subset: Tuple[int, ...]
    knots: Tuple[float, ...]

    def __call__(self, z: np.ndarray) -> int:
        z = np.asarray(z, dtype=float).ravel()
        return int(all(z[j] >= k for j, k in zip(self.subset, self.knots)))


@dataclass(frozen=True)
class BasisSet:
    """Deduplicated collection of BasisFunctions over d source columns."""

    bases: Tuple[BasisFunction, ...]
    source_dim: int

    def __len__(self) -> int:
        return len(self.bases)

    def to_json_dict(self) -> dict:
        return {
            "source_dim": self.source_dim,
            "bases": [[list(b.subset), list(b.knots)] for b in self.bases],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BasisSet":
        bases = tuple(
            BasisFunction(subset=tuple(s), knots=tuple(k)) for s, k in doc["bases"]
        )
        return cls(bases=bases, source_dim=int(doc["source_dim"]))


def _degree_budget(knots_per_covariate: KnotBudget, degree: int) -> Union[int, None]:
    """Resolve the knot budget for subsets of a given size; None = all."""
    if knots_per_covariate == "all":
        return None
    if isinstance(knots_per_covariate, int):
        return knots_per_covariate
    seq = list(knots_per_covariate)
    if not seq:
        raise InvalidConfigError("empty knot budget sequence")
    return int(seq[min(degree - 1, len(seq) - 1)])


def _quantile_snap(col: np.ndarray, budget: Union[int, None]) -> np.ndarray:
    """Snap a column down to at most ``budget`` of its empirical quantiles."""
    if budget is None:
        return col
    grid = np.unique(col)
    if grid.size <= budget:
        return col
    qs = np.quantile(col, np.linspace(0.0, 1.0, budget), method="lower")
    grid = np.unique(qs)
    pos = np.searchsorted(grid, col, side="right") - 1
    return grid[np.maximum(pos, 0)]


def enumerate_bases(
    data: np.ndarray,
    max_degree: int = 2,
    knots_per_covariate: KnotBudget = "all",
) -> BasisSet:
    """Build the basis set implied by the rows of ``data``.

    Every covariate subset of size <= max_degree contributes one basis per
    retained (deduplicated) knot row. With a finite knot budget, each
    covariate is first reduced to that many empirical quantiles and the
    rows are snapped down onto the reduced grid before deduplication. A
    per-degree budget may be given as a sequence, e.g. ``(100, 50)``.

    Raises:
        InvalidConfigError: max_degree < 1 or no data rows.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = data.shape
    if max_degree < 1:
        raise InvalidConfigError(f"max_degree must be >= 1, got {max_degree}")
    if n < 1:
        raise InvalidConfigError("need at least one data row")
    max_degree = min(max_degree, d)

    snapped: Dict[int, Dict[int, np.ndarray]] = {}
    for degree in range(1, max_degree + 1):
        budget = _degree_budget(knots_per_covariate, degree)
        snapped[degree] = {j: _quantile_snap(data[:, j], budget) for j in range(d)}

    from itertools import combinations

    bases: List[BasisFunction] = []
    for degree in range(1, max_degree + 1):
        cols = snapped[degree]
        for subset in combinations(range(d), degree):
            rows = np.column_stack([cols[j] for j in subset])
            rows = np.unique(rows, axis=0)
            for knot_row in rows:
                bases.append(
                    BasisFunction(subset=subset, knots=tuple(float(v) for v in knot_row))
                )
    return BasisSet(bases=tuple(bases), source_dim=d)


def evaluate_design(
    bases: BasisSet, points: np.ndarray, dtype=np.uint8
) -> np.ndarray:
    """Evaluate all bases at each point, returning an (m, |bases|) 0/1 matrix.

    Entry (k, b) is 1 iff point k coordinatewise dominates basis b's knots
    on its subset (boundary inclusive).

    Raises:
        ShapeError: points do not have ``bases.source_dim`` columns.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m, d = points.shape
    if d != bases.source_dim:
        raise ShapeError(
            f"points have {d} columns but bases expect {bases.source_dim}"
        )
    out = np.empty((m, len(bases.bases)), dtype=dtype)

    # Group contiguous runs sharing a subset so each run is one vector op.
    start = 0
    nb = len(bases.bases)
    while start < nb:
        subset = bases.bases[start].subset
        stop = start
        while stop < nb and bases.bases[stop].subset == subset:
            stop += 1
        knots = np.array([bases.bases[i].knots for i in range(start, stop)])
        block = points[:, list(subset)]  # (m, |s|)
        hits = np.all(block[:, None, :] >= knots[None, :, :], axis=2)
        out[:, start:stop] = hits.astype(dtype)
        start = stop
    return out
