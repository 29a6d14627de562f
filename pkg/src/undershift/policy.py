"""Shift policies for the treatment, their induced densities, and weights.

A policy moves each unit's natural treatment additively or
multiplicatively whenever the shifted value stays below an upper
support bound; otherwise the natural value is kept. The density this
induces has two pieces: shifted-in mass (with a Jacobian for
multiplicative shifts) plus kept mass near the bound. Weights are the
ratio of the induced to the natural density.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .datacore import Dataset
from .errors import InvalidConfigError, PositivityError

__all__ = ["ShiftPolicy", "ShiftWeights", "apply_policy", "post_density", "shift_weights"]

DENSITY_RATIO_FLOOR = 1e-10


@dataclass(frozen=True)
class ShiftPolicy:
    """Additive or multiplicative treatment shift with a support bound.

    Attributes:
        kind: "additive" (a -> a + delta) or "multiplicative" (a -> a * delta).
        delta: shift amount; must be positive for multiplicative shifts.
        upper_bound: "empirical_max" resolves to max(A) of the data the
            policy is applied to; a float fixes the bound (use inf for an
            unbounded shift).
    """

    kind: str
    delta: float
    upper_bound: Union[str, float] = "empirical_max"

    def __post_init__(self):
        if self.kind not in ("additive", "multiplicative"):
            raise InvalidConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "multiplicative" and self.delta <= 0.0:
            raise InvalidConfigError("multiplicative delta must be > 0")

    def resolve_upper(self, treatment: np.ndarray) -> float:
        if self.upper_bound == "empirical_max":
            return float(np.max(treatment))
        return float(self.upper_bound)

    def is_identity(self) -> bool:
        return (self.kind == "additive" and self.delta == 0.0) or (
            self.kind == "multiplicative" and self.delta == 1.0
        )

    def inverse(self, a: np.ndarray) -> np.ndarray:
        """Inverse of the shifted piece (the map applied when below the bound)."""
        a = np.asarray(a, dtype=float)
        if self.kind == "additive":
            return a - self.delta
        return a / self.delta

    @property
    def inverse_derivative(self) -> float:
        """Derivative of the shifted piece's inverse: 1 or 1/delta."""
        return 1.0 if self.kind == "additive" else 1.0 / self.delta


def apply_policy(a, covariates, policy: ShiftPolicy, upper: float):
    """Shifted treatment values: shift when feasible, keep otherwise."""
    a = np.asarray(a, dtype=float)
    if policy.kind == "additive":
        shifted = a + policy.delta
    else:
        shifted = a * policy.delta
    out = np.where(shifted <= upper, shifted, a)
    return float(out) if out.ndim == 0 else out


def post_density(
    density_of: Callable[[np.ndarray], np.ndarray],
    a: np.ndarray,
    policy: ShiftPolicy,
    upper: float,
) -> np.ndarray:
    """Density induced by the policy, evaluated at per-unit values ``a``.

    ``density_of`` maps candidate treatment values (aligned with the
    units' covariates) to natural-density values. Mass arrives at a from
    units shifted up to it (requires a <= upper) and from units that kept
    their natural value because shifting would cross the bound.
    """
    a = np.asarray(a, dtype=float)
    delta = policy.delta
    if policy.kind == "additive":
        moved = np.where(a <= upper, density_of(a - delta), 0.0)
        kept = np.where(a > upper - delta, density_of(a), 0.0)
    else:
        moved = np.where(a <= upper, density_of(a / delta) * (1.0 / delta), 0.0)
        kept = np.where(a > upper / delta, density_of(a), 0.0)
    return moved + kept


@dataclass(frozen=True)
class ShiftWeights:
    """Raw and mean-normalized density-ratio weights."""

    raw: np.ndarray
    stabilized: np.ndarray
    mean_H: float

    @property
    def n(self) -> int:
        return self.raw.size


def shift_weights(
    density, policy: ShiftPolicy, dataset: Dataset, floor: float = DENSITY_RATIO_FLOOR
) -> ShiftWeights:
    """Per-unit weights H_i = induced density over natural density.

    The denominator is floored; if more than half the units sit at the
    floor the run is treated as a positivity violation rather than a
    numerical accident.

    ``density`` is any object with a ``.density(a, covariates)`` method.
    """
    a = dataset.treatment
    W = dataset.covariates
    if policy.is_identity():
        # The induced density coincides with the natural one pointwise, so
        # every ratio is exactly 1 regardless of how small g gets.
        ones = np.ones(a.size)
        return ShiftWeights(raw=ones, stabilized=ones.copy(), mean_H=1.0)
    upper = policy.resolve_upper(a)
    g = np.asarray(density.density(a, W), dtype=float)
    g_shift = post_density(lambda vals: density.density(vals, W), a, policy, upper)
    at_floor = g < floor
    if np.mean(at_floor) > 0.5:
        raise PositivityError(
            f"{at_floor.sum()} of {a.size} natural-density values fall below "
            f"{floor}; the shifted treatment distribution is not supported "
            "by the observed one"
        )
    raw = g_shift / np.maximum(g, floor)
    mean_H = float(raw.mean())
    if mean_H <= 0.0:
        raise PositivityError("all shift weights vanished")
    return ShiftWeights(raw=raw, stabilized=raw / mean_H, mean_H=mean_H)
