"""Penalty selection along the conditional-density regularization path.

Six procedures pick the final weighted estimator from the family of
density fits: global cross-validation, the projection-criterion
minimizer, its tolerance variant, a change-vs-noise rule on successive
estimates, a smoothed-trajectory inflection finder, and a hybrid that
runs the inflection finder up to the criterion minimizer's choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .datacore import Dataset
from .density import CondDensityFamily
from .errors import InvalidConfigError
from .estimators import (
    OutcomeFit,
    dcar_tilde_values,
    eif_values,
    ipw,
    se_eif,
    se_ipw,
)
from .policy import ShiftPolicy, ShiftWeights, apply_policy, post_density

__all__ = [
    "SelectorTrace",
    "SelectorChoice",
    "build_trace",
    "select_global_cv",
    "select_dcar_min",
    "select_dcar_tolerance",
    "select_lepski",
    "select_smoothed_plateau",
    "select_hybrid",
    "SELECTORS",
    "run_selector",
]


@dataclass
class SelectorTrace:
    """Per-penalty records consumed by every selector.

    Position 0 corresponds to the cross-validation choice; penalties
    strictly decrease along the arrays. ``sigma_cv`` is the
    influence-function standard error at position 0; ``se`` entries come
    from the weighted estimating function.
    """

    lambdas: np.ndarray
    psi: np.ndarray
    se: np.ndarray
    abs_pn_dcar: np.ndarray
    l1_norm: np.ndarray
    sigma_cv: float
    n: int

    def __len__(self) -> int:
        return self.lambdas.size

    def truncate(self, last_index: int) -> "SelectorTrace":
        s = slice(0, last_index + 1)
        return SelectorTrace(
            lambdas=self.lambdas[s], psi=self.psi[s], se=self.se[s],
            abs_pn_dcar=self.abs_pn_dcar[s], l1_norm=self.l1_norm[s],
            sigma_cv=self.sigma_cv, n=self.n,
        )


@dataclass
class SelectorChoice:
    """A selector's pick plus the diagnostics that justified it."""

    selector_kind: str
    chosen_index: int
    psi: float
    se: float
    fallback: bool = False
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_trace(cls, kind, trace, index, fallback=False, diagnostics=None):
        return cls(
            selector_kind=kind,
            chosen_index=int(index),
            psi=float(trace.psi[index]),
            se=float(trace.se[index]),
            fallback=fallback,
            diagnostics=diagnostics or {},
        )


def build_trace(
    dataset: Dataset,
    family: CondDensityFamily,
    policy: ShiftPolicy,
    outcome_fit: OutcomeFit,
    evaluator=None,
) -> SelectorTrace:
    """Stabilized weighted estimate, SE, |projection mean|, and L1 norm
    for every member of the density family.

    The per-unit hazard design is built once and shared across the
    family, so the cost per member is a sparse linear pass; a prebuilt
    evaluator for the same covariate rows may be passed in.
    """
    ds = dataset.rescale_outcome() if dataset.outcome is not None else dataset
    if ds.outcome is None:
        raise InvalidConfigError("selector trace needs an outcome")
    y = ds.outcome
    a = ds.treatment
    W = ds.covariates
    n = ds.n
    upper = policy.resolve_upper(a)
    a_shift = apply_policy(a, W, policy, upper)
    qbar = outcome_fit.predict(a, W)
    qbar_shift = outcome_fit.predict(a_shift, W)

    if evaluator is None:
        evaluator = family.evaluator(W)
    K = len(family)
    psis = np.empty(K)
    ses = np.empty(K)
    dcars = np.empty(K)
    l1s = np.empty(K)
    sigma_cv = float("nan")
    identity = policy.is_identity()
    for k in range(K):
        if identity:
            raw = np.ones(n)
        else:
            g = evaluator.density(k, a)
            g_shift = post_density(
                lambda vals: evaluator.density(k, vals), a, policy, upper
            )
            raw = g_shift / np.maximum(g, 1e-10)
        mean_h = float(raw.mean())
        if mean_h <= 0.0:
            psis[k] = 0.0
            ses[k] = 0.0
            dcars[k] = abs(float(np.mean(qbar_shift)))
            l1s[k] = family.l1_norm(k)
            continue
        wts = ShiftWeights(raw=raw, stabilized=raw / mean_h, mean_H=mean_h)
        psi_k = ipw(wts, y, stabilized=True)
        psis[k] = psi_k
        ses[k] = se_ipw(wts, y, psi_k)
        dcars[k] = abs(float(np.mean(dcar_tilde_values(qbar, qbar_shift, raw, psi_k))))
        l1s[k] = family.l1_norm(k)
        if k == 0:
            sigma_cv = se_eif(eif_values(y, qbar, qbar_shift, raw, psi_k))
    return SelectorTrace(
        lambdas=family.lambda_grid.copy(),
        psi=psis, se=ses, abs_pn_dcar=dcars, l1_norm=l1s,
        sigma_cv=sigma_cv, n=n,
    )


def select_global_cv(trace: SelectorTrace) -> SelectorChoice:
    """The cross-validation pick: always position 0 of the trace."""
    return SelectorChoice.from_trace("global-cv", trace, 0)


def select_dcar_min(trace: SelectorTrace) -> SelectorChoice:
    """Minimize |projection mean|; ties go to the stronger penalty."""
    idx = int(np.argmin(trace.abs_pn_dcar))
    return SelectorChoice.from_trace(
        "dcar-min", trace, idx,
        diagnostics={"criterion": float(trace.abs_pn_dcar[idx])},
    )


def select_dcar_tolerance(trace: SelectorTrace) -> SelectorChoice:
    """First penalty whose |projection mean| drops below sigma_cv/log(n).

    Falls back to the plain minimizer (flagged) when no candidate
    crosses the threshold.
    """
    threshold = trace.sigma_cv / np.log(trace.n)
    below = np.flatnonzero(trace.abs_pn_dcar < threshold)
    if below.size:
        idx = int(below[0])
        return SelectorChoice.from_trace(
            "dcar-tol", trace, idx,
            diagnostics={"threshold": float(threshold),
                         "criterion": float(trace.abs_pn_dcar[idx])},
        )
    fallback = select_dcar_min(trace)
    return SelectorChoice.from_trace(
        "dcar-tol", trace, fallback.chosen_index, fallback=True,
        diagnostics={"threshold": float(threshold),
                     "criterion": float(trace.abs_pn_dcar[fallback.chosen_index])},
    )


def select_lepski(trace: SelectorTrace, alpha: float = 0.05) -> SelectorChoice:
    """First index where the estimate's step is dominated by the SE step.

    Accepts index j when |psi_{j+1} - psi_j| <= z/log(n) * |se_{j+1} -
    se_j|; if the condition never holds the last index is returned with
    the fallback flag set.
    """
    K = len(trace)
    if K == 1:
        return SelectorChoice.from_trace("lepski", trace, 0)
    z = norm.ppf(1.0 - alpha / 2.0)
    scale = z / np.log(trace.n)
    dpsi = np.abs(np.diff(trace.psi))
    dse = np.abs(np.diff(trace.se))
    ok = np.flatnonzero(dpsi <= scale * dse)
    if ok.size:
        idx = int(ok[0])
        return SelectorChoice.from_trace(
            "lepski", trace, idx,
            diagnostics={"delta_psi": float(dpsi[idx]),
                         "bound": float(scale * dse[idx])},
        )
    return SelectorChoice.from_trace("lepski", trace, K - 1, fallback=True)


def _loess(x: np.ndarray, y: np.ndarray, span: float) -> np.ndarray:
    """Tricube-weighted locally linear smooth evaluated at the inputs."""
    m = x.size
    k = max(2, int(np.ceil(span * m)))
    k = min(k, m)
    out = np.empty(m)
    for i in range(m):
        d = np.abs(x - x[i])
        nearest = np.argsort(d, kind="stable")[:k]
        dmax = d[nearest].max()
        if dmax <= 0.0:
            out[i] = float(np.mean(y[nearest]))
            continue
        w = (1.0 - np.minimum(d[nearest] / dmax, 1.0) ** 3) ** 3
        sw = w.sum()
        if sw <= 0.0:
            out[i] = float(np.mean(y[nearest]))
            continue
        xm = float(np.dot(w, x[nearest]) / sw)
        ym = float(np.dot(w, y[nearest]) / sw)
        xc = x[nearest] - xm
        sxx = float(np.dot(w, xc * xc))
        if sxx < 1e-300:
            out[i] = ym
            continue
        slope = float(np.dot(w, xc * (y[nearest] - ym)) / sxx)
        out[i] = ym + slope * (x[i] - xm)
    return out


def _first_inflection(smoothed: np.ndarray) -> Optional[int]:
    """Position of the first sign change in second differences, or None."""
    if smoothed.size < 4:
        return None
    d2 = np.diff(smoothed, 2)  # d2[j] is centered at position j+1
    sgn = np.sign(d2)
    for j in range(d2.size - 1):
        if sgn[j] != 0.0 and sgn[j + 1] != 0.0 and sgn[j] != sgn[j + 1]:
            return j + 1
    return None


def select_smoothed_plateau(
    trace: SelectorTrace,
    k_max: float = 10.0,
    alpha: float = 0.05,
    loess_span: float = 0.75,
) -> SelectorChoice:
    """Inflection of the smoothed estimate-vs-L1-norm trajectory.

    The candidate window keeps members whose estimate lies inside the
    position-0 confidence band and whose L1 norm is at most k_max times
    the position-0 norm. The windowed estimates are smoothed against
    their L1 norms and the first curvature sign change is picked; any
    failure returns position 0 with the fallback flag.
    """
    z = norm.ppf(1.0 - alpha / 2.0)
    band = z * trace.se[0]
    in_band = np.abs(trace.psi - trace.psi[0]) <= band
    in_norm = trace.l1_norm <= k_max * trace.l1_norm[0]
    window = np.flatnonzero(in_band & in_norm)
    diagnostics = {"window_size": int(window.size), "band": float(band)}
    if window.size < 4:
        return SelectorChoice.from_trace(
            "plateau", trace, 0, fallback=True, diagnostics=diagnostics
        )
    smoothed = _loess(trace.l1_norm[window], trace.psi[window], loess_span)
    pos = _first_inflection(smoothed)
    if pos is None:
        return SelectorChoice.from_trace(
            "plateau", trace, 0, fallback=True, diagnostics=diagnostics
        )
    idx = int(window[pos])
    diagnostics["inflection_position"] = int(pos)
    return SelectorChoice.from_trace("plateau", trace, idx, diagnostics=diagnostics)


def select_hybrid(
    trace: SelectorTrace,
    k_max: float = 10.0,
    alpha: float = 0.05,
    loess_span: float = 0.75,
) -> SelectorChoice:
    """Plateau search truncated at the projection minimizer's choice."""
    j_star = select_dcar_min(trace).chosen_index
    sub = trace.truncate(j_star)
    inner = select_smoothed_plateau(sub, k_max=k_max, alpha=alpha, loess_span=loess_span)
    return SelectorChoice.from_trace(
        "hybrid", trace, inner.chosen_index, fallback=inner.fallback,
        diagnostics={"truncation_index": int(j_star), **inner.diagnostics},
    )


SELECTORS = {
    "global-cv": select_global_cv,
    "dcar-min": select_dcar_min,
    "dcar-tol": select_dcar_tolerance,
    "lepski": select_lepski,
    "plateau": select_smoothed_plateau,
    "hybrid": select_hybrid,
}


def run_selector(kind: str, trace: SelectorTrace, **kwargs) -> SelectorChoice:
    if kind not in SELECTORS:
        raise InvalidConfigError(
            f"unknown selector {kind!r}; choose from {sorted(SELECTORS)}"
        )
    return SELECTORS[kind](trace, **kwargs)
