"""Point estimators of the shifted-treatment mean and their inference.

Implements the substitution (plug-in), IPW (plain and stabilized),
one-step, and targeted (tilted plug-in) estimators, together with the
influence-function machinery shared by the penalty selectors: per-unit
efficient-influence values and the mean-zero-given-covariates
projection used as the undersmoothing criterion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .basis import BasisSet, enumerate_bases, evaluate_design
from .datacore import Dataset, split_folds
from .errors import (
    DegenerateResponseError,
    InvalidConfigError,
    TiltFailureError,
)
from .lasso import HalConfig, LassoPath, cv_risk, fit_lasso_path, l1_norm, predict
from .policy import ShiftPolicy, ShiftWeights, apply_policy, post_density, shift_weights

__all__ = [
    "OutcomeFit",
    "EstimateReport",
    "fit_outcome_regression",
    "substitution",
    "ipw",
    "eif_values",
    "dcar_tilde_values",
    "eif",
    "dcar_tilde",
    "onestep",
    "tmle",
    "se_ipw",
    "se_eif",
]

QBAR_CLIP = 1e-12


@dataclass
class OutcomeFit:
    """Fitted conditional-mean model for the outcome given (A, W).

    Predictions on the response scale live in [0, 1]; the stored bounds
    map them back to the outcome's original units.
    """

    method: str  # "hal" | "glm_main_effects"
    outcome_scale_bounds: Tuple[float, float]
    path: Optional[LassoPath] = None
    bases: Optional[BasisSet] = None
    lambda_index: int = 0
    glm_coef: Optional[np.ndarray] = None

    def predict(self, a, covariates, original_scale: bool = False) -> np.ndarray:
        a = np.asarray(a, dtype=float).ravel()
        W = np.atleast_2d(np.asarray(covariates, dtype=float))
        X = np.column_stack([a, W])
        if self.method == "hal":
            p = predict(self.path, self.bases, self.lambda_index, X, scale="response")
        else:
            Z = np.column_stack([np.ones(X.shape[0]), X])
            p = expit(Z @ self.glm_coef)
        if original_scale:
            lo, hi = self.outcome_scale_bounds
            return lo + (hi - lo) * p
        return p


def _logistic_mle(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unpenalized logistic fit via L-BFGS on the mean log-loss."""
    Z = np.column_stack([np.ones(X.shape[0]), X])
    n, p = Z.shape

    def f_and_grad(beta):
        eta = Z @ beta
        val = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
        grad = Z.T @ (expit(eta) - y) / n
        return val, grad

    res = minimize(
        f_and_grad,
        np.zeros(p),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 1000, "ftol": 1e-14, "gtol": 1e-10},
    )
    return res.x


def fit_outcome_regression(
    dataset: Dataset,
    method: str = "hal",
    config: HalConfig = HalConfig(),
    seed: int = 0,
) -> OutcomeFit:
    """Regress the outcome on (A, W).

    "hal" fits a logistic-loss lasso path over the indicator basis of
    (A, W) with the penalty chosen by cross-validation; the
    "glm_main_effects" comparator is a plain logistic regression on the
    main effects only.

    Raises:
        DegenerateResponseError: the outcome is constant.
    """
    if dataset.outcome is None:
        raise InvalidConfigError("dataset has no outcome column")
    if method not in ("hal", "glm_main_effects"):
        raise InvalidConfigError(f"unknown outcome method {method!r}")
    ds = dataset.rescale_outcome()
    y = ds.outcome
    if np.max(y) == np.min(y):
        raise DegenerateResponseError("constant outcome")
    bounds = ds.outcome_bounds
    X = np.column_stack([ds.treatment, ds.covariates])

    if method == "glm_main_effects":
        coef = _logistic_mle(X, y)
        return OutcomeFit(
            method=method, outcome_scale_bounds=bounds, glm_coef=coef
        )

    bases = enumerate_bases(
        X,
        max_degree=config.max_degree,
        knots_per_covariate=config.resolve_knots(ds.n),
    )
    design = evaluate_design(bases, X)
    path = fit_lasso_path(
        design, y, loss="logistic",
        lambdas="auto", n_lambda=config.n_lambda,
        lambda_min_ratio=config.lambda_min_ratio, tol=config.tol,
        max_sweeps=config.max_sweeps, max_outer=config.max_outer,
    )
    folds = split_folds(ds.n, config.cv_folds, seed)
    _, idx = cv_risk(design, y, folds, "logistic", path.lambdas)
    return OutcomeFit(
        method=method, outcome_scale_bounds=bounds,
        path=path, bases=bases, lambda_index=idx,
    )


@dataclass
class EstimateReport:
    """One estimator's output plus the diagnostics selectors consume."""

    estimator_kind: str  # sub | ipw | ipw_stab | onestep | tmle
    psi: float
    se: float
    lambda_index: int = -1
    l1_norm: float = float("nan")
    pn_eif: float = float("nan")
    pn_dcar: float = float("nan")
    extras: dict = field(default_factory=dict)

    def ci(self, z: float = 1.959963984540054) -> Tuple[float, float]:
        return (self.psi - z * self.se, self.psi + z * self.se)

    def to_json_dict(self) -> dict:
        doc = {
            "estimator_kind": self.estimator_kind,
            "psi": self.psi,
            "se": self.se,
            "lambda_index": self.lambda_index,
            "l1_norm": self.l1_norm,
            "pn_eif": self.pn_eif,
            "pn_dcar": self.pn_dcar,
        }
        doc.update(self.extras)
        return doc


# ---------------------------------------------------------------------------
# estimating-function building blocks (model scale)
# ---------------------------------------------------------------------------


def eif_values(
    y: np.ndarray,
    qbar: np.ndarray,
    qbar_shift: np.ndarray,
    raw_weights: np.ndarray,
    psi: float,
) -> np.ndarray:
    """Efficient-influence values H*(Y - Qbar) + Qbarᵈ - psi."""
    return raw_weights * (y - qbar) + qbar_shift - psi


def dcar_tilde_values(
    qbar: np.ndarray,
    qbar_shift: np.ndarray,
    raw_weights: np.ndarray,
    psi: float,
) -> np.ndarray:
    """Projection of the weighted estimating function onto mean-zero-
    given-W functions of the treatment, in its stabilized form:

        psi * (1 - H) + Qbar * H - Qbarᵈ,

    where 1 - H equals (g - g_shift)/g. Written through H so that the
    identity U - Dcar = EIF holds exactly even where g is floored.
    """
    return psi * (1.0 - raw_weights) + qbar * raw_weights - qbar_shift


def _nuisance_pieces(dataset, density, outcome_fit, policy):
    """Shared per-unit quantities on the outcome model scale."""
    ds = dataset.rescale_outcome()
    y = ds.outcome
    a = ds.treatment
    W = ds.covariates
    upper = policy.resolve_upper(a)
    a_shift = apply_policy(a, W, policy, upper)
    qbar = outcome_fit.predict(a, W)
    qbar_shift = outcome_fit.predict(a_shift, W)
    wts = shift_weights(density, policy, ds)
    return ds, y, a, W, upper, a_shift, qbar, qbar_shift, wts


def eif(
    dataset: Dataset,
    density,
    outcome_fit: OutcomeFit,
    policy: ShiftPolicy,
    psi: float,
) -> np.ndarray:
    """Per-unit efficient-influence values at the given nuisances."""
    _, y, _, _, _, _, qbar, qbar_shift, wts = _nuisance_pieces(
        dataset, density, outcome_fit, policy
    )
    return eif_values(y, qbar, qbar_shift, wts.raw, psi)


def dcar_tilde(
    dataset: Dataset,
    density,
    outcome_fit: OutcomeFit,
    policy: ShiftPolicy,
    psi: float,
) -> np.ndarray:
    """Per-unit projection values; the selectors use |mean| of these."""
    _, _, _, _, _, _, qbar, qbar_shift, wts = _nuisance_pieces(
        dataset, density, outcome_fit, policy
    )
    return dcar_tilde_values(qbar, qbar_shift, wts.raw, psi)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def substitution(outcome_fit: OutcomeFit, policy: ShiftPolicy, dataset: Dataset) -> float:
    """Plug-in mean of the outcome model at shifted treatments."""
    a = dataset.treatment
    upper = policy.resolve_upper(a)
    a_shift = apply_policy(a, dataset.covariates, policy, upper)
    return float(
        np.mean(outcome_fit.predict(a_shift, dataset.covariates, original_scale=True))
    )


def ipw(weights: ShiftWeights, y: np.ndarray, stabilized: bool = True) -> float:
    """Weighted outcome mean; the stabilized variant normalizes by H-bar."""
    y = np.asarray(y, dtype=float)
    h = weights.stabilized if stabilized else weights.raw
    return float(np.mean(h * y))


def se_ipw(weights: ShiftWeights, y: np.ndarray, psi: float) -> float:
    """SE from the empirical variance of the stabilized estimating function."""
    y = np.asarray(y, dtype=float)
    u = weights.stabilized * (y - psi)
    n = u.size
    if n < 2:
        return 0.0
    return float(np.sqrt(np.var(u, ddof=1) / n))


def se_eif(eif_vals: np.ndarray) -> float:
    """SE from the empirical variance of influence values."""
    v = np.asarray(eif_vals, dtype=float)
    n = v.size
    if n < 2:
        return 0.0
    return float(np.sqrt(np.var(v, ddof=1) / n))


def onestep(
    dataset: Dataset,
    density,
    outcome_fit: OutcomeFit,
    policy: ShiftPolicy,
) -> EstimateReport:
    """Plug-in estimate corrected by the mean influence value."""
    ds, y, _, _, _, _, qbar, qbar_shift, wts = _nuisance_pieces(
        dataset, density, outcome_fit, policy
    )
    psi_sub = float(np.mean(qbar_shift))
    vals = eif_values(y, qbar, qbar_shift, wts.raw, psi_sub)
    psi_plus = psi_sub + float(np.mean(vals))
    lo, hi = outcome_fit.outcome_scale_bounds
    dcar = dcar_tilde_values(qbar, qbar_shift, wts.raw, psi_plus)
    return EstimateReport(
        estimator_kind="onestep",
        psi=lo + (hi - lo) * psi_plus,
        se=(hi - lo) * se_eif(vals),
        pn_eif=float(np.mean(eif_values(y, qbar, qbar_shift, wts.raw, psi_plus))),
        pn_dcar=float(np.mean(dcar)),
    )


def _solve_tilt(
    y: np.ndarray, logit_q: np.ndarray, h: np.ndarray,
    tol: float = 1e-13, max_iter: int = 100,
) -> float:
    """Newton root of the tilt score mean(H * (Y - expit(logit_q + eps*H)))."""
    eps = 0.0
    score = float(np.mean(h * (y - expit(logit_q))))
    for _ in range(max_iter):
        if abs(score) <= tol:
            return eps
        q = expit(logit_q + eps * h)
        deriv = -float(np.mean(h * h * q * (1.0 - q)))
        if not np.isfinite(deriv) or abs(deriv) < 1e-300:
            break
        step = -score / deriv
        # halve until the score magnitude actually shrinks
        for _half in range(60):
            cand = eps + step
            new_score = float(np.mean(h * (y - expit(logit_q + cand * h))))
            if abs(new_score) < abs(score) or abs(new_score) <= tol:
                eps, score = cand, new_score
                break
            step *= 0.5
        else:
            break
    if abs(score) > 1e-6:
        raise TiltFailureError(f"tilt score stalled at {score:.3e}")
    return eps


def tmle(
    dataset: Dataset,
    density,
    outcome_fit: OutcomeFit,
    policy: ShiftPolicy,
) -> EstimateReport:
    """Targeted plug-in: tilt the outcome model along the weight direction.

    Fits eps in logit Q* = logit Q + eps*H by offset logistic regression
    (no intercept), then averages Q* at shifted treatments, with the tilt
    covariate there evaluated at the shifted points.
    """
    ds, y, a, W, upper, a_shift, qbar, qbar_shift, wts = _nuisance_pieces(
        dataset, density, outcome_fit, policy
    )
    h = wts.raw
    logit_q = logit(np.clip(qbar, QBAR_CLIP, 1.0 - QBAR_CLIP))
    eps = _solve_tilt(y, logit_q, h)

    if policy.is_identity():
        h_shift = np.ones(ds.n)
    else:
        g_at_shift = np.asarray(density.density(a_shift, W), dtype=float)
        gs_at_shift = post_density(
            lambda vals: density.density(vals, W), a_shift, policy, upper
        )
        h_shift = gs_at_shift / np.maximum(g_at_shift, 1e-10)
    logit_q_shift = logit(np.clip(qbar_shift, QBAR_CLIP, 1.0 - QBAR_CLIP))
    q_star_shift = expit(logit_q_shift + eps * h_shift)
    psi_star = float(np.mean(q_star_shift))

    q_star = expit(logit_q + eps * h)
    vals = eif_values(y, q_star, q_star_shift, h, psi_star)
    dcar = dcar_tilde_values(q_star, q_star_shift, h, psi_star)
    lo, hi = outcome_fit.outcome_scale_bounds
    return EstimateReport(
        estimator_kind="tmle",
        psi=lo + (hi - lo) * psi_star,
        se=(hi - lo) * se_eif(vals),
        pn_eif=float(np.mean(vals)),
        pn_dcar=float(np.mean(dcar)),
        extras={"epsilon": eps},
    )
