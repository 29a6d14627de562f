"""Conditional density estimation for the generalized propensity score.

The primary estimator discretizes the treatment into bins, expands each
unit into one record per bin up to the bin containing its treatment
(a binary counting process jumping to 1 there), fits a logistic lasso
path to the pooled bin-membership hazard, and rescales hazard products
by bin widths to land on the density scale. Cross-validation picks only
the strictest penalty of the returned family; the remaining grid values
are kept as undersmoothing candidates.

A location-scale fallback (mean/variance regressions plus a kernel
density of standardized residuals) is provided for treatments that are
poorly served by binning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.stats import gaussian_kde

from .basis import BasisSet, enumerate_bases, evaluate_design
from .datacore import Dataset, FoldAssignment, split_folds
from .errors import (
    DegenerateBinsError,
    InvalidConfigError,
    OutOfSupportError,
)
from .lasso import (
    HalConfig,
    LassoPath,
    _eta_matrix,
    fit_lasso_path,
    l1_norm,
)

__all__ = [
    "BinningScheme",
    "HazardExpansion",
    "CondDensityFamily",
    "FamilyEvaluator",
    "make_bins",
    "expand_repeated_measures",
    "fit_pooled_hazard",
    "density_at",
    "cv_density_risk",
    "build_family",
    "fit_locscale",
    "LocScaleDensity",
    "default_bin_count",
]

DENSITY_LOG_FLOOR = 1e-10


def default_bin_count(n: int) -> int:
    """Histogram-style default: max(5, n^(1/3)), exposed in config."""
    return max(5, int(round(n ** (1.0 / 3.0))))


@dataclass(frozen=True)
class BinningScheme:
    """T bins over the treatment support, defined by T+1 cutpoints."""

    cutpoints: np.ndarray
    kind: str  # "equal_range" | "equal_mass"

    def __post_init__(self):
        cuts = np.asarray(self.cutpoints, dtype=float)
        object.__setattr__(self, "cutpoints", cuts)
        cuts.setflags(write=False)
        if cuts.size < 3:
            raise DegenerateBinsError("need at least two bins (three cutpoints)")
        if not np.all(np.diff(cuts) > 0.0):
            raise DegenerateBinsError("cutpoints must be strictly increasing")

    @property
    def T(self) -> int:
        return self.cutpoints.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.cutpoints)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.cutpoints[:-1] + self.cutpoints[1:])

    def bin_of(self, a) -> np.ndarray:
        """1-based bin index per value; 0 marks out-of-support values."""
        a = np.asarray(a, dtype=float)
        t = np.searchsorted(self.cutpoints, a, side="right")
        t = np.where(a == self.cutpoints[-1], self.T, t)  # top edge closed
        out = (a < self.cutpoints[0]) | (a > self.cutpoints[-1])
        return np.where(out, 0, t).astype(np.int64)


def make_bins(treatment: np.ndarray, T: int, scheme: str = "equal_range") -> BinningScheme:
    """Divide the observed treatment support into T bins.

    equal_range uses T equal-width bins over [min(A), max(A)], with the
    top edge padded by a machine-epsilon-scale amount so that max(A) is
    interior; equal_mass places cutpoints at empirical quantiles k/T.
    """
    a = np.asarray(treatment, dtype=float).ravel()
    if T < 2:
        raise InvalidConfigError(f"need T >= 2 bins, got {T}")
    lo, hi = float(np.min(a)), float(np.max(a))
    if scheme == "equal_range":
        if hi <= lo:
            raise DegenerateBinsError("treatment is constant: zero-width bins")
        cuts = np.linspace(lo, hi, T + 1)
    elif scheme == "equal_mass":
        if np.unique(a).size < T:
            raise DegenerateBinsError(
                f"equal_mass with T={T} needs at least T distinct treatment values"
            )
        cuts = np.quantile(a, np.linspace(0.0, 1.0, T + 1))
        if not np.all(np.diff(cuts) > 0.0):
            raise DegenerateBinsError("duplicate quantiles produce zero-width bins")
    else:
        raise InvalidConfigError(f"unknown binning scheme {scheme!r}")
    cuts = cuts.copy()
    cuts[-1] = hi + 4.0 * np.spacing(max(abs(hi), 1.0))
    return BinningScheme(cutpoints=cuts, kind=scheme)


@dataclass(frozen=True)
class HazardExpansion:
    """Repeated-measures records: one row per (unit, bin-at-risk)."""

    long_covariates: np.ndarray  # (R, d) unit covariates, repeated
    bin_indicator: np.ndarray  # (R,) 0/1, jumps to 1 at the unit's bin
    unit_id: np.ndarray  # (R,)
    bin_index: np.ndarray  # (R,) 1..T

    @property
    def n_records(self) -> int:
        return self.bin_indicator.size

    def regression_matrix(self) -> np.ndarray:
        """Inputs for the hazard regression: bin index first, then W."""
        return np.column_stack([self.bin_index.astype(float), self.long_covariates])


def expand_repeated_measures(dataset: Dataset, bins: BinningScheme) -> HazardExpansion:
    """Expand each unit into t records, indicators (0, ..., 0, 1).

    A unit whose treatment falls in bin t contributes t rows; its
    covariates repeat unchanged across them.

    Raises:
        OutOfSupportError: a treatment lies outside the cutpoint range.
    """
    t = bins.bin_of(dataset.treatment)
    if np.any(t == 0):
        bad = int(np.flatnonzero(t == 0)[0])
        raise OutOfSupportError(
            f"treatment {dataset.treatment[bad]} of unit {bad} lies outside "
            f"[{bins.cutpoints[0]}, {bins.cutpoints[-1]}]"
        )
    n = dataset.n
    total = int(t.sum())
    unit_id = np.repeat(np.arange(n), t)
    offsets = np.repeat(np.cumsum(t) - t, t)
    bin_index = np.arange(total) - offsets + 1
    indicator = (bin_index == np.repeat(t, t)).astype(float)
    return HazardExpansion(
        long_covariates=dataset.covariates[unit_id],
        bin_indicator=indicator,
        unit_id=unit_id,
        bin_index=bin_index,
    )


def fit_pooled_hazard(
    expansion: HazardExpansion,
    lambdas="auto",
    config: HalConfig = HalConfig(),
) -> Tuple[LassoPath, BasisSet]:
    """Logistic HAL fit of the bin-membership indicator on (bin, W)."""
    reg = expansion.regression_matrix()
    bases = enumerate_bases(
        reg,
        max_degree=config.max_degree,
        knots_per_covariate=config.resolve_knots(reg.shape[0]),
    )
    design = evaluate_design(bases, reg)
    path = fit_lasso_path(
        design,
        expansion.bin_indicator,
        loss="logistic",
        lambdas=lambdas,
        n_lambda=config.n_lambda,
        lambda_min_ratio=config.lambda_min_ratio,
        tol=config.tol,
        max_sweeps=config.max_sweeps,
        max_outer=config.max_outer,
    )
    return path, bases


@dataclass
class CondDensityFamily:
    """Lambda-indexed family of binned conditional density estimators.

    ``grid_indices`` point into the fitted path; position 0 is the
    CV-selected penalty and later positions relax it (undersmoothing).
    """

    bins: BinningScheme
    path: LassoPath
    bases: BasisSet
    grid_indices: np.ndarray
    cv_index: int
    cv_risks: Optional[np.ndarray] = None

    @property
    def lambda_grid(self) -> np.ndarray:
        return self.path.lambdas[self.grid_indices]

    def __len__(self) -> int:
        return self.grid_indices.size

    def l1_norm(self, family_index: int) -> float:
        return l1_norm(self.path, int(self.grid_indices[family_index]))

    def evaluator(self, covariates: np.ndarray) -> "FamilyEvaluator":
        return FamilyEvaluator(self, covariates)

    def at(self, family_index: int) -> "BinnedDensity":
        if not 0 <= family_index < len(self):
            raise IndexError(f"family index {family_index} out of range")
        return BinnedDensity(self, int(family_index))

    def to_json_dict(self) -> dict:
        return {
            "bins": {"cutpoints": [float(c) for c in self.bins.cutpoints],
                     "type": self.bins.kind},
            "lambda_grid": [float(v) for v in self.lambda_grid],
            "cv_index": int(self.cv_index),
            "grid_indices": [int(i) for i in self.grid_indices],
            "hazard_model": self.path.to_json_dict(self.bases),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CondDensityFamily":
        path = LassoPath.from_json_dict(doc["hazard_model"])
        bases = BasisSet.from_json_dict(doc["hazard_model"]["bases"])
        bins = BinningScheme(
            cutpoints=np.asarray(doc["bins"]["cutpoints"], dtype=float),
            kind=doc["bins"]["type"],
        )
        return cls(
            bins=bins,
            path=path,
            bases=bases,
            grid_indices=np.asarray(doc["grid_indices"], dtype=np.int64),
            cv_index=int(doc["cv_index"]),
        )


class FamilyEvaluator:
    """Caches the hazard design for a fixed covariate matrix.

    The (unit, bin) evaluation grid does not depend on the penalty, so
    evaluating many family members against the same covariates costs one
    design construction plus one sparse linear pass per member.
    """

    def __init__(self, family: CondDensityFamily, covariates: np.ndarray):
        self.family = family
        W = np.atleast_2d(np.asarray(covariates, dtype=float))
        self.n = W.shape[0]
        T = family.bins.T
        bins_col = np.tile(np.arange(1, T + 1, dtype=float), self.n)
        pts = np.column_stack([bins_col, np.repeat(W, T, axis=0)])
        design = evaluate_design(family.bases, pts)
        self._design_t = np.ascontiguousarray(design.T)
        self._cache = {}

    def hazards(self, family_index: int) -> np.ndarray:
        """(n, T) predicted hazards; the final bin's hazard is 1.

        Mass that survives every earlier bin must land in the last one,
        which makes the bin probabilities sum to 1 for every unit.
        """
        if family_index in self._cache:
            return self._cache[family_index]
        k = int(self.family.grid_indices[family_index])
        coefs = self.family.path.coefficients[k : k + 1]
        icept = self.family.path.intercepts[k : k + 1]
        eta = _eta_matrix(self._design_t, coefs, icept)[0]
        h = expit(eta).reshape(self.n, self.family.bins.T)
        h[:, -1] = 1.0
        self._cache[family_index] = h
        return h

    def bin_probs(self, family_index: int) -> np.ndarray:
        h = self.hazards(family_index)
        surv = np.cumprod(1.0 - h[:, :-1], axis=1)
        probs = h.copy()
        probs[:, 1:] *= surv
        return probs

    def density_matrix(self, family_index: int) -> np.ndarray:
        """(n, T) piecewise-constant density per bin for each unit."""
        return self.bin_probs(family_index) / self.family.bins.widths

    def density(self, family_index: int, a: np.ndarray) -> np.ndarray:
        """Density at per-unit treatment values aligned with the rows."""
        a = np.asarray(a, dtype=float).ravel()
        if a.size != self.n:
            raise ValueError("treatment values must align with cached rows")
        t = self.family.bins.bin_of(a)
        dens = self.density_matrix(family_index)
        inside = t > 0
        out = np.zeros(a.size)
        rows = np.flatnonzero(inside)
        out[rows] = dens[rows, t[rows] - 1]
        return out


@dataclass(frozen=True)
class BinnedDensity:
    """A single family member exposed through the density protocol."""

    family: CondDensityFamily
    family_index: int

    def density(self, a, covariates) -> np.ndarray:
        a = np.asarray(a, dtype=float).ravel()
        W = np.atleast_2d(np.asarray(covariates, dtype=float))
        if W.shape[0] == 1 and a.size > 1:
            W = np.repeat(W, a.size, axis=0)
        ev = FamilyEvaluator(self.family, W)
        return ev.density(self.family_index, a)


def density_at(
    family: CondDensityFamily, lambda_index: int, a, covariates
) -> Union[float, np.ndarray]:
    """Density of one family member at (a, w) pairs; 0 outside support."""
    scalar = np.isscalar(a)
    vals = family.at(lambda_index).density(a, covariates)
    return float(vals[0]) if scalar else vals


def cv_density_risk(
    dataset: Dataset,
    bins: BinningScheme,
    folds: FoldAssignment,
    lambdas: np.ndarray,
    config: HalConfig = HalConfig(),
) -> Tuple[np.ndarray, int]:
    """Held-out negative log-density risk per lambda, and the argmin.

    The density inside the log is floored at 1e-10; returned density
    values elsewhere in the package are never floored. Ties go to the
    larger lambda.
    """
    grid = np.asarray(lambdas, dtype=float).ravel()
    if grid.size > 1 and not np.all(np.diff(grid) < 0.0):
        raise InvalidConfigError("lambda grid must be strictly decreasing")
    n = dataset.n
    risks = np.zeros((folds.V, grid.size))
    any_useful = np.zeros(grid.size, dtype=bool)
    for v in range(1, folds.V + 1):
        tr = folds.train_indices(v)
        te = folds.test_indices(v)
        sub = Dataset(
            covariates=dataset.covariates[tr],
            treatment=dataset.treatment[tr],
            covariate_names=dataset.covariate_names,
        )
        expansion = expand_repeated_measures(sub, bins)
        path, bases = fit_pooled_hazard(expansion, lambdas=grid, config=config)
        fam = CondDensityFamily(
            bins=bins, path=path, bases=bases,
            grid_indices=np.arange(grid.size), cv_index=0,
        )
        ev = fam.evaluator(dataset.covariates[te])
        a_te = dataset.treatment[te]
        for k in range(grid.size):
            dens = ev.density(k, a_te)
            any_useful[k] |= bool(np.any(dens > DENSITY_LOG_FLOOR))
            risks[v - 1, k] = float(
                -np.mean(np.log(np.maximum(dens, DENSITY_LOG_FLOOR)))
            )
    mean_risk = risks.mean(axis=0)
    if not np.all(any_useful):
        warnings.warn(
            "degenerate-risk: some candidate penalties put every held-out "
            "density at the floor",
            RuntimeWarning,
        )
    return mean_risk, int(np.argmin(mean_risk))


def build_family(
    dataset: Dataset,
    T: Optional[int] = None,
    scheme: str = "equal_range",
    folds: Union[FoldAssignment, int] = 5,
    n_lambda_total: int = 3000,
    undersmooth_count: Optional[int] = None,
    config: HalConfig = HalConfig(),
    seed: int = 0,
) -> CondDensityFamily:
    """Fit the full path, CV-select the strictest penalty, keep the rest.

    The returned family's grid starts at the CV choice and continues with
    the next-smaller penalties (undersmoothing candidates), refit on the
    full data. ``undersmooth_count=None`` keeps every remaining grid
    value.
    """
    if T is None:
        T = default_bin_count(dataset.n)
    bins = make_bins(dataset.treatment, T, scheme)
    expansion = expand_repeated_measures(dataset, bins)
    path, bases = fit_pooled_hazard(
        expansion,
        lambdas="auto",
        config=HalConfig(
            **{**config.__dict__, "n_lambda": n_lambda_total}
        ),
    )
    if isinstance(folds, int):
        folds = split_folds(dataset.n, folds, seed)
    risks, cv_index = cv_density_risk(dataset, bins, folds, path.lambdas, config)
    K = len(path.lambdas) - cv_index if undersmooth_count is None else undersmooth_count
    if K < 1:
        raise InvalidConfigError("undersmooth_count must be >= 1")
    stop = min(cv_index + K, len(path.lambdas))
    if cv_index == len(path.lambdas) - 1:
        warnings.warn(
            "CV selected the smallest grid penalty; no undersmoothing "
            "candidates remain (family truncated to size 1)",
            RuntimeWarning,
        )
    return CondDensityFamily(
        bins=bins,
        path=path,
        bases=bases,
        grid_indices=np.arange(cv_index, stop),
        cv_index=cv_index,
        cv_risks=risks,
    )


# ---------------------------------------------------------------------------
# location-scale fallback
# ---------------------------------------------------------------------------

VARIANCE_FLOOR = 1e-6


class _MeanRegression:
    """HAL or main-effects linear regression used inside fit_locscale."""

    def __init__(self, learner: str, config: HalConfig, seed: int):
        if learner not in ("hal", "glm"):
            raise InvalidConfigError(f"unknown mean learner {learner!r}")
        self.learner = learner
        self.config = config
        self.seed = seed
        self._path = None
        self._bases = None
        self._index = 0
        self._coef = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "_MeanRegression":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.learner == "glm":
            Z = np.column_stack([np.ones(X.shape[0]), X])
            self._coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
            return self
        from .lasso import cv_risk as lasso_cv_risk

        bases = enumerate_bases(
            X,
            max_degree=self.config.max_degree,
            knots_per_covariate=self.config.resolve_knots(X.shape[0]),
        )
        design = evaluate_design(bases, X)
        path = fit_lasso_path(
            design, y, loss="squared_error",
            lambdas="auto", n_lambda=self.config.n_lambda,
            lambda_min_ratio=self.config.lambda_min_ratio, tol=self.config.tol,
        )
        folds = split_folds(X.shape[0], self.config.cv_folds, self.seed)
        _, idx = lasso_cv_risk(
            design, y, folds, "squared_error", path.lambdas
        )
        self._path, self._bases, self._index = path, bases, idx
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.learner == "glm":
            Z = np.column_stack([np.ones(X.shape[0]), X])
            return Z @ self._coef
        from .lasso import predict as lasso_predict

        return lasso_predict(self._path, self._bases, self._index, X, scale="link")


@dataclass
class LocScaleDensity:
    """g(a|w) = kde((a - mu(w)) / sigma(w)) / sigma(w)."""

    mean_model: _MeanRegression
    var_model: Optional[_MeanRegression]
    sigma_const: Optional[float]
    kde: gaussian_kde

    def mu(self, covariates: np.ndarray) -> np.ndarray:
        return self.mean_model.predict(covariates)

    def sigma(self, covariates: np.ndarray) -> np.ndarray:
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        if self.var_model is None:
            return np.full(covariates.shape[0], self.sigma_const)
        var = self.var_model.predict(covariates)
        if np.any(var < VARIANCE_FLOOR):
            warnings.warn(
                "conditional variance estimate floored at 1e-6", RuntimeWarning
            )
            var = np.maximum(var, VARIANCE_FLOOR)
        return np.sqrt(var)

    def density(self, a, covariates) -> np.ndarray:
        a = np.asarray(a, dtype=float).ravel()
        W = np.atleast_2d(np.asarray(covariates, dtype=float))
        if W.shape[0] == 1 and a.size > 1:
            W = np.repeat(W, a.size, axis=0)
        mu = self.mu(W)
        sig = self.sigma(W)
        z = (a - mu) / sig
        return self.kde(z) / sig


def fit_locscale(
    dataset: Dataset,
    mean_learner: str = "hal",
    variance_mode: str = "homoscedastic",
    kernel_bandwidth: str = "scott",
    config: HalConfig = HalConfig(),
    seed: int = 0,
) -> LocScaleDensity:
    """Location-scale conditional density of the treatment given W.

    Fits mu(W) = E[A|W]; the scale is either the constant mean squared
    residual ("homoscedastic") or a second regression of squared
    residuals on W ("conditional"); a 1-d kernel density of the
    standardized residuals supplies the shape.
    """
    if variance_mode not in ("homoscedastic", "conditional"):
        raise InvalidConfigError(f"unknown variance mode {variance_mode!r}")
    W = dataset.covariates
    a = dataset.treatment
    mean_model = _MeanRegression(mean_learner, config, seed).fit(W, a)
    resid = a - mean_model.predict(W)
    if variance_mode == "homoscedastic":
        var_model = None
        sigma_const = float(np.sqrt(max(np.mean(resid**2), VARIANCE_FLOOR)))
        sig = np.full(dataset.n, sigma_const)
    else:
        var_model = _MeanRegression(mean_learner, config, seed + 1).fit(W, resid**2)
        sigma_const = None
        var = var_model.predict(W)
        if np.any(var < VARIANCE_FLOOR):
            warnings.warn(
                "conditional variance estimate floored at 1e-6", RuntimeWarning
            )
            var = np.maximum(var, VARIANCE_FLOOR)
        sig = np.sqrt(var)
    z = resid / sig
    kde = gaussian_kde(z, bw_method=kernel_bandwidth)
    return LocScaleDensity(
        mean_model=mean_model, var_model=var_model,
        sigma_const=sigma_const, kde=kde,
    )
