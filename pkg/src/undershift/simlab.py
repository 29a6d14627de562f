"""Synthetic data-generating processes, truth oracles, and benchmarks.

Two count-valued treatment mechanisms (Poisson, and Negative Binomial
with covariate-driven dispersion) share a three-covariate design and a
binary outcome. The module supplies closed-form nuisance truths, a
large-sample reference value of the shifted-mean target, the
influence-function variance bound, a Monte Carlo approximation of the
second-order remainder, and a replication harness that aggregates the
benchmark metrics.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit
from scipy.stats import nbinom, poisson, trim_mean

from .datacore import Dataset
from .density import CondDensityFamily, FamilyEvaluator, build_family
from .errors import InvalidConfigError
from .estimators import (
    OutcomeFit,
    dcar_tilde_values,
    eif_values,
    fit_outcome_regression,
    se_eif,
    tmle,
)
from .lasso import HalConfig
from .policy import ShiftPolicy, apply_policy, post_density
from .selectors import SELECTORS, build_trace

__all__ = [
    "DgpSpec",
    "TrueDensity",
    "TrueOutcome",
    "SimConfig",
    "SimResult",
    "draw",
    "true_psi",
    "efficiency_bound",
    "r2_tilde",
    "run_experiment",
    "aggregate_metrics",
    "RECORD_FIELDS",
    "METRIC_FIELDS",
]

_TRUTH_SEED = 760
_Z95 = 1.959963984540054


@dataclass(frozen=True)
class DgpSpec:
    """One of the two synthetic generating processes.

    Covariates: W1 ~ Bern(0.6), W2 ~ Unif(0.5, 1.5), W3 ~ Pois(2).
    poisson:  A|W ~ Pois((1-W1) + 0.25 W2^3 + 2 W1 W2 + 4),
              Y|A,W ~ Bern(expit(A + 2(1-W1) + 0.5 W2 + 0.5 W3 + 2 W1 W2 - 7)).
    negbinom: A|W ~ NB(mu as above, dispersion nu = 5 W2 + 7) with
              variance mu + mu^2/nu,
              Y|A,W ~ Bern(expit(A + 2(1-W1) + W2 - W3 + 1.5 W1 W2 - 5)).
    """

    kind: str
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("poisson", "negbinom"):
            raise InvalidConfigError(f"unknown DGP kind {self.kind!r}")

    def treatment_mean(self, W: np.ndarray) -> np.ndarray:
        w1, w2 = W[:, 0], W[:, 1]
        return (1.0 - w1) + 0.25 * w2**3 + 2.0 * w1 * w2 + 4.0

    def dispersion(self, W: np.ndarray) -> np.ndarray:
        return 5.0 * W[:, 1] + 7.0

    def outcome_logit(self, a: np.ndarray, W: np.ndarray) -> np.ndarray:
        w1, w2, w3 = W[:, 0], W[:, 1], W[:, 2]
        if self.kind == "poisson":
            return a + 2.0 * (1.0 - w1) + 0.5 * w2 + 0.5 * w3 + 2.0 * w1 * w2 - 7.0
        return a + 2.0 * (1.0 - w1) + w2 - w3 + 1.5 * w1 * w2 - 5.0

    def qbar0(self, a: np.ndarray, W: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return expit(self.outcome_logit(a, W))

    def g0_pmf(self, a: np.ndarray, W: np.ndarray) -> np.ndarray:
        """True conditional treatment pmf at integer values (0 elsewhere)."""
        a = np.asarray(a, dtype=float)
        mu = self.treatment_mean(W)
        integral = np.isclose(a, np.round(a)) & (a >= 0.0)
        a_int = np.where(integral, np.round(a), 0.0)
        if self.kind == "poisson":
            vals = poisson.pmf(a_int, mu)
        else:
            nu = self.dispersion(W)
            vals = nbinom.pmf(a_int, nu, nu / (nu + mu))
        return np.where(integral, vals, 0.0)


class TrueDensity:
    """Density-protocol adapter exposing the true treatment pmf."""

    def __init__(self, spec: DgpSpec):
        self.spec = spec

    def density(self, a, covariates) -> np.ndarray:
        W = np.atleast_2d(np.asarray(covariates, dtype=float))
        a = np.asarray(a, dtype=float).ravel()
        if W.shape[0] == 1 and a.size > 1:
            W = np.repeat(W, a.size, axis=0)
        return self.spec.g0_pmf(a, W)


class TrueOutcome:
    """OutcomeFit-shaped adapter exposing the true outcome mean."""

    outcome_scale_bounds = (0.0, 1.0)
    method = "truth"

    def __init__(self, spec: DgpSpec):
        self.spec = spec

    def predict(self, a, covariates, original_scale: bool = False) -> np.ndarray:
        W = np.atleast_2d(np.asarray(covariates, dtype=float))
        a = np.asarray(a, dtype=float).ravel()
        if W.shape[0] == 1 and a.size > 1:
            W = np.repeat(W, a.size, axis=0)
        return self.spec.qbar0(a, W)


def draw(spec: DgpSpec, n: int, seed: int) -> Dataset:
    """n independent units, deterministic in the seed."""
    if n < 1:
        raise InvalidConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    w1 = rng.binomial(1, 0.6, n).astype(float)
    w2 = rng.uniform(0.5, 1.5, n)
    w3 = rng.poisson(2.0, n).astype(float)
    W = np.column_stack([w1, w2, w3])
    mu = spec.treatment_mean(W)
    if spec.kind == "poisson":
        a = rng.poisson(mu).astype(float)
    else:
        nu = spec.dispersion(W)
        lam = rng.gamma(shape=nu, scale=mu / nu)
        a = rng.poisson(lam).astype(float)
    y = (rng.random(n) < spec.qbar0(a, W)).astype(float)
    return Dataset(
        covariates=W, treatment=a, outcome=y,
        covariate_names=("W1", "W2", "W3"),
        treatment_name="A", outcome_name="Y",
    )


_truth_cache: Dict[Tuple[str, float, int], float] = {}
_bound_cache: Dict[Tuple[str, float, int], float] = {}


def true_psi(spec: DgpSpec, delta: Optional[float] = None, N: int = 1_000_000) -> float:
    """Reference value of the shifted mean: plug the true outcome mean
    into the direct estimator on one large sample (fixed internal seed)."""
    d = spec.delta if delta is None else delta
    key = (spec.kind, float(d), int(N))
    if key not in _truth_cache:
        ds = draw(spec, N, _TRUTH_SEED)
        _truth_cache[key] = float(
            np.mean(spec.qbar0(ds.treatment + d, ds.covariates))
        )
    return _truth_cache[key]


def efficiency_bound(
    spec: DgpSpec, delta: Optional[float] = None, N: int = 1_000_000
) -> float:
    """Variance of the influence function at the truth (Monte Carlo)."""
    d = spec.delta if delta is None else delta
    key = (spec.kind, float(d), int(N))
    if key not in _bound_cache:
        _bound_cache[key] = float(np.var(_true_eif_draws(spec, d, N), ddof=1))
    return _bound_cache[key]


def _true_eif_draws(spec: DgpSpec, d: float, N: int) -> np.ndarray:
    psi0 = true_psi(spec, d, N)
    ds = draw(spec, N, _TRUTH_SEED + 1)
    a, W, y = ds.treatment, ds.covariates, ds.outcome
    h0 = spec.g0_pmf(a - d, W) / spec.g0_pmf(a, W)
    return h0 * (y - spec.qbar0(a, W)) + spec.qbar0(a + d, W) - psi0


def r2_tilde(
    dataset: Dataset,
    density,
    outcome_fit,
    spec: DgpSpec,
    policy: ShiftPolicy,
    grid_pad: int = 10,
) -> float:
    """Monte Carlo approximation of the second-order remainder.

    Evaluates the projection term at the fitted density with the outcome
    model's error (fitted minus true conditional mean), summing the
    integral part over the integer treatment support:

        mean_i[ dQ(A_i, W_i) * H_i - sum_a dQ(a, W_i) * g_shift(a | W_i) ].

    Zero whenever the outcome model is exact.
    """
    a = dataset.treatment
    W = dataset.covariates
    y_scale = getattr(outcome_fit, "outcome_scale_bounds", (0.0, 1.0))
    upper = policy.resolve_upper(a)

    def dq(vals: np.ndarray) -> np.ndarray:
        fitted = outcome_fit.predict(vals, W, original_scale=True)
        return fitted - spec.qbar0(vals, W)

    g = np.asarray(density.density(a, W), dtype=float)
    g_shift = post_density(lambda vals: density.density(vals, W), a, policy, upper)
    h = g_shift / np.maximum(g, 1e-10)
    term1 = dq(a) * h

    a_max = int(np.max(a)) + grid_pad
    term2 = np.zeros(dataset.n)
    for a_val in range(a_max + 1):
        vals = np.full(dataset.n, float(a_val))
        gs = post_density(lambda v: density.density(v, W), vals, policy, upper)
        term2 += dq(vals) * gs
    return float(np.mean(term1 - term2))


# ---------------------------------------------------------------------------
# replication harness
# ---------------------------------------------------------------------------

RECORD_FIELDS = [
    "dgp", "n", "rep_id", "estimator", "selector", "psi_hat", "se_hat",
    "se_eif", "pn_eif", "pn_eif_solved", "pn_dcar", "r2_tilde",
    "lambda_index", "l1_norm", "fallback", "failed",
]

METRIC_FIELDS = [
    "dgp", "n", "estimator", "selector", "reps", "scaled_bias",
    "rel_scaled_mse", "abs_pn_eif", "oracle_cov", "wald_cov", "r2_trimmed",
]

IPW_SELECTORS = ("global-cv", "dcar-min", "dcar-tol", "lepski", "plateau", "hybrid")
DR_VARIANTS = (
    ("global-cv", "hal"), ("global-cv", "glm"),
    ("dcar-min", "hal"), ("dcar-min", "glm"),
)


@dataclass(frozen=True)
class SimConfig:
    """Full description of one experiment grid."""

    dgps: Tuple[str, ...] = ("poisson",)
    n_list: Tuple[int, ...] = (100, 200, 500)
    reps: int = 100
    delta: float = 1.0
    seed: int = 1
    n_lambda: int = 200
    undersmooth_count: Optional[int] = None
    T: Optional[int] = None
    cv_folds: int = 5
    selectors: Tuple[str, ...] = IPW_SELECTORS
    dr_variants: Tuple[Tuple[str, str], ...] = DR_VARIANTS
    density_config: HalConfig = field(
        default_factory=lambda: HalConfig(knots_per_covariate=(100, 50))
    )
    outcome_config: HalConfig = field(
        default_factory=lambda: HalConfig(knots_per_covariate=(100, 50), n_lambda=60)
    )
    truth_N: int = 1_000_000
    threads: int = 1
    max_failure_fraction: float = 0.1

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SimResult:
    """Per-replicate records plus the aggregated metric table."""

    records: List[dict]
    metrics: List[dict]
    config: SimConfig
    psi0: Dict[str, float]
    bound: Dict[str, float]


def _class_shared_eif(y, qbar, qbar_shift, raw_h, psi_model) -> float:
    """P_n of the influence function at the estimator's own point value,
    with the initial (untilted) outcome model: the shared across-estimator
    metric of how well the influence equation is solved."""
    return float(np.mean(eif_values(y, qbar, qbar_shift, raw_h, psi_model)))


def _adapter(evaluator: FamilyEvaluator, k: int):
    class _Bound:
        def density(self, a, covariates=None):
            return evaluator.density(k, np.asarray(a, dtype=float).ravel())

    return _Bound()


def run_replicate(spec: DgpSpec, n: int, rep_id: int, cfg: SimConfig) -> List[dict]:
    """All estimator/selector records for one synthetic dataset."""
    seed_r = cfg.seed + rep_id
    ds = draw(spec, n, seed_r)
    policy = ShiftPolicy("additive", cfg.delta, "empirical_max")
    family = build_family(
        ds, T=cfg.T, scheme="equal_range", folds=cfg.cv_folds,
        n_lambda_total=cfg.n_lambda, undersmooth_count=cfg.undersmooth_count,
        config=cfg.density_config, seed=seed_r,
    )
    q_hal = fit_outcome_regression(ds, "hal", cfg.outcome_config, seed=seed_r)
    need_glm = any(q == "glm" for _, q in cfg.dr_variants)
    q_glm = (
        fit_outcome_regression(ds, "glm_main_effects") if need_glm else None
    )
    evaluator = family.evaluator(ds.covariates)
    trace = build_trace(ds, family, policy, q_hal, evaluator=evaluator)

    y = ds.outcome
    a = ds.treatment
    W = ds.covariates
    upper = policy.resolve_upper(a)
    a_shift = apply_policy(a, W, policy, upper)
    qbar_hal = q_hal.predict(a, W)
    qbar_hal_shift = q_hal.predict(a_shift, W)

    def raw_weights_at(k: int) -> np.ndarray:
        if policy.is_identity():
            return np.ones(n)
        g = evaluator.density(k, a)
        g_shift = post_density(
            lambda vals: evaluator.density(k, vals), a, policy, upper
        )
        return g_shift / np.maximum(g, 1e-10)

    rows: List[dict] = []
    base = {"dgp": spec.kind, "n": n, "rep_id": rep_id, "failed": 0}

    choices = {}
    for kind in cfg.selectors:
        choice = SELECTORS[kind](trace)
        choices[kind] = choice
        k = choice.chosen_index
        raw_h = raw_weights_at(k)
        vals = eif_values(y, qbar_hal, qbar_hal_shift, raw_h, choice.psi)
        u_vals = (raw_h / raw_h.mean()) * (y - choice.psi)
        rows.append({
            **base,
            "estimator": "ipw",
            "selector": kind,
            "psi_hat": choice.psi,
            "se_hat": choice.se,
            "se_eif": se_eif(vals),
            "pn_eif": float(np.mean(vals)),
            "pn_eif_solved": float(np.mean(u_vals)),
            "pn_dcar": float(trace.abs_pn_dcar[k]),
            "r2_tilde": r2_tilde(ds, _adapter(evaluator, k), q_hal, spec, policy),
            "lambda_index": int(k),
            "l1_norm": float(trace.l1_norm[k]),
            "fallback": int(choice.fallback),
        })

    for g_sel, q_kind in cfg.dr_variants:
        choice = choices.get(g_sel) or SELECTORS[g_sel](trace)
        k = choice.chosen_index
        q_fit = q_hal if q_kind == "hal" else q_glm
        report = tmle(ds, _adapter(evaluator, k), q_fit, policy)
        raw_h = raw_weights_at(k)
        qbar = q_fit.predict(a, W)
        qbar_shift = q_fit.predict(a_shift, W)
        rows.append({
            **base,
            "estimator": f"tmle_{q_kind}",
            "selector": g_sel,
            "psi_hat": report.psi,
            "se_hat": report.se,
            "se_eif": report.se,
            "pn_eif": _class_shared_eif(y, qbar, qbar_shift, raw_h, report.psi),
            "pn_eif_solved": report.pn_eif,
            "pn_dcar": report.pn_dcar,
            "r2_tilde": r2_tilde(ds, _adapter(evaluator, k), q_fit, spec, policy),
            "lambda_index": int(k),
            "l1_norm": float(trace.l1_norm[k]),
            "fallback": 0,
        })
    return rows


def _replicate_or_failure(spec_kind, delta, n, rep_id, cfg) -> List[dict]:
    spec = DgpSpec(spec_kind, delta)
    try:
        return run_replicate(spec, n, rep_id, cfg)
    except Exception as exc:  # recorded, not fatal (unless too frequent)
        return [{
            "dgp": spec_kind, "n": n, "rep_id": rep_id,
            "estimator": "none", "selector": "none",
            "psi_hat": float("nan"), "se_hat": float("nan"),
            "se_eif": float("nan"), "pn_eif": float("nan"),
            "pn_eif_solved": float("nan"), "pn_dcar": float("nan"),
            "r2_tilde": float("nan"), "lambda_index": -1,
            "l1_norm": float("nan"), "fallback": 0, "failed": 1,
            "error": f"{type(exc).__name__}: {exc}",
        }]


def aggregate_metrics(
    records: Sequence[dict], psi0: float, bound: float
) -> List[dict]:
    """Per (dgp, n, estimator, selector) summary of the benchmark metrics.

    scaled_bias averages sqrt(n)(psi0 - psi_hat); rel_scaled_mse averages
    n((psi0 - psi_hat)^2 + se_hat^2) over the bound; coverage uses the
    cross-replicate SD (oracle) or each replicate's influence-function SE
    (Wald); r2_trimmed drops the lowest and highest 5%.
    """
    groups: Dict[Tuple, List[dict]] = {}
    for rec in records:
        if rec.get("failed"):
            continue
        key = (rec["dgp"], rec["n"], rec["estimator"], rec["selector"])
        groups.setdefault(key, []).append(rec)
    out = []
    for key in sorted(groups):
        dgp, n, estimator, selector = key
        rows = sorted(groups[key], key=lambda r: r["rep_id"])
        psi_hat = np.array([r["psi_hat"] for r in rows])
        se_hat = np.array([r["se_hat"] for r in rows])
        se_w = np.array([r["se_eif"] for r in rows])
        pn = np.array([r["pn_eif"] for r in rows])
        r2 = np.array([r["r2_tilde"] for r in rows])
        err = psi0 - psi_hat
        sd_mc = float(np.std(psi_hat, ddof=1)) if psi_hat.size > 1 else 0.0
        out.append({
            "dgp": dgp, "n": n, "estimator": estimator, "selector": selector,
            "reps": int(psi_hat.size),
            "scaled_bias": float(np.mean(np.sqrt(n) * err)),
            "rel_scaled_mse": float(np.mean(n * (err**2 + se_hat**2)) / bound),
            "abs_pn_eif": float(np.mean(np.abs(pn))),
            "oracle_cov": float(np.mean(np.abs(err) <= _Z95 * sd_mc)),
            "wald_cov": float(np.mean(np.abs(err) <= _Z95 * se_w)),
            "r2_trimmed": float(trim_mean(r2, 0.05)) if r2.size else float("nan"),
        })
    return out


def run_experiment(cfg: SimConfig) -> SimResult:
    """Run the replication grid and aggregate the metric table.

    Replicates are independent tasks seeded as (seed + rep_id); records
    are folded in sorted order, so results do not depend on thread count.
    Individual replicate failures are recorded; more than
    ``max_failure_fraction`` of them aborts the run.
    """
    tasks = [
        (dgp, n, rep)
        for dgp in cfg.dgps
        for n in cfg.n_list
        for rep in range(cfg.reps)
    ]
    runner = Parallel(n_jobs=cfg.threads, backend="loky") if cfg.threads > 1 else None
    if runner is not None:
        chunks = runner(
            delayed(_replicate_or_failure)(dgp, cfg.delta, n, rep, cfg)
            for dgp, n, rep in tasks
        )
    else:
        chunks = [
            _replicate_or_failure(dgp, cfg.delta, n, rep, cfg)
            for dgp, n, rep in tasks
        ]
    records = [row for chunk in chunks for row in chunk]
    records.sort(key=lambda r: (r["dgp"], r["n"], r["rep_id"], r["estimator"], r["selector"]))

    n_failed = sum(1 for r in records if r.get("failed"))
    n_cells = len(tasks)
    if n_cells and n_failed / n_cells > cfg.max_failure_fraction:
        examples = [r.get("error", "?") for r in records if r.get("failed")][:5]
        raise RuntimeError(
            f"{n_failed}/{n_cells} replicates failed; first errors: {examples}"
        )

    psi0 = {dgp: true_psi(DgpSpec(dgp, cfg.delta), N=cfg.truth_N) for dgp in cfg.dgps}
    bound = {
        dgp: efficiency_bound(DgpSpec(dgp, cfg.delta), N=cfg.truth_N)
        for dgp in cfg.dgps
    }
    metrics = []
    for dgp in cfg.dgps:
        sub = [r for r in records if r["dgp"] == dgp]
        metrics.extend(aggregate_metrics(sub, psi0[dgp], bound[dgp]))
    return SimResult(
        records=records, metrics=metrics, config=cfg, psi0=psi0, bound=bound
    )
