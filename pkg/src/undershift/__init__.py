"""Nonparametric weighted estimation of shifted-treatment means.

The package fits the conditional treatment density with an indicator-
basis lasso over pooled bin-membership hazards, relaxes the penalty
past the cross-validation choice, and selects along that path so the
resulting weighted estimator solves the efficient-influence equation.
It also ships the doubly robust comparators (one-step and targeted
plug-in) and a simulation laboratory with two count-treatment
benchmarks.
"""

__version__ = "0.1.0"

from .datacore import Dataset, FoldAssignment, load_csv, split_folds, write_csv
from .basis import BasisFunction, BasisSet, enumerate_bases, evaluate_design
from .lasso import (
    HalConfig,
    LassoPath,
    cv_risk,
    fit_lasso_path,
    kkt_residuals,
    l1_norm,
    predict,
)
from .density import (
    BinningScheme,
    CondDensityFamily,
    HazardExpansion,
    LocScaleDensity,
    build_family,
    cv_density_risk,
    density_at,
    expand_repeated_measures,
    fit_locscale,
    fit_pooled_hazard,
    make_bins,
)
from .policy import ShiftPolicy, ShiftWeights, apply_policy, post_density, shift_weights
from .estimators import (
    EstimateReport,
    OutcomeFit,
    dcar_tilde,
    eif,
    fit_outcome_regression,
    ipw,
    onestep,
    se_eif,
    se_ipw,
    substitution,
    tmle,
)
from .selectors import (
    SELECTORS,
    SelectorChoice,
    SelectorTrace,
    build_trace,
    run_selector,
)
from .simlab import (
    DgpSpec,
    SimConfig,
    TrueDensity,
    TrueOutcome,
    draw,
    efficiency_bound,
    r2_tilde,
    run_experiment,
    true_psi,
)
