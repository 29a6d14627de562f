"""Command-line entry point.

Subcommands:
    density-fit  fit the conditional-density family, write it as JSON
    estimate     run the requested estimators/selectors on a CSV
    simulate     replicate the synthetic benchmarks, write two CSVs
    path         export the per-penalty selector trace as CSV

Flags override values from an optional JSON/TOML config file. Every
artifact embeds a schema version, the hash of the resolved config, and
the seed, so outputs are reproducible byte-for-byte from their own
echo. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .datacore import Dataset, load_csv
from .density import build_family
from .errors import UndershiftError
from .estimators import (
    EstimateReport,
    fit_outcome_regression,
    ipw,
    onestep,
    se_ipw,
    substitution,
    tmle,
)
from .lasso import HalConfig
from .policy import ShiftPolicy, shift_weights
from .selectors import SELECTORS, build_trace
from .simlab import (
    METRIC_FIELDS,
    RECORD_FIELDS,
    SimConfig,
    run_experiment,
)

SCHEMA_VERSION = 1


class UsageError(Exception):
    """Bad flag combination or missing required option (exit code 2)."""


def _load_config_file(path: str) -> dict:
    if path.endswith(".toml"):
        try:
            import tomllib as toml  # py311+
        except ModuleNotFoundError:
            import tomli as toml
        with open(path, "rb") as fh:
            return toml.load(fh)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _require(cfg: dict, key: str, flag: str) -> None:
    if cfg.get(key) is None:
        raise UsageError(f"missing required option {flag}")


def _hal_config(cfg: dict, prefix: str) -> HalConfig:
    knots = cfg.get(f"{prefix}_knots")
    return HalConfig(
        max_degree=int(cfg.get(f"{prefix}_degree", 2)),
        knots_per_covariate=knots if knots is not None else (100, 50),
        n_lambda=int(cfg.get(f"{prefix}_n_lambda", 100)),
        cv_folds=int(cfg.get("folds", 5)),
    )


def _read_dataset(cfg: dict, need_outcome: bool) -> Dataset:
    _require(cfg, "data", "--data")
    cov = cfg.get("covariate_cols")
    cov_list = [c.strip() for c in cov.split(",")] if cov else None
    outcome_col = cfg.get("outcome_col")
    if need_outcome and not outcome_col:
        raise UsageError("this command needs --outcome-col")
    return load_csv(
        cfg["data"],
        treatment_col=cfg.get("treatment_col", "A"),
        outcome_col=outcome_col,
        covariate_cols=cov_list,
    )


def _policy(cfg: dict) -> ShiftPolicy:
    _require(cfg, "shift", "--shift")
    upper = cfg.get("upper_bound")
    return ShiftPolicy(
        kind=cfg.get("shift_type", "additive"),
        delta=float(cfg["shift"]),
        upper_bound="empirical_max" if upper is None else float(upper),
    )


def _artifact_header(cfg: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "config_hash": _config_hash(cfg),
        "seed": cfg.get("seed", 0),
        "config": cfg,
    }


def _fit_family(ds: Dataset, cfg: dict):
    return build_family(
        ds,
        T=cfg.get("bins"),
        scheme=cfg.get("scheme", "equal_range"),
        folds=int(cfg.get("folds", 5)),
        n_lambda_total=int(cfg.get("n_lambda", 200)),
        undersmooth_count=cfg.get("undersmooth_count"),
        config=_hal_config(cfg, "density"),
        seed=int(cfg.get("seed", 0)),
    )


def _cmd_density_fit(cfg: dict) -> int:
    _require(cfg, "output", "--output")
    ds = _read_dataset(cfg, need_outcome=False)
    family = _fit_family(ds, cfg)
    doc = _artifact_header(cfg)
    doc["family"] = family.to_json_dict()
    with open(cfg["output"], "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    print(f"wrote density family ({len(family)} members) to {cfg['output']}")
    return 0


def _cmd_estimate(cfg: dict) -> int:
    ds = _read_dataset(cfg, need_outcome=True)
    policy = _policy(cfg)
    family = _fit_family(ds, cfg)
    outcome = fit_outcome_regression(
        ds, cfg.get("outcome_method", "hal"),
        _hal_config(cfg, "outcome"), seed=int(cfg.get("seed", 0)),
    )
    trace = build_trace(ds, family, policy, outcome)
    mean_y = float(np.mean(ds.outcome))

    selectors = [s.strip() for s in str(cfg.get("selector", "global-cv")).split(",")]
    estimators = [e.strip() for e in str(cfg.get("estimators", "ipw_stab")).split(",")]
    for sel in selectors:
        if sel not in SELECTORS:
            raise UsageError(f"unknown selector {sel!r}")
    known_estimators = ("sub", "ipw", "ipw_stab", "onestep", "tmle")
    for est in estimators:
        if est not in known_estimators:
            raise UsageError(f"unknown estimator {est!r}")

    reports: List[dict] = []
    for sel in selectors:
        choice = SELECTORS[sel](trace)
        k = choice.chosen_index
        density = family.at(k)
        wts = shift_weights(density, policy, ds)
        for est in estimators:
            if est == "ipw_stab":
                rep = EstimateReport(
                    estimator_kind="ipw_stab", psi=choice.psi, se=choice.se,
                    lambda_index=k, l1_norm=float(trace.l1_norm[k]),
                    pn_dcar=float(trace.abs_pn_dcar[k]),
                )
            elif est == "ipw":
                psi = ipw(wts, ds.outcome, stabilized=False)
                rep = EstimateReport(
                    estimator_kind="ipw", psi=psi,
                    se=se_ipw(wts, ds.outcome, psi), lambda_index=k,
                    l1_norm=float(trace.l1_norm[k]),
                )
            elif est == "sub":
                rep = EstimateReport(
                    estimator_kind="sub",
                    psi=substitution(outcome, policy, ds), se=float("nan"),
                    lambda_index=k,
                )
            elif est == "onestep":
                rep = onestep(ds, density, outcome, policy)
                rep.lambda_index = k
                rep.l1_norm = float(trace.l1_norm[k])
            else:
                rep = tmle(ds, density, outcome, policy)
                rep.lambda_index = k
                rep.l1_norm = float(trace.l1_norm[k])
            doc = rep.to_json_dict()
            doc["selector"] = sel
            doc["fallback"] = choice.fallback
            doc["theta"] = doc["psi"] - mean_y
            reports.append(doc)

    out = _artifact_header(cfg)
    out["mean_outcome"] = mean_y
    out["reports"] = reports
    text = json.dumps(out, indent=1)
    if cfg.get("output"):
        with open(cfg["output"], "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text)
    return 0


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv_with_header(path: str, fields: List[str], rows: List[dict], meta: dict):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key in ("schema_version", "config_hash", "seed"):
            fh.write(f"# {key}={meta[key]}\n")
        fh.write(",".join(fields) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(row.get(f)) for f in fields) + "\n")


def _cmd_simulate(cfg: dict) -> int:
    _require(cfg, "dgp", "--dgp")
    dgps = tuple(
        ("poisson", "negbinom") if cfg.get("dgp") == "both" else (cfg["dgp"],)
    )
    full = bool(cfg.get("full"))
    sim_cfg = SimConfig(
        dgps=dgps,
        n_list=tuple(int(v) for v in str(cfg.get("n", "100,200,500")).split(",")),
        reps=int(cfg.get("reps") or (300 if full else 100)),
        delta=float(cfg.get("shift", 1.0)),
        seed=int(cfg.get("seed", 1)),
        n_lambda=int(cfg.get("n_lambda") or (3000 if full else 200)),
        undersmooth_count=cfg.get("undersmooth_count"),
        T=cfg.get("bins"),
        cv_folds=int(cfg.get("folds", 5)),
        threads=int(cfg.get("threads") or os.cpu_count() or 1),
    )
    result = run_experiment(sim_cfg)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": sim_cfg.config_hash(),
        "seed": sim_cfg.seed,
    }
    records_out = cfg.get("records_out", "records.csv")
    metrics_out = cfg.get("metrics_out", "metrics.csv")
    _write_csv_with_header(records_out, RECORD_FIELDS, result.records, meta)
    _write_csv_with_header(metrics_out, METRIC_FIELDS, result.metrics, meta)
    print(
        f"wrote {len(result.records)} records to {records_out} and "
        f"{len(result.metrics)} metric rows to {metrics_out}"
    )
    return 0


def _cmd_path(cfg: dict) -> int:
    _require(cfg, "output", "--output")
    ds = _read_dataset(cfg, need_outcome=True)
    policy = _policy(cfg)
    family = _fit_family(ds, cfg)
    outcome = fit_outcome_regression(
        ds, cfg.get("outcome_method", "hal"),
        _hal_config(cfg, "outcome"), seed=int(cfg.get("seed", 0)),
    )
    trace = build_trace(ds, family, policy, outcome)
    chosen = {}
    for kind, fn in SELECTORS.items():
        chosen.setdefault(fn(trace).chosen_index, []).append(kind)
    rows = []
    for k in range(len(trace)):
        rows.append({
            "neg_log_lambda": float(-np.log(trace.lambdas[k])),
            "l1_norm": float(trace.l1_norm[k]),
            "psi": float(trace.psi[k]),
            "se": float(trace.se[k]),
            "abs_pn_dcar": float(trace.abs_pn_dcar[k]),
            "selected_by": ";".join(chosen.get(k, [])),
        })
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": _config_hash(cfg),
        "seed": cfg.get("seed", 0),
    }
    fields = ["neg_log_lambda", "l1_norm", "psi", "se", "abs_pn_dcar", "selected_by"]
    _write_csv_with_header(cfg["output"], fields, rows, meta)
    print(f"wrote {len(rows)} trace rows to {cfg['output']}")
    return 0


def _add_data_flags(p: argparse.ArgumentParser, outcome_default):
    p.add_argument("--data", default=None, help="input CSV with a header row")
    p.add_argument("--treatment-col", default="A")
    p.add_argument("--outcome-col", default=outcome_default)
    p.add_argument("--covariate-cols", default=None,
                   help="comma-separated names; default: all other columns")


def _add_density_flags(p: argparse.ArgumentParser):
    p.add_argument("--bins", type=int, default=None,
                   help="number of treatment bins (default: max(5, n^(1/3)))")
    p.add_argument("--scheme", choices=("equal_range", "equal_mass"),
                   default="equal_range")
    p.add_argument("--n-lambda", type=int, default=200)
    p.add_argument("--undersmooth-count", type=int, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--density-degree", type=int, default=2)
    p.add_argument("--density-knots", type=int, default=None)
    p.add_argument("--density-n-lambda", type=int, default=100)


def _add_shift_flags(p: argparse.ArgumentParser):
    p.add_argument("--shift", type=float, default=None, help="shift amount delta")
    p.add_argument("--shift-type", choices=("additive", "multiplicative"),
                   default="additive")
    p.add_argument("--upper-bound", type=float, default=None,
                   help="fixed support bound (default: empirical max of A)")


def _add_outcome_flags(p: argparse.ArgumentParser):
    p.add_argument("--outcome-method", choices=("hal", "glm_main_effects"),
                   default="hal")
    p.add_argument("--outcome-degree", type=int, default=2)
    p.add_argument("--outcome-knots", type=int, default=None)
    p.add_argument("--outcome-n-lambda", type=int, default=60)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="undershift",
        description="Weighted estimation of shifted-treatment means with "
                    "undersmoothed conditional density fits",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("density-fit", help="fit and serialize a density family")
    _add_data_flags(p, outcome_default=None)
    _add_density_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=_cmd_density_fit)

    p = sub.add_parser("estimate", help="estimate the shifted-treatment mean")
    _add_data_flags(p, outcome_default="Y")
    _add_density_flags(p)
    _add_shift_flags(p)
    _add_outcome_flags(p)
    p.add_argument("--selector", default="global-cv",
                   help="comma-separated subset of: " + ",".join(SELECTORS))
    p.add_argument("--estimators", default="ipw_stab",
                   help="comma-separated subset of: sub,ipw,ipw_stab,onestep,tmle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("simulate", help="run the replication benchmarks")
    p.add_argument("--dgp", choices=("poisson", "negbinom", "both"), default=None)
    p.add_argument("--n", default="100,200,500")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-lambda", type=int, default=None)
    p.add_argument("--undersmooth-count", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--full", action="store_true",
                   help="full profile: 300 reps and a 3000-point grid")
    p.add_argument("--config", default=None)
    p.add_argument("--records-out", default="records.csv")
    p.add_argument("--metrics-out", default="metrics.csv")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("path", help="export the selector trace as CSV")
    _add_data_flags(p, outcome_default="Y")
    _add_density_flags(p)
    _add_shift_flags(p)
    _add_outcome_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=_cmd_path)
    return parser


def _all_dests(parser: argparse.ArgumentParser) -> set:
    dests = set()
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                dests |= {a.dest for a in sp._actions}
        else:
            dests.add(action.dest)
    return dests


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()

    cfg_path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            cfg_path = argv[i + 1]
        elif tok.startswith("--config="):
            cfg_path = tok.split("=", 1)[1]

    try:
        if cfg_path:
            file_values = _load_config_file(cfg_path)
            known = _all_dests(parser)
            mapped = {}
            for key, value in file_values.items():
                dest = key.replace("-", "_")
                if dest not in known:
                    raise UsageError(f"unknown config key {key!r}")
                mapped[dest] = value
            # flags given on the command line still win: argparse only
            # falls back to these defaults for unset options
            parser.set_defaults(**mapped)
        args = parser.parse_args(argv)
        cfg = vars(args).copy()
        cfg.pop("func", None)
        cfg.pop("command", None)
        cfg.pop("config", None)
        cfg = {k: v for k, v in cfg.items() if v is not None}
        return args.func(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except UndershiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
