"""Command-line interface.

One JSON config document with named sections (model, population, schedule,
subject, strategy, assignment, risk, search, posterior, sweep, run) drives
every command; individual flags override config fields.  Every output file
embeds the package version, the config hash and the master seed.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, presets
from .adaptive import (PosteriorState, RecordedEnvironment,
                       SimulatedEnvironment, dtdr_run, trace_to_frame)
from .errors import ConfigError, DegenerateModelError, DynControlError, \
    InvalidPosteriorError, ResolutionError
from .mle import PARAM_NAMES, bootstrap_se, fit_ml, params_to_vector
from .model import ModelParams, SubjectCovariates, VisitSchedule
from .optimize import SearchConfig, sweep_omega
from .oracle import closed_form_fixed_regime, oracle_risk
from .risk import RiskSpec, estimate_risk_skp, estimate_risk_spdp
from .simulate import PopulationSpec, read_cohort_csv, simulate_cohort, write_cohort_csv
from .strategies import (AlwaysTreat, NeverTreat, ObservationalAssignmentModel,
                         PersonalizedThreshold, strategy_from_json)


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _section(cfg: dict, name: str, required=False) -> dict:
    sec = cfg.get(name, {})
    if required and not sec:
        raise ConfigError(f"config section '{name}' is required")
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return sec


def _build(cls, sec: dict, what: str):
    try:
        return cls(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}")


def _parse_model(cfg) -> ModelParams:
    sec = _section(cfg, "model")
    if not sec:
        return presets.reference_params()
    return _build(ModelParams, sec, "model parameters")


def _parse_schedule(cfg) -> VisitSchedule:
    sec = _section(cfg, "schedule")
    try:
        if "times" in sec:
            return VisitSchedule(np.asarray(sec["times"], dtype=float))
        return VisitSchedule.regular(int(sec.get("n_intervals", 10)),
                                     float(sec.get("dt", 1.0)),
                                     float(sec.get("t0", 0.0)))
    except (DynControlError, ValueError) as exc:
        raise ConfigError(f"invalid schedule: {exc}")


def _parse_subject(cfg) -> SubjectCovariates:
    sec = _section(cfg, "subject")
    return _build(SubjectCovariates, sec or {"c": 0.0, "d": 0}, "subject")


def _parse_risk(cfg) -> RiskSpec:
    sec = _section(cfg, "risk")
    if not sec:
        return RiskSpec(kind="additive-exceedance", eta=presets.ETA, omega=0.5)
    return _build(RiskSpec, sec, "risk specification")


def _parse_search(cfg, seed) -> SearchConfig:
    sec = dict(_section(cfg, "search"))
    sec.setdefault("seed", seed)
    return _build(SearchConfig, sec, "search configuration")


def _parse_posterior(cfg):
    sec = _section(cfg, "posterior")
    if not sec:
        return None
    try:
        return PosteriorState(nu=np.asarray(sec["nu"], dtype=float),
                              omega=np.asarray(sec["omega"], dtype=float))
    except (KeyError, ValueError, InvalidPosteriorError) as exc:
        raise ConfigError(f"invalid posterior: {exc}")


def _parse_strategy(cfg):
    sec = _section(cfg, "strategy", required=True)
    try:
        return strategy_from_json(sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid strategy: {exc}")


def _run_settings(cfg, args):
    sec = _section(cfg, "run")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 20240001))
    workers = args.workers if args.workers is not None else int(sec.get("workers", 1))
    out = Path(args.out if args.out is not None else sec.get("out", "."))
    k = int(sec.get("k", 10000))
    out.mkdir(parents=True, exist_ok=True)
    return seed, workers, out, k


def _meta(cfg, seed) -> dict:
    return {"version": __version__, "config_sha256": _config_hash(cfg), "seed": seed}


def _write_json(path, payload, cfg, seed):
    payload = dict(payload)
    payload["meta"] = _meta(cfg, seed)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)


def _write_csv(path, frame: pd.DataFrame, cfg, seed, schema: str):
    with open(path, "w") as fh:
        fh.write(f"# dyncontrol v{__version__} schema={schema} "
                 f"config={_config_hash(cfg)} seed={seed}\n")
        frame.to_csv(fh, index=False)


_SCENARIOS = {
    "never": NeverTreat(),
    "always": AlwaysTreat(),
    "threshold0": PersonalizedThreshold(0.0),
}


def cmd_simulate_cohort(cfg, args) -> int:
    seed, workers, out, _ = _run_settings(cfg, args)
    params = _parse_model(cfg)
    schedule = _parse_schedule(cfg)
    pop_sec = _section(cfg, "population")
    pop = _build(PopulationSpec, {"n": int(pop_sec.get("n", 1000)),
                                  "params": params,
                                  "d_prob": float(pop_sec.get("d_prob", 0.6))},
                 "population")
    scenario = args.scenario or "observational"
    if scenario == "observational":
        asec = _section(cfg, "assignment")
        assignment = (_build(ObservationalAssignmentModel, asec, "assignment model")
                      if asec else presets.reference_assignment())
    elif scenario in _SCENARIOS:
        assignment = _SCENARIOS[scenario]
    else:
        raise ConfigError(f"unknown scenario: {scenario}")
    cohort = simulate_cohort(pop, assignment, schedule, seed)
    cohort.meta.update(_meta(cfg, seed))
    note = (f"dyncontrol v{__version__} schema=cohort-v1 "
            f"config={_config_hash(cfg)} seed={seed} scenario={scenario}")
    write_cohort_csv(cohort, out / "cohort.csv", out / "cohort.meta.json", header_note=note)
    print(f"wrote {out/'cohort.csv'} ({cohort.n} subjects, "
          f"{cohort.fraction_patient_time_treated():.3f} of patient-time treated)")
    return 0


def cmd_fit(cfg, args) -> int:
    seed, workers, out, _ = _run_settings(cfg, args)
    if not args.cohort:
        raise ConfigError("fit requires --cohort PATH")
    cohort = read_cohort_csv(args.cohort)
    init = _build(ModelParams, _section(cfg, "init"), "init") if cfg.get("init") else None
    fit = fit_ml(cohort, init=init)
    payload = fit.as_dict()
    if args.bootstrap:
        payload["bootstrap"] = bootstrap_se(cohort, fit, args.bootstrap, seed)
    _write_json(out / "fitted.json", payload, cfg, seed)
    print(f"wrote {out/'fitted.json'} (converged={fit.converged}, "
          f"loglik={fit.loglik:.2f})")
    return 0 if fit.converged else 4


def cmd_risk(cfg, args) -> int:
    seed, workers, out, k = _run_settings(cfg, args)
    params = _parse_model(cfg)
    schedule = _parse_schedule(cfg)
    cov = _parse_subject(cfg)
    spec = _parse_risk(cfg)
    strategy = _parse_strategy(cfg)
    posterior = _parse_posterior(cfg)
    if posterior is not None:
        est = estimate_risk_spdp(posterior, params, cov, schedule, strategy,
                                 spec, k, seed, workers=workers)
    else:
        est = estimate_risk_skp(params, cov, schedule, strategy, spec, k, seed,
                                workers=workers)
    _write_json(out / "risk.json", est.as_dict(), cfg, seed)
    _write_csv(out / "risk.csv", pd.DataFrame([est.as_dict()]), cfg, seed, "risk-v1")
    print(f"total={est.total:.4f} cost_y={est.cost_marker:.4f} "
          f"cost_trt={est.cost_treatment:.4f} pct={est.fraction_treated:.3f} "
          f"se={est.mc_se:.4f}")
    return 0


def cmd_optimize(cfg, args) -> int:
    seed, workers, out, _ = _run_settings(cfg, args)
    params = _parse_model(cfg)
    schedule = _parse_schedule(cfg)
    spec = _parse_risk(cfg)
    search = _parse_search(cfg, seed)
    posterior = _parse_posterior(cfg)
    sweep_sec = _section(cfg, "sweep")
    omegas = sweep_sec.get("omegas", list(presets.OMEGA_GRID))
    profiles = [tuple(p) for p in sweep_sec.get("profiles", presets.PATIENT_PROFILES)]
    table = sweep_omega(omegas, search, profiles, params, schedule, spec.eta,
                        posterior=posterior, kind=spec.kind, workers=workers)
    _write_csv(out / "sweep.csv", table, cfg, seed, "sweep-v1")
    print(f"wrote {out/'sweep.csv'} ({len(table)} rows)")
    return 0


def cmd_dtdr_run(cfg, args) -> int:
    seed, workers, out, _ = _run_settings(cfg, args)
    params = _parse_model(cfg)
    schedule = _parse_schedule(cfg)
    cov = _parse_subject(cfg)
    spec = _parse_risk(cfg)
    search = _parse_search(cfg, seed)
    prior = _parse_posterior(cfg)
    if prior is None:
        prior = PosteriorState(nu=[params.mu0, params.mu1],
                               omega=np.diag([params.sigma_mu0 ** 2,
                                              params.sigma_mu1 ** 2]))
    rec = _section(cfg, "environment").get("recorded_z")
    if rec is not None:
        env = RecordedEnvironment(rec)
    else:
        env = SimulatedEnvironment(params, cov, schedule, seed=seed + 1)
    trace = dtdr_run(prior, params, cov, schedule, spec, search, env, seed)
    frame = trace_to_frame(trace)
    _write_csv(out / "dtdr_trace.csv", frame, cfg, seed, "dtdr-trace-v1")
    print(f"wrote {out/'dtdr_trace.csv'} ({len(frame)} visits, "
          f"truncated={trace.truncated})")
    return 0


def cmd_oracle_check(cfg, args) -> int:
    seed, workers, out, k = _run_settings(cfg, args)
    params = _parse_model(cfg)
    schedule = _parse_schedule(cfg) if cfg.get("schedule") else VisitSchedule.regular(2)
    cov = _parse_subject(cfg)
    if not cov.effects_known:
        cov = SubjectCovariates(c=cov.c, d=cov.d, mu0i=params.mu0, mu1i=params.mu1)
    spec = _parse_risk(cfg)
    specs = cfg.get("strategies") or [
        {"kind": "never_treat"},
        {"kind": "always_treat"},
        {"kind": "randomized", "p": 0.4},
        {"kind": "personalized_threshold", "beta": -1.0},
        {"kind": "prediction_containment", "eta": spec.eta, "kappa": 0.05},
    ]
    rows = []
    for doc in specs:
        strategy = strategy_from_json(doc)
        mc = estimate_risk_skp(params, cov, schedule, strategy, spec, k, seed,
                               workers=workers)
        if doc["kind"] in ("never_treat", "always_treat"):
            regime = "never" if doc["kind"] == "never_treat" else "always"
            exact = closed_form_fixed_regime(params, cov, schedule, regime, spec)
        else:
            exact = oracle_risk(params, cov, schedule, strategy, spec)
        rows.append({"strategy": doc["kind"], "mc": mc.total, "oracle": exact,
                     "abs_diff": abs(mc.total - exact), "mc_se": mc.mc_se,
                     "within_3se": bool(abs(mc.total - exact) <= 3 * mc.mc_se)})
    _write_json(out / "oracle_report.json", {"checks": rows}, cfg, seed)
    bad = [r["strategy"] for r in rows if not r["within_3se"]]
    print(f"wrote {out/'oracle_report.json'}; "
          + ("all within 3*SE" if not bad else f"outside 3*SE: {bad}"))
    return 0 if not bad else 3


def _replicate_table1(cfg, args, seed, workers, out, scale) -> int:
    n_subj, reps = (500, 200) if scale == "desk" else (1000, 1000)
    rep_sec = _section(cfg, "replicate")
    n_subj = int(rep_sec.get("n", n_subj))
    reps = int(rep_sec.get("replicates", reps))
    if scale == "full":
        print(f"full scale: {reps} fits of N={n_subj}; expect roughly "
              f"{reps * 0.5 / 60:.0f} min")
    params = _parse_model(cfg)
    schedule = _parse_schedule(cfg)
    truth = params_to_vector(params)
    ests, ses, covered = [], [], []
    for r in range(reps):
        pop = PopulationSpec(n=n_subj, params=params)
        cohort = simulate_cohort(pop, presets.reference_assignment(), schedule,
                                 seed=seed + r)
        fit = fit_ml(cohort)
        v = params_to_vector(fit.params)
        ests.append(v)
        ses.append(fit.se)
        covered.append((truth >= v - 1.96 * fit.se) & (truth <= v + 1.96 * fit.se))
    ests, ses, covered = map(np.asarray, (ests, ses, covered))
    frame = pd.DataFrame({
        "parameter": PARAM_NAMES,
        "truth": truth,
        "bias": ests.mean(0) - truth,
        "sd_empirical": ests.std(0, ddof=1),
        "se_mean": np.nanmean(ses, axis=0),
        "coverage": covered.mean(0),
    })
    _write_csv(out / "table1.csv", frame, cfg, seed, "table1-v1")
    print(frame.to_string(index=False))
    return 0


def _replicate_sweep(cfg, args, seed, workers, out, scale, table) -> int:
    params = _parse_model(cfg)
    if table == 2:
        params = ModelParams(**{**vars(params), "sigma_mu0": 0.0, "sigma_mu1": 0.0})
        posterior = None
    else:
        posterior = PosteriorState(nu=[params.mu0, params.mu1],
                                   omega=np.diag([params.sigma_mu0 ** 2,
                                                  params.sigma_mu1 ** 2]))
    schedule = _parse_schedule(cfg)
    spec = _parse_risk(cfg)
    k_eval = 2000 if scale == "desk" else 10000
    search = dict(_section(cfg, "search"))
    search.setdefault("k_eval", k_eval)
    search.setdefault("seed", seed)
    search_cfg = _build(SearchConfig, search, "search configuration")
    sweep_sec = _section(cfg, "sweep")
    omegas = sweep_sec.get("omegas", list(presets.OMEGA_GRID))
    profiles = [tuple(p) for p in sweep_sec.get("profiles", presets.PATIENT_PROFILES)]
    if scale == "full":
        print(f"full scale: {len(omegas) * len(profiles)} optimizations at "
              f"k_eval={search_cfg.k_eval}; expect a few minutes")
    table_df = sweep_omega(omegas, search_cfg, profiles, params, schedule,
                           spec.eta, posterior=posterior, kind=spec.kind,
                           workers=workers)
    _write_csv(out / f"table{table}.csv", table_df, cfg, seed, f"table{table}-v1")
    print(f"wrote {out / f'table{table}.csv'} ({len(table_df)} rows)")
    return 0


def cmd_replicate(cfg, args) -> int:
    seed, workers, out, _ = _run_settings(cfg, args)
    scale = args.scale
    if args.table == 1:
        return _replicate_table1(cfg, args, seed, workers, out, scale)
    return _replicate_sweep(cfg, args, seed, workers, out, scale, args.table)


_COMMANDS = {
    "simulate-cohort": cmd_simulate_cohort,
    "fit": cmd_fit,
    "risk": cmd_risk,
    "optimize": cmd_optimize,
    "dtdr-run": cmd_dtdr_run,
    "oracle-check": cmd_oracle_check,
    "replicate": cmd_replicate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyncontrol",
        description="simulate, estimate and optimize treatment strategies "
                    "for a longitudinal biomarker")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if name == "simulate-cohort":
            p.add_argument("--scenario",
                           choices=["observational", "never", "threshold0", "always"],
                           default=None)
        if name == "fit":
            p.add_argument("--cohort", default=None, help="cohort CSV path")
            p.add_argument("--bootstrap", type=int, default=0,
                           help="parametric bootstrap resamples")
        if name == "replicate":
            p.add_argument("--table", type=int, choices=[1, 2, 3], required=True)
            p.add_argument("--scale", choices=["desk", "full"], default="desk")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DegenerateModelError, ResolutionError, InvalidPosteriorError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except DynControlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
