"""Threshold-strategy optimization under common random numbers.

The risk surface over the threshold is multimodal (a treated basin and a
never-treat plateau), so optimization always starts with a global grid scan
and only then refines the best bracket with a golden-section search.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from .model import ModelParams, SubjectCovariates, VisitSchedule
from .risk import RiskEstimate, RiskEvaluator, RiskSpec
from .strategies import PersonalizedThreshold

__all__ = ["SearchConfig", "ThresholdResult", "golden_section",
           "optimize_threshold", "make_threshold_objective", "sweep_omega"]

_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SearchConfig:
    """Bounds, grid size and refinement tolerance for the threshold search."""

    lo: float = -15.0
    hi: float = 40.0
    grid_n: int = 64
    refine_tol: float = 0.05
    k_eval: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.grid_n < 8:
            raise ValueError("grid_n must be >= 8")
        if self.refine_tol <= 0:
            raise ValueError("refine_tol must be > 0")
        if self.k_eval < 1:
            raise ValueError("k_eval must be >= 1")


@dataclass(frozen=True)
class ThresholdResult:
    beta: float
    estimate: RiskEstimate
    at_boundary: bool
    evaluations: int


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float) -> float:
    """Locate a local minimizer of ``f`` inside [a, b] to width ``tol``.

    Purely local: on a flat or monotone stretch it settles wherever the
    bracket shrinks to, which is exactly why callers must grid-scan first.
    """
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def make_threshold_objective(params: ModelParams, schedule: VisitSchedule,
                             spec: RiskSpec, cfg: SearchConfig, *,
                             cov: Optional[SubjectCovariates] = None,
                             posterior=None, population=None,
                             workers: int = 1) -> Callable[[float], RiskEstimate]:
    """CRN evaluator mapping a threshold to its risk estimate."""
    evaluator = RiskEvaluator(params, schedule, spec, cfg.k_eval, cfg.seed,
                              cov=cov, posterior=posterior, population=population,
                              workers=workers)
    return lambda beta: evaluator(PersonalizedThreshold(beta))


def optimize_threshold(evaluate: Callable[[float], RiskEstimate],
                       cfg: SearchConfig) -> ThresholdResult:
    """Global grid scan followed by golden-section refinement.

    ``evaluate`` must be deterministic in the threshold (common random
    numbers).  The best grid point anchors a local refinement over its
    neighboring bracket; the better of grid optimum and refined point is
    returned.  ``at_boundary`` flags an optimum at the upper bound, i.e. the
    search concluded that never treating is best.
    """
    grid = np.linspace(cfg.lo, cfg.hi, cfg.grid_n)
    n_evals = 0
    cache: dict[float, RiskEstimate] = {}

    def total(beta: float) -> float:
        nonlocal n_evals
        beta = float(beta)
        if beta not in cache:
            cache[beta] = evaluate(beta)
            n_evals += 1
        return cache[beta].total

    totals = np.array([total(b) for b in grid])
    i_best = int(np.argmin(totals))
    lo = grid[max(i_best - 1, 0)]
    hi = grid[min(i_best + 1, cfg.grid_n - 1)]
    refined = golden_section(total, lo, hi, cfg.refine_tol)
    total(refined)
    beta_star, est = min(cache.items(), key=lambda kv: kv[1].total)
    return ThresholdResult(
        beta=float(beta_star),
        estimate=est,
        at_boundary=bool(beta_star >= cfg.hi - cfg.refine_tol),
        evaluations=n_evals,
    )


def sweep_omega(omegas: Sequence[float], cfg: SearchConfig,
                profiles: Sequence[tuple[int, float]], params: ModelParams,
                schedule: VisitSchedule, eta: float, *, posterior=None,
                kind: str = "additive-exceedance", workers: int = 1) -> pd.DataFrame:
    """Optimize the threshold for every (treatment-cost weight, profile) pair.

    Within a profile all weights share one noise reservoir (the same seed),
    so marker cost and treated fraction at any threshold are common across
    the sweep and the optimized totals form a pointwise minimum of affine
    functions of the weight.
    """
    if not len(omegas):
        raise ValueError("omegas must be nonempty")
    rows = []
    for d, c in profiles:
        if posterior is None:
            cov = SubjectCovariates(c=c, d=d, mu0i=params.mu0, mu1i=params.mu1)
        else:
            cov = SubjectCovariates(c=c, d=d)
        for omega in omegas:
            spec = RiskSpec(kind=kind, eta=eta, omega=omega)
            objective = make_threshold_objective(
                params, schedule, spec, cfg, cov=cov, posterior=posterior,
                workers=workers)
            res = optimize_threshold(objective, cfg)
            est = res.estimate
            rows.append({
                "omega": omega, "profile_d": d, "profile_c": c,
                "beta_star": res.beta, "cost_y": est.cost_marker,
                "cost_trt": est.cost_treatment, "total": est.total,
                "pct_treated": est.fraction_treated, "mc_se": est.mc_se,
                "never_treat_boundary": res.at_boundary,
            })
    return pd.DataFrame(rows)
