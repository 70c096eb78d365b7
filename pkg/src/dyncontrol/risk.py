"""Loss functions and Monte Carlo risk estimation.

Additive risks discretize the time-average of the marker penalty and the
weighted treatment burden on the visit grid: the sum runs over the interior
post-baseline visits t_1 .. t_{J-1} and is normalized by J.  (The baseline
visit never enters the sum; neither does the terminal visit, matching the
reference result tables this package reproduces.)  Losses evaluate the
latent marker, never its noisy observation; strategies see only the
observations.

Estimators are vectorized over replicates in fixed-size chunks whose random
streams are keyed by chunk index, so results are bit-identical for any
worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, InvalidPosteriorError
from .model import ModelParams, SubjectCovariates, Trajectory, VisitSchedule
from .simulate import (CHUNK, DIFFUSION, EFFECTS, MEASUREMENT, POPULATION,
                       STRATEGY, PopulationSpec, stream, _vector_decisions)
from .strategies import (ParamPredictionContainment, PredictionContainment,
                         StrategySpec)

__all__ = [
    "RiskSpec",
    "RiskEstimate",
    "loss",
    "estimate_risk_skp",
    "estimate_risk_spdp",
    "contrast",
    "RiskEvaluator",
]

_KINDS = ("terminal-level", "terminal-exceedance", "additive-mean", "additive-exceedance")


@dataclass(frozen=True)
class RiskSpec:
    """Which loss to evaluate: kind, exceedance level, treatment-cost weight."""

    kind: str
    eta: float = float("nan")
    omega: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if "exceedance" in self.kind and not np.isfinite(self.eta):
            raise ValueError("exceedance losses need a finite eta")


@dataclass(frozen=True)
class RiskEstimate:
    """Monte Carlo risk with its decomposition and standard error."""

    total: float
    cost_marker: float
    cost_treatment: float
    fraction_treated: float
    mc_se: float
    k: int
    spec: RiskSpec

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "cost_y": self.cost_marker,
            "cost_trt": self.cost_treatment,
            "pct_treated": self.fraction_treated,
            "se": self.mc_se,
            "k": self.k,
        }


def _marker_stat(spec: RiskSpec, y_win: np.ndarray, y_term: np.ndarray, J: int):
    """Per-replicate marker cost; y_win has the interior visits on its last axis."""
    if spec.kind == "additive-exceedance":
        return (y_win > spec.eta).sum(axis=-1) / J
    if spec.kind == "additive-mean":
        return y_win.sum(axis=-1) / J
    if spec.kind == "terminal-level":
        return np.asarray(y_term, dtype=float)
    return (np.asarray(y_term) > spec.eta).astype(float)


def loss(traj: Trajectory, spec: RiskSpec) -> tuple[float, float]:
    """Evaluate the discretized loss of one trajectory.

    Returns ``(marker cost, treatment cost)``; their sum is the realized
    loss.  Exceedance comparisons are strict.
    """
    J = len(traj) - 1
    y = traj.y
    marker = float(np.atleast_1d(_marker_stat(spec, y[1:J][None, :], y[J], J))[0])
    treat = spec.omega * float(traj.a[1:J].sum()) / J
    return marker, treat


def _psd_sqrt(omega: np.ndarray) -> np.ndarray:
    """Matrix square root of a PSD matrix (eigen-based, tolerant of zeros)."""
    w, v = np.linalg.eigh(omega)
    if np.min(w) < -1e-10 * max(1.0, np.max(np.abs(w))):
        raise InvalidPosteriorError("covariance is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


def _filter_plan(params: ModelParams, schedule: VisitSchedule, omega0: np.ndarray):
    """Data-independent Kalman quantities for the (Y, slope) filter.

    Returns per-visit update gains and, for each interval, the predictive
    variance of the next latent value under any action (actions shift the
    mean only).
    """
    J = schedule.horizon
    widths = schedule.intervals
    s2 = params.sigma_eps ** 2
    P = np.array(omega0, dtype=float)
    gains = []
    pred_vars = []
    for j in range(J + 1):
        S = P[0, 0] + s2
        K = P[:, 0] / S if S > 0 else np.zeros(2)
        gains.append(K)
        P = P - np.outer(K, P[0, :])
        P = 0.5 * (P + P.T)
        if j < J:
            dt = widths[j]
            h = np.array([1.0, dt])
            pred_vars.append(float(h @ P @ h) + params.tau ** 2 * dt)
            F = np.array([[1.0, dt], [0.0, 1.0]])
            P = F @ P @ F.T
            P[0, 0] += params.tau ** 2 * dt
    return gains, pred_vars


def _run_block(params: ModelParams, schedule: VisitSchedule, strategy: StrategySpec,
               spec: RiskSpec, c, d, mu0i, mu1i, noise, filter_prior=None):
    """Simulate one block of replicates; returns (marker cost, treated-visit count)."""
    J = schedule.horizon
    widths = schedule.intervals
    k = noise["meas"].shape[0]
    ga, gc, gd = params.gamma_a, params.gamma_c, params.gamma_d

    slope0 = np.broadcast_to(np.asarray(mu1i, dtype=float) + gc * np.asarray(c) + gd * np.asarray(d), (k,)).copy()
    y = np.broadcast_to(np.asarray(mu0i, dtype=float), (k,)).astype(float).copy()
    z = y + params.sigma_eps * noise["meas"][:, 0]

    contain = isinstance(strategy, (PredictionContainment, ParamPredictionContainment))
    if contain:
        nu0, om0 = filter_prior
        gains, pred_vars = _filter_plan(params, schedule, om0)
        m = np.tile(np.asarray(nu0, dtype=float), (k, 1))
        m = m + np.outer(z - m[:, 0], gains[0])
        cut = strategy.kappa if isinstance(strategy, PredictionContainment) else strategy.beta
        fixed = gc * np.asarray(c) + gd * np.asarray(d)

    y_interior = np.zeros(k) if spec.kind.startswith("additive") else None
    marker_acc = np.zeros(k)
    treat_acc = np.zeros(k)
    a_prev = np.zeros(k, dtype=int)

    for j in range(J + 1):
        if 1 <= j <= J - 1:
            if spec.kind == "additive-exceedance":
                marker_acc += (y > spec.eta)
            elif spec.kind == "additive-mean":
                marker_acc += y
        if j < J:
            dt = widths[j]
            if contain:
                pm = m[:, 0] + (m[:, 1] + fixed) * dt
                sd = np.sqrt(pred_vars[j])
                p_exc = 1.0 - ndtr((strategy.eta - pm) / sd) if sd > 0 else (pm > strategy.eta).astype(float)
                a_j = (p_exc > cut).astype(int)
            else:
                a_j = _vector_decisions(strategy, z, c, d, a_prev, noise["strat"][:, j])
            if 1 <= j <= J - 1:
                treat_acc += a_j
            y = y + (slope0 + ga * a_j) * dt + params.tau * np.sqrt(dt) * noise["diff"][:, j]
            z = y + params.sigma_eps * noise["meas"][:, j + 1]
            if contain:
                m = np.column_stack([m[:, 0] + (m[:, 1] + fixed + ga * a_j) * dt, m[:, 1]])
                m = m + np.outer(z - m[:, 0], gains[j + 1])
            a_prev = a_j
    marker = _marker_stat(spec, None, y, J) if spec.kind.startswith("terminal") else marker_acc / J
    return marker, treat_acc


def _draw_noise(seed: int, chunk: int, m: int, J: int, needs: dict) -> dict:
    out = {
        "diff": stream(seed, chunk, DIFFUSION).standard_normal((m, J)),
        "meas": stream(seed, chunk, MEASUREMENT).standard_normal((m, J + 1)),
        "strat": stream(seed, chunk, STRATEGY).random((m, J + 1)),
    }
    if needs.get("effects"):
        out["effects"] = stream(seed, chunk, EFFECTS).standard_normal((m, 2))
    if needs.get("population"):
        g = stream(seed, chunk, POPULATION)
        out["pop_c"] = g.standard_normal(m)
        out["pop_d"] = g.random(m)
    return out


class _Plan:
    """Resolved sampling plan: how covariates and effects arise per replicate."""

    def __init__(self, params, schedule, spec, *, cov=None, posterior=None, population=None):
        self.params, self.schedule, self.spec = params, schedule, spec
        self.cov, self.population = cov, population
        self.needs = {}
        if population is not None:
            self.needs = {"effects": True, "population": True}
            self.filter_prior = (np.array([params.mu0, params.mu1]),
                                 np.diag([params.sigma_mu0 ** 2, params.sigma_mu1 ** 2]))
            self.effect_sqrt = np.diag([params.sigma_mu0, params.sigma_mu1])
        elif posterior is not None:
            nu = np.asarray(posterior.nu if hasattr(posterior, "nu") else posterior[0], dtype=float)
            om = np.asarray(posterior.omega if hasattr(posterior, "omega") else posterior[1], dtype=float)
            self.needs = {"effects": True}
            self.filter_prior = (nu, om)
            self.effect_sqrt = _psd_sqrt(om)
        elif cov is not None and cov.effects_known:
            self.filter_prior = (np.array([cov.mu0i, cov.mu1i]), np.zeros((2, 2)))
            self.effect_sqrt = None
        elif cov is not None:
            # fixed covariates, effects marginalized over the population law
            self.needs = {"effects": True}
            self.filter_prior = (np.array([params.mu0, params.mu1]),
                                 np.diag([params.sigma_mu0 ** 2, params.sigma_mu1 ** 2]))
            self.effect_sqrt = np.diag([params.sigma_mu0, params.sigma_mu1])
        else:
            raise ValueError("need a subject, a posterior, or a population")

    def run_chunk(self, strategy, noise):
        p = self.params
        if self.population is not None:
            c = noise["pop_c"]
            d = (noise["pop_d"] < self.population.d_prob).astype(int)
        else:
            c, d = self.cov.c, self.cov.d
        if self.effect_sqrt is None:
            mu0i, mu1i = self.cov.mu0i, self.cov.mu1i
        else:
            nu = self.filter_prior[0] if self.population is None else np.array([p.mu0, p.mu1])
            draws = noise["effects"] @ self.effect_sqrt.T
            mu0i = nu[0] + draws[:, 0]
            mu1i = nu[1] + draws[:, 1]
        return _run_block(p, self.schedule, strategy, self.spec, c, d, mu0i, mu1i,
                          noise, filter_prior=self.filter_prior)


def _estimate(plan: _Plan, strategy: StrategySpec, k: int, seed: int,
              workers: int = 1, noise_cache: Optional[list] = None) -> RiskEstimate:
    J = plan.schedule.horizon
    spec = plan.spec
    chunks = [(i, min(CHUNK, k - i * CHUNK)) for i in range((k + CHUNK - 1) // CHUNK)]

    def task(idx_size):
        idx, m = idx_size
        if noise_cache is not None:
            noise = noise_cache[idx]
        else:
            noise = _draw_noise(seed, idx, m, J, plan.needs)
        return plan.run_chunk(strategy, noise)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(task, chunks))
    else:
        parts = [task(cs) for cs in chunks]

    marker = np.concatenate([p[0] for p in parts])
    treat = np.concatenate([p[1] for p in parts])
    treat_cost = spec.omega * treat / J
    total = marker + treat_cost
    se = float(total.std(ddof=1) / np.sqrt(k)) if k > 1 else 0.0
    return RiskEstimate(
        total=float(total.mean()),
        cost_marker=float(marker.mean()),
        cost_treatment=float(treat_cost.mean()),
        fraction_treated=float(treat.mean() / max(J - 1, 1)),
        mc_se=se,
        k=k,
        spec=spec,
    )


def estimate_risk_skp(params: ModelParams, cov: Optional[SubjectCovariates],
                      schedule: VisitSchedule, strategy: StrategySpec,
                      spec: RiskSpec, k: int, seed: int, *, workers: int = 1,
                      population: Optional[PopulationSpec] = None) -> RiskEstimate:
    """Monte Carlo risk with all model parameters known.

    With ``cov`` given the estimate is the conditional risk of that subject
    (effects marginalized over their population law when not realized on
    ``cov``); with ``population`` given instead, covariates and effects are
    drawn per replicate and the estimate is the marginal risk.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    plan = _Plan(params, schedule, spec, cov=cov, population=population)
    return _estimate(plan, strategy, k, seed, workers)


def estimate_risk_spdp(posterior, params: ModelParams, cov: SubjectCovariates,
                       schedule: VisitSchedule, strategy: StrategySpec,
                       spec: RiskSpec, k: int, seed: int, *, workers: int = 1) -> RiskEstimate:
    """Monte Carlo risk averaging over posterior uncertainty in the effects.

    Each replicate draws the subject effects from the posterior Gaussian and
    then runs one known-parameter replicate; decision rules that predict use
    the posterior, not the drawn truth.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    plan = _Plan(params, schedule, spec, cov=cov, posterior=posterior)
    return _estimate(plan, strategy, k, seed, workers)


def contrast(a: RiskEstimate, b: RiskEstimate) -> tuple[float, float]:
    """Difference of two risk totals with its standard error."""
    if a.spec != b.spec:
        raise ContractError("risk estimates use different specifications")
    return a.total - b.total, float(np.hypot(a.mc_se, b.mc_se))


class RiskEvaluator:
    """Risk evaluation under common random numbers.

    All candidate strategies are scored on one frozen noise reservoir, so the
    mapping strategy -> estimate is deterministic and smooth enough to
    optimize over.
    """

    def __init__(self, params: ModelParams, schedule: VisitSchedule, spec: RiskSpec,
                 k: int, seed: int, *, cov: Optional[SubjectCovariates] = None,
                 posterior=None, population: Optional[PopulationSpec] = None,
                 workers: int = 1):
        self.plan = _Plan(params, schedule, spec, cov=cov, posterior=posterior,
                          population=population)
        self.k, self.seed, self.workers = k, seed, workers
        J = schedule.horizon
        self._noise = [
            _draw_noise(seed, i, min(CHUNK, k - i * CHUNK), J, self.plan.needs)
            for i in range((k + CHUNK - 1) // CHUNK)
        ]

    def __call__(self, strategy: StrategySpec) -> RiskEstimate:
        return _estimate(self.plan, strategy, self.k, self.seed,
                         self.workers, noise_cache=self._noise)
