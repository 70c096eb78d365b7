"""Treatment-decision rules and the observational assignment model.

A strategy maps the observed history of a subject (noisy marker values,
past treatment, covariates) to a treatment decision at each visit.
Deterministic rules consume no randomness; stochastic rules draw a
Bernoulli from a dedicated stream so that trajectory noise is unaffected
by the choice of rule.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.linalg import pinvh
from scipy.special import expit, ndtr

from .errors import AlignmentError, DegenerateModelError
from .model import ModelParams, SubjectCovariates, VisitSchedule, treatment_integral

__all__ = [
    "NeverTreat",
    "AlwaysTreat",
    "Randomized",
    "LogisticStochastic",
    "DeterministicThreshold",
    "PersonalizedThreshold",
    "PredictionContainment",
    "ParamPredictionContainment",
    "StrategySpec",
    "ObservedHistory",
    "ObservationalAssignmentModel",
    "decide",
    "exceedance_probability",
    "assign_observational",
    "strategy_to_json",
    "strategy_from_json",
]


@dataclass(frozen=True)
class NeverTreat:
    pass


@dataclass(frozen=True)
class AlwaysTreat:
    pass


@dataclass(frozen=True)
class Randomized:
    """Treat with a fixed probability at every visit, ignoring history."""

    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


@dataclass(frozen=True)
class LogisticStochastic:
    """Bernoulli decision with logit linear in (Z_j, C, previous A)."""

    alpha0: float
    alpha_z: float
    alpha_c: float
    alpha_a: float


@dataclass(frozen=True)
class DeterministicThreshold:
    """Treat when Z_j exceeds a covariate-adjusted level beta0 + beta_c * c."""

    beta0: float
    beta_c: float


@dataclass(frozen=True)
class PersonalizedThreshold:
    """Treat when Z_j exceeds a subject-specific level beta."""

    beta: float


@dataclass(frozen=True)
class PredictionContainment:
    """Treat when the untreated next-visit exceedance probability is large.

    Decision: 1{ P(Y_next > eta | no treatment now, observed history) > kappa }.
    """

    eta: float
    kappa: float

    def __post_init__(self):
        if not np.isfinite(self.eta):
            raise ValueError("eta must be finite")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")


@dataclass(frozen=True)
class ParamPredictionContainment:
    """Containment rule with the probability cutoff as a free parameter."""

    eta: float
    beta: float

    def __post_init__(self):
        if not np.isfinite(self.eta):
            raise ValueError("eta must be finite")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


StrategySpec = Union[
    NeverTreat,
    AlwaysTreat,
    Randomized,
    LogisticStochastic,
    DeterministicThreshold,
    PersonalizedThreshold,
    PredictionContainment,
    ParamPredictionContainment,
]

_STRATEGY_TAGS = {
    "never_treat": NeverTreat,
    "always_treat": AlwaysTreat,
    "randomized": Randomized,
    "logistic": LogisticStochastic,
    "covariate_threshold": DeterministicThreshold,
    "personalized_threshold": PersonalizedThreshold,
    "prediction_containment": PredictionContainment,
    "param_prediction_containment": ParamPredictionContainment,
}
_TAG_BY_TYPE = {v: k for k, v in _STRATEGY_TAGS.items()}


def strategy_to_json(spec: StrategySpec) -> dict:
    """Canonical JSON form: a tag plus named coefficients."""
    out = {"kind": _TAG_BY_TYPE[type(spec)]}
    for f in fields(spec):
        out[f.name] = getattr(spec, f.name)
    return out


def strategy_from_json(doc: dict) -> StrategySpec:
    doc = dict(doc)
    kind = doc.pop("kind", None)
    if kind not in _STRATEGY_TAGS:
        raise ValueError(f"unknown strategy kind: {kind!r}")
    return _STRATEGY_TAGS[kind](**doc)


@dataclass(frozen=True)
class ObservationalAssignmentModel:
    """Logistic treatment-assignment law of an observational study.

    logit P(A_j = 1) = alpha0 + alpha_z * Z_j + alpha_c * C + alpha_d * D,
    applied independently at each post-baseline visit.
    """

    alpha0: float
    alpha_z: float
    alpha_c: float
    alpha_d: float

    def __post_init__(self):
        vals = (self.alpha0, self.alpha_z, self.alpha_c, self.alpha_d)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("assignment coefficients must be finite")

    def probability(self, z, c, d):
        return expit(self.alpha0 + self.alpha_z * np.asarray(z)
                     + self.alpha_c * c + self.alpha_d * d)


@dataclass(frozen=True, eq=False)
class ObservedHistory:
    """Everything a strategy may use at decision time.

    ``z`` holds observations at visits 0..j, ``a_path`` the decisions taken
    at visits 0..j-1.  The baseline observation is always present: decisions
    are made only after observing.
    """

    schedule: VisitSchedule
    j: int
    z: np.ndarray
    a_path: np.ndarray
    cov: SubjectCovariates

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.z, dtype=float))
        a = np.atleast_1d(np.asarray(self.a_path, dtype=int)) if np.size(self.a_path) else np.zeros(0, dtype=int)
        if not 0 <= self.j < self.schedule.n_visits:
            raise AlignmentError("visit index outside the schedule")
        if z.size != self.j + 1:
            raise AlignmentError("need one observation per visit up to j")
        if a.size != self.j:
            raise AlignmentError("need one past decision per elapsed visit")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "a_path", a)

    @property
    def a_prev(self) -> int:
        return int(self.a_path[-1]) if self.a_path.size else 0

    @property
    def z_now(self) -> float:
        return float(self.z[-1])


def _effect_prior(params: ModelParams, cov: SubjectCovariates):
    """Gaussian law of the subject effects (mu0i, mu1i) given current knowledge."""
    if cov.effects_known:
        return np.array([cov.mu0i, cov.mu1i]), np.zeros((2, 2))
    mean = np.array([params.mu0, params.mu1])
    omega = np.diag([params.sigma_mu0 ** 2, params.sigma_mu1 ** 2])
    return mean, omega


def _conditional_normal(mean_y, var_y, cov_yz, mean_z, cov_zz, z):
    """Condition a scalar Gaussian on a jointly Gaussian observation vector."""
    try:
        cf = cho_factor(cov_zz, lower=True)
        w = cho_solve(cf, cov_yz)
    except (LinAlgError, ValueError):
        sol = pinvh(cov_zz)
        if not np.any(np.abs(sol)):
            if not np.any(np.abs(cov_zz)):
                # observations carry no randomness at all
                return float(mean_y), float(var_y)
            raise DegenerateModelError("observation covariance is singular")
        w = sol @ cov_yz
    m = float(mean_y + w @ (z - mean_z))
    v = float(var_y - cov_yz @ w)
    return m, max(v, 0.0)


def exceedance_probability(hist: ObservedHistory, params: ModelParams,
                           dt: float, eta: float, a_hyp: int,
                           effect_law: Optional[tuple] = None) -> float:
    """P(Y at the next visit exceeds eta | observed history, hypothetical action).

    The conditional law of the latent marker one step ahead is obtained by
    exact Gaussian conditioning of (Y_next, observed Z values) given the
    covariates, the realized treatment path, and the current Gaussian law
    of the subject effects (a point mass when they are known).  With no
    measurement noise and known effects this reduces to the probit of
    ``(eta - Y_now - drift * dt) / (tau * sqrt(dt))``.

    ``effect_law`` optionally overrides the effect distribution with a
    ``(mean, covariance)`` pair, e.g. a sequential posterior.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    cov = hist.cov
    t = hist.schedule.times[: hist.j + 1]
    t_next = t[-1] + dt
    nu, omega = effect_law if effect_law is not None else _effect_prior(params, cov)

    fixed_slope = params.gamma_c * cov.c + params.gamma_d * cov.d
    a_int = treatment_integral(t, hist.a_path)
    a_int_next = a_int[-1] + a_hyp * dt

    design = np.column_stack([np.ones(t.size), t])
    c_vec = fixed_slope * t + params.gamma_a * a_int
    mean_z = design @ nu + c_vec
    row_next = np.array([1.0, t_next])
    mean_y = row_next @ nu + fixed_slope * t_next + params.gamma_a * a_int_next

    tau2 = params.tau ** 2
    cov_zz = (design @ omega @ design.T
              + tau2 * np.minimum.outer(t, t)
              + params.sigma_eps ** 2 * np.eye(t.size))
    cov_yz = design @ (omega @ row_next) + tau2 * t  # min(t_next, t_r) = t_r
    var_y = row_next @ omega @ row_next + tau2 * t_next

    m, v = _conditional_normal(mean_y, var_y, cov_yz, mean_z, cov_zz, hist.z)
    if v <= 0:
        return float(m > eta)
    return float(1.0 - ndtr((eta - m) / np.sqrt(v)))


def decide(spec: StrategySpec, hist: ObservedHistory, params: ModelParams,
           rng: Optional[np.random.Generator] = None) -> int:
    """Apply a strategy at the current visit; returns the treatment indicator.

    Deterministic rules are pure functions of the history; stochastic rules
    draw once from ``rng``.  Containment rules at the terminal visit return 0
    (there is no next visit to predict).
    """
    if isinstance(spec, NeverTreat):
        return 0
    if isinstance(spec, AlwaysTreat):
        return 1
    if isinstance(spec, Randomized):
        return int(rng.random() < spec.p)
    if isinstance(spec, LogisticStochastic):
        logit = (spec.alpha0 + spec.alpha_z * hist.z_now
                 + spec.alpha_c * hist.cov.c + spec.alpha_a * hist.a_prev)
        return int(rng.random() < expit(logit))
    if isinstance(spec, DeterministicThreshold):
        return int(hist.z_now > spec.beta0 + spec.beta_c * hist.cov.c)
    if isinstance(spec, PersonalizedThreshold):
        return int(hist.z_now > spec.beta)
    if isinstance(spec, (PredictionContainment, ParamPredictionContainment)):
        if hist.j >= hist.schedule.horizon:
            return 0
        dt = float(hist.schedule.times[hist.j + 1] - hist.schedule.times[hist.j])
        p = exceedance_probability(hist, params, dt, spec.eta, a_hyp=0)
        cut = spec.kappa if isinstance(spec, PredictionContainment) else spec.beta
        return int(p > cut)
    raise TypeError(f"unknown strategy spec: {type(spec).__name__}")


def assign_observational(model: ObservationalAssignmentModel, z_j: float,
                         cov: SubjectCovariates, rng: np.random.Generator) -> int:
    """Draw a treatment indicator from the observational assignment law."""
    return int(rng.random() < model.probability(z_j, cov.c, cov.d))
