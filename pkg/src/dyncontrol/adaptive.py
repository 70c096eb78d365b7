"""Conjugate posterior over subject effects and the adaptive threshold rule.

The subject effects (initial level, slope) have a Gaussian prior; the
observation vector is Gaussian with mean affine in the effects, so the
posterior stays Gaussian and is available in closed form.  The dynamic
threshold rule re-optimizes the treatment threshold at every visit using
risk simulations drawn from the current posterior and the exact conditional
law of the latent state given the observations so far.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DegenerateModelError, InvalidPosteriorError
from .model import (ModelParams, SubjectCovariates, Trajectory, VisitSchedule,
                    treatment_integral)
from .optimize import SearchConfig, make_threshold_objective, optimize_threshold
from .risk import RiskSpec
from .simulate import DIFFUSION, EFFECTS, MEASUREMENT, stream

__all__ = [
    "PosteriorState",
    "DesignExpansion",
    "design_expansion",
    "posterior_update",
    "predictive_next",
    "SimulatedEnvironment",
    "RecordedEnvironment",
    "DtdrStep",
    "DtdrTrace",
    "dtdr_run",
    "trace_to_frame",
]


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Gaussian law of the subject effects (mu0i, mu1i) given j observations."""

    nu: np.ndarray
    omega: np.ndarray
    j: int = 0

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float).reshape(2)
        om = np.asarray(self.omega, dtype=float).reshape(2, 2)
        if not np.allclose(om, om.T, atol=1e-10):
            raise InvalidPosteriorError("covariance must be symmetric")
        eig = np.linalg.eigvalsh(0.5 * (om + om.T))
        if eig.min() < -1e-10 * max(1.0, eig.max(), 0.0):
            raise InvalidPosteriorError("covariance must be PSD")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "omega", 0.5 * (om + om.T))


@dataclass(frozen=True, eq=False)
class DesignExpansion:
    """Observation model pieces: mean = a_mat @ effects + c_vec, noise cov sigma_cond."""

    a_mat: np.ndarray
    c_vec: np.ndarray
    sigma_cond: np.ndarray


def design_expansion(schedule: VisitSchedule, j: int, cov: SubjectCovariates,
                     a_path, params: ModelParams) -> DesignExpansion:
    """Affine observation model for visits 0..j given the realized treatment path.

    Row r of the design is (1, t_r); the offset collects the covariate slope
    times t_r plus the treatment effect times the integrated treatment path;
    the conditional covariance combines the Brownian kernel and measurement
    noise.
    """
    t = schedule.times[: j + 1]
    a_mat = np.column_stack([np.ones(t.size), t])
    fixed = params.gamma_c * cov.c + params.gamma_d * cov.d
    c_vec = fixed * t + params.gamma_a * treatment_integral(t, np.asarray(a_path))
    sigma = params.tau ** 2 * np.minimum.outer(t, t) + params.sigma_eps ** 2 * np.eye(t.size)
    return DesignExpansion(a_mat=a_mat, c_vec=c_vec, sigma_cond=sigma)


def posterior_update(prior: PosteriorState, z_bar, de: DesignExpansion) -> PosteriorState:
    """Absorb the observations into the Gaussian prior over the effects.

    Information-form update computed with symmetric solves.  A prior with
    zero covariance encodes exactly known effects and passes through
    unchanged.  Raises when the conditional observation covariance is
    singular (possible only without measurement noise at a zero-variance
    visit).
    """
    z = np.atleast_1d(np.asarray(z_bar, dtype=float))
    if z.size != de.c_vec.size:
        raise ValueError("observation vector does not match the design")
    if not np.any(prior.omega):
        return replace(prior, j=z.size)
    try:
        cf = cho_factor(de.sigma_cond, lower=True)
    except (LinAlgError, ValueError):
        raise DegenerateModelError("conditional observation covariance is singular")
    sol_a = cho_solve(cf, de.a_mat)            # Sigma^-1 A
    sol_r = cho_solve(cf, z - de.c_vec)        # Sigma^-1 (z - c)
    try:
        prior_prec = np.linalg.inv(prior.omega)
    except np.linalg.LinAlgError:
        raise InvalidPosteriorError("prior covariance must be PD or exactly zero")
    prec = de.a_mat.T @ sol_a + prior_prec
    rhs = de.a_mat.T @ sol_r + prior_prec @ prior.nu
    omega_post = np.linalg.inv(prec)
    omega_post = 0.5 * (omega_post + omega_post.T)
    return PosteriorState(nu=omega_post @ rhs, omega=omega_post, j=z.size)


def _target_given_history(params: ModelParams, cov: SubjectCovariates,
                          t_hist: np.ndarray, a_path: np.ndarray,
                          t_target: float, aint_target: float):
    """Conditional structure of Y(t_target) given effects and observed history.

    Returns (a, b, w, v): given effects mu and observations z,
    Y | mu, z ~ N( a @ mu + b + w @ (z - A mu - c), v ) with A, c the design
    of the history.  Requires t_target >= every history time.
    """
    tau2 = params.tau ** 2
    fixed = params.gamma_c * cov.c + params.gamma_d * cov.d
    a_vec = np.array([1.0, t_target])
    b = fixed * t_target + params.gamma_a * aint_target
    de = design_expansion_like(params, cov, t_hist, a_path)
    cyz = tau2 * np.minimum(t_hist, t_target)
    try:
        cf = cho_factor(de.sigma_cond, lower=True)
        w = cho_solve(cf, cyz)
    except (LinAlgError, ValueError):
        from scipy.linalg import pinvh
        w = pinvh(de.sigma_cond) @ cyz
    v = max(tau2 * t_target - float(cyz @ w), 0.0)
    return a_vec, b, w, v, de


def design_expansion_like(params, cov, t_hist, a_path) -> DesignExpansion:
    t = np.asarray(t_hist, dtype=float)
    a_mat = np.column_stack([np.ones(t.size), t])
    fixed = params.gamma_c * cov.c + params.gamma_d * cov.d
    c_vec = fixed * t + params.gamma_a * treatment_integral(t, np.asarray(a_path))
    sigma = params.tau ** 2 * np.minimum.outer(t, t) + params.sigma_eps ** 2 * np.eye(t.size)
    return DesignExpansion(a_mat=a_mat, c_vec=c_vec, sigma_cond=sigma)


def predictive_next(post: PosteriorState, params: ModelParams, cov: SubjectCovariates,
                    schedule: VisitSchedule, j: int, z_bar, a_path, a_hyp: int) -> tuple[float, float]:
    """Gaussian predictive (mean, variance) of the latent marker at visit j+1.

    Conditions jointly on the observations and integrates the current
    posterior over the effects; ``a_hyp`` is the action held on [t_j, t_{j+1}).
    """
    t = schedule.times[: j + 1]
    z = np.atleast_1d(np.asarray(z_bar, dtype=float))
    a_path = np.asarray(a_path)
    t_next = schedule.times[j + 1]
    aint = treatment_integral(t, a_path)[-1] + a_hyp * (t_next - t[-1])
    a_vec, b, w, v, de = _target_given_history(params, cov, t, a_path, t_next, aint)
    g = a_vec - de.a_mat.T @ w
    mean = float(a_vec @ post.nu + b + w @ (z - de.a_mat @ post.nu - de.c_vec))
    var = v + float(g @ post.omega @ g)
    return mean, var


class SimulatedEnvironment:
    """True-dynamics subject that reveals observations as decisions arrive."""

    def __init__(self, params: ModelParams, cov: SubjectCovariates,
                 schedule: VisitSchedule, seed: int, replicate: int = 0):
        self.params, self.schedule = params, schedule
        self._rng_diff = stream(seed, replicate, DIFFUSION)
        self._rng_meas = stream(seed, replicate, MEASUREMENT)
        rng_eff = stream(seed, replicate, EFFECTS)
        if cov.effects_known:
            mu0i, mu1i = float(cov.mu0i), float(cov.mu1i)
        else:
            d = rng_eff.standard_normal(2)
            mu0i = params.mu0 + params.sigma_mu0 * d[0]
            mu1i = params.mu1 + params.sigma_mu1 * d[1]
        self.cov = SubjectCovariates(c=cov.c, d=cov.d, mu0i=mu0i, mu1i=mu1i)
        self._slope0 = mu1i + params.gamma_c * cov.c + params.gamma_d * cov.d
        self.y = [mu0i]
        self.z = [mu0i + params.sigma_eps * self._rng_meas.standard_normal()]
        self.a = []

    def reset(self) -> float:
        return self.z[0]

    def step(self, a_j: int) -> Optional[float]:
        j = len(self.a)
        if j >= self.schedule.horizon:
            return None
        dt = self.schedule.times[j + 1] - self.schedule.times[j]
        drift = self._slope0 + self.params.gamma_a * a_j
        y_next = self.y[-1] + drift * dt + self.params.tau * np.sqrt(dt) * self._rng_diff.standard_normal()
        z_next = y_next + self.params.sigma_eps * self._rng_meas.standard_normal()
        self.a.append(int(a_j))
        self.y.append(float(y_next))
        self.z.append(float(z_next))
        return float(z_next)

    def trajectory(self) -> Trajectory:
        a = self.a + [0] * (len(self.y) - len(self.a))
        return Trajectory(np.array(self.y), np.array(self.z), np.array(a))


class RecordedEnvironment:
    """Replays a recorded observation path; decisions do not alter it."""

    def __init__(self, z_path):
        self._z = [float(v) for v in np.atleast_1d(z_path)]
        self._cursor = 0

    def reset(self) -> float:
        self._cursor = 0
        return self._z[0]

    def step(self, a_j: int) -> Optional[float]:
        self._cursor += 1
        if self._cursor >= len(self._z):
            return None
        return self._z[self._cursor]


@dataclass(frozen=True)
class DtdrStep:
    j: int
    time: float
    beta_star: float
    decision: int
    z: float
    posterior: PosteriorState


@dataclass
class DtdrTrace:
    steps: list
    truncated: bool
    environment: object

    def realized_loss(self, spec: RiskSpec) -> tuple[float, float]:
        """Loss of the realized episode (needs a simulated environment)."""
        from .risk import loss
        return loss(self.environment.trajectory(), spec)


def trace_to_frame(trace: DtdrTrace) -> pd.DataFrame:
    rows = []
    for s in trace.steps:
        rows.append({
            "visit": s.j, "time": s.time, "beta_star": s.beta_star,
            "decision": s.decision, "z": s.z,
            "nu0": s.posterior.nu[0], "nu1": s.posterior.nu[1],
            "omega00": s.posterior.omega[0, 0],
            "omega01": s.posterior.omega[0, 1],
            "omega11": s.posterior.omega[1, 1],
        })
    return pd.DataFrame(rows)


def dtdr_run(prior: PosteriorState, params: ModelParams, cov: SubjectCovariates,
             schedule: VisitSchedule, spec: RiskSpec, search: SearchConfig,
             environment, seed: int) -> DtdrTrace:
    """Dynamic threshold rule: re-optimize the threshold at every visit.

    At each visit the posterior over the effects is recomputed from all
    observations so far (with the realized treatment path in the offsets),
    the full-horizon threshold risk is re-optimized with replicates drawn
    from that posterior, and the resulting threshold decides the action.
    Accumulating information moves the threshold only through the posterior;
    with a point-mass prior every visit solves the same problem and the rule
    collapses to the optimal constant threshold.  An exhausted environment
    truncates the trace.
    """
    if spec.kind.startswith("terminal"):
        raise ValueError("the adaptive rule optimizes additive risks")
    J = schedule.horizon
    z_bar = [float(environment.reset())]
    a_path: list[int] = []
    steps: list[DtdrStep] = []
    truncated = False
    plain_cov = SubjectCovariates(c=cov.c, d=cov.d)
    for j in range(J + 1):
        de = design_expansion(schedule, j, cov, np.asarray(a_path), params)
        post = posterior_update(prior, np.asarray(z_bar), de)
        sub_seed = int(np.random.SeedSequence(seed, spawn_key=(j,)).generate_state(1)[0])
        objective = make_threshold_objective(
            params, schedule, spec, replace(search, seed=sub_seed),
            cov=plain_cov, posterior=post)
        beta = optimize_threshold(objective, replace(search, seed=sub_seed)).beta
        a_j = int(z_bar[j] > beta)
        steps.append(DtdrStep(j=j, time=float(schedule.times[j]), beta_star=float(beta),
                              decision=a_j, z=z_bar[j], posterior=post))
        a_path.append(a_j)
        if j < J:
            z_next = environment.step(a_j)
            if z_next is None:
                truncated = True
                break
            z_bar.append(float(z_next))
    return DtdrTrace(steps=steps, truncated=truncated, environment=environment)
