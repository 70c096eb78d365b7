"""Forward simulation of trajectories and observational cohorts.

Random-stream discipline: every draw comes from a generator keyed by
``(master seed, replicate-chunk index, purpose)`` through ``SeedSequence``
spawn keys.  Purposes are fixed integers (initial condition, diffusion,
measurement, strategy, assignment, effects, population), so a replicate's
noise depends only on the master seed and its index, and strategies that
ignore randomness leave the trajectory noise untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import json
import numpy as np
import pandas as pd

from .errors import ConfigError
from .model import (ModelParams, SubjectCovariates, Trajectory, VisitSchedule,
                    drift)
from .strategies import (ObservationalAssignmentModel, ObservedHistory,
                         StrategySpec, decide, strategy_to_json)

__all__ = [
    "PopulationSpec",
    "Cohort",
    "stream",
    "simulate_subject",
    "simulate_cohort",
    "write_cohort_csv",
    "read_cohort_csv",
]

# purpose tags for named substreams
INITIAL, DIFFUSION, MEASUREMENT, STRATEGY, ASSIGNMENT, EFFECTS, POPULATION = range(7)

#: replicates per vectorized block; fixed so that replicate k always maps to
#: (chunk k // CHUNK, row k % CHUNK) independent of worker count.
CHUNK = 16384


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the substream addressed by ``key`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class PopulationSpec:
    """Cohort size and covariate laws: C ~ N(0,1), D ~ Bernoulli(d_prob)."""

    n: int
    params: ModelParams
    d_prob: float = 0.6

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("population size must be >= 1")
        if not 0.0 <= self.d_prob <= 1.0:
            raise ConfigError("d_prob must lie in [0, 1]")


@dataclass(eq=False)
class Cohort:
    """Array-backed collection of simulated subjects sharing one schedule."""

    schedule: VisitSchedule
    c: np.ndarray
    d: np.ndarray
    a: np.ndarray
    z: np.ndarray
    y: Optional[np.ndarray] = None
    mu0i: Optional[np.ndarray] = None
    mu1i: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def subjects(self) -> Iterator[tuple[SubjectCovariates, VisitSchedule, Trajectory]]:
        lat = self.y if self.y is not None else np.full_like(self.z, np.nan)
        for i in range(self.n):
            cov = SubjectCovariates(
                c=float(self.c[i]), d=int(self.d[i]),
                mu0i=None if self.mu0i is None else float(self.mu0i[i]),
                mu1i=None if self.mu1i is None else float(self.mu1i[i]),
            )
            yield cov, self.schedule, Trajectory(lat[i], self.z[i], self.a[i])

    def fraction_patient_time_treated(self) -> float:
        """Fraction of follow-up time spent on treatment, averaged over subjects."""
        widths = self.schedule.intervals
        span = float(self.schedule.times[-1] - self.schedule.times[0])
        return float(np.mean(self.a[:, :-1] @ widths) / span)


def _named_normals(seed: int, chunk: int, purpose: int, shape) -> np.ndarray:
    return stream(seed, chunk, purpose).standard_normal(shape)


def _named_uniforms(seed: int, chunk: int, purpose: int, shape) -> np.ndarray:
    return stream(seed, chunk, purpose).random(shape)


def simulate_subject(params: ModelParams, cov: SubjectCovariates,
                     schedule: VisitSchedule, strategy: StrategySpec,
                     seed: int, replicate: int = 0) -> Trajectory:
    """Simulate one subject under a strategy.

    The initial level is the subject's realized value when known, otherwise a
    draw from the population law; likewise for the slope.  At every visit the
    strategy decides from the observed history, then the latent marker and
    its observation advance to the next visit.
    """
    J = schedule.horizon
    rng_diff = stream(seed, replicate, DIFFUSION)
    rng_meas = stream(seed, replicate, MEASUREMENT)
    rng_strat = stream(seed, replicate, STRATEGY)
    rng_eff = stream(seed, replicate, EFFECTS)

    if cov.effects_known:
        mu0i, mu1i = float(cov.mu0i), float(cov.mu1i)
    else:
        draw = rng_eff.standard_normal(2)
        mu0i = params.mu0 + params.sigma_mu0 * draw[0]
        mu1i = params.mu1 + params.sigma_mu1 * draw[1]
    realized = SubjectCovariates(c=cov.c, d=cov.d, mu0i=mu0i, mu1i=mu1i)

    y = np.empty(J + 1)
    z = np.empty(J + 1)
    a = np.zeros(J + 1, dtype=int)
    y[0] = mu0i
    z[0] = y[0] + params.sigma_eps * rng_meas.standard_normal()

    for j in range(J + 1):
        hist = ObservedHistory(schedule, j, z[: j + 1], a[:j], cov)
        a[j] = decide(strategy, hist, params, rng_strat)
        if j < J:
            dt = schedule.times[j + 1] - schedule.times[j]
            mean = y[j] + drift(params, realized, int(a[j])) * dt
            y[j + 1] = mean + params.tau * np.sqrt(dt) * rng_diff.standard_normal()
            z[j + 1] = y[j + 1] + params.sigma_eps * rng_meas.standard_normal()
    return Trajectory(y, z, a)


def _vector_decisions(strategy, z_now, c, d, a_prev, uniforms):
    """Vectorized decision for the history-light strategy families."""
    from scipy.special import expit
    from . import strategies as st

    if isinstance(strategy, st.NeverTreat):
        return np.zeros_like(z_now, dtype=int)
    if isinstance(strategy, st.AlwaysTreat):
        return np.ones_like(z_now, dtype=int)
    if isinstance(strategy, st.Randomized):
        return (uniforms < strategy.p).astype(int)
    if isinstance(strategy, st.LogisticStochastic):
        logit = (strategy.alpha0 + strategy.alpha_z * z_now
                 + strategy.alpha_c * c + strategy.alpha_a * a_prev)
        return (uniforms < expit(logit)).astype(int)
    if isinstance(strategy, st.DeterministicThreshold):
        return (z_now > strategy.beta0 + strategy.beta_c * c).astype(int)
    if isinstance(strategy, st.PersonalizedThreshold):
        return (z_now > strategy.beta).astype(int)
    return None


def simulate_cohort(pop: PopulationSpec,
                    assignment: Union[ObservationalAssignmentModel, StrategySpec],
                    schedule: VisitSchedule, seed: int) -> Cohort:
    """Generate an observational (or strategy-driven) cohort.

    Covariates are drawn from the population law and subject effects from
    their normal distributions.  Under an assignment model the logistic law
    acts as an initiation hazard at each post-baseline visit and treatment is
    absorbing (once initiated it is never interrupted, as in routine care);
    nobody is treated on the first interval.  Under a strategy the rule is
    applied afresh at every visit and treatment may stop.
    """
    params = pop.params
    J = schedule.horizon
    widths = schedule.intervals
    n = pop.n

    observational = isinstance(assignment, ObservationalAssignmentModel)

    c_all = np.empty(n)
    d_all = np.empty(n, dtype=int)
    mu0 = np.empty(n)
    mu1 = np.empty(n)
    y = np.empty((n, J + 1))
    z = np.empty((n, J + 1))
    a = np.zeros((n, J + 1), dtype=int)

    for lo in range(0, n, CHUNK):
        hi = min(lo + CHUNK, n)
        m = hi - lo
        chunk = lo // CHUNK
        pop_draws = stream(seed, chunk, POPULATION)
        c_all[lo:hi] = pop_draws.standard_normal(m)
        d_all[lo:hi] = (pop_draws.random(m) < pop.d_prob).astype(int)
        eff = _named_normals(seed, chunk, EFFECTS, (m, 2))
        mu0[lo:hi] = params.mu0 + params.sigma_mu0 * eff[:, 0]
        mu1[lo:hi] = params.mu1 + params.sigma_mu1 * eff[:, 1]
        diff = _named_normals(seed, chunk, DIFFUSION, (m, J))
        meas = _named_normals(seed, chunk, MEASUREMENT, (m, J + 1))
        dec = _named_uniforms(
            seed, chunk, ASSIGNMENT if observational else STRATEGY, (m, J + 1))

        cb, db = c_all[lo:hi], d_all[lo:hi]
        slope0 = mu1[lo:hi] + params.gamma_c * cb + params.gamma_d * db
        yb = np.empty((m, J + 1))
        zb = np.empty((m, J + 1))
        ab = np.zeros((m, J + 1), dtype=int)
        yb[:, 0] = mu0[lo:hi]
        zb[:, 0] = yb[:, 0] + params.sigma_eps * meas[:, 0]
        for j in range(J + 1):
            if observational:
                if j >= 1:
                    p = assignment.probability(zb[:, j], cb, db)
                    started = (dec[:, j] < p).astype(int)
                    ab[:, j] = np.maximum(ab[:, j - 1], started)
            else:
                got = _vector_decisions(assignment, zb[:, j], cb, db,
                                        ab[:, j - 1] if j else np.zeros(m, dtype=int),
                                        dec[:, j])
                if got is None:
                    raise ConfigError(
                        "containment strategies need the scalar simulator; "
                        "use simulate_subject per subject")
                ab[:, j] = got
            if j < J:
                dt = widths[j]
                mean = yb[:, j] + (slope0 + params.gamma_a * ab[:, j]) * dt
                yb[:, j + 1] = mean + params.tau * np.sqrt(dt) * diff[:, j]
                zb[:, j + 1] = yb[:, j + 1] + params.sigma_eps * meas[:, j + 1]
        y[lo:hi], z[lo:hi], a[lo:hi] = yb, zb, ab

    meta = {
        "seed": seed,
        "n": n,
        "d_prob": pop.d_prob,
        "params": vars(params).copy(),
        "assignment": (vars(assignment).copy() if observational
                       else strategy_to_json(assignment)),
        "times": schedule.times.tolist(),
    }
    return Cohort(schedule=schedule, c=c_all, d=d_all, a=a, z=z, y=y,
                  mu0i=mu0, mu1i=mu1, meta=meta)


def write_cohort_csv(cohort: Cohort, path, meta_path=None, header_note: str = "") -> None:
    """Write the cohort as long-format CSV plus a JSON sidecar of metadata."""
    J1 = cohort.schedule.n_visits
    n = cohort.n
    df = pd.DataFrame({
        "subject_id": np.repeat(np.arange(n), J1),
        "visit_index": np.tile(np.arange(J1), n),
        "time": np.tile(cohort.schedule.times, n),
        "C": np.repeat(cohort.c, J1),
        "D": np.repeat(cohort.d, J1),
        "A": cohort.a.ravel(),
        "Z": cohort.z.ravel(),
    })
    with open(path, "w") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        df.to_csv(fh, index=False)
    if meta_path is not None:
        with open(meta_path, "w") as fh:
            json.dump(cohort.meta, fh, indent=2, sort_keys=True)


def read_cohort_csv(path) -> Cohort:
    """Load a cohort CSV; rows may arrive in any order."""
    df = pd.read_csv(path, comment="#")
    needed = {"subject_id", "visit_index", "time", "C", "D", "A", "Z"}
    missing = needed - set(df.columns)
    if missing:
        raise ConfigError(f"cohort CSV missing columns: {sorted(missing)}")
    df = df.sort_values(["subject_id", "time"]).reset_index(drop=True)
    ids = df["subject_id"].to_numpy()
    uniq, first = np.unique(ids, return_index=True)
    n = uniq.size
    counts = np.diff(np.append(first, ids.size))
    if not np.all(counts == counts[0]):
        raise ConfigError("all subjects must share the same number of visits")
    J1 = int(counts[0])
    times = df["time"].to_numpy()[:J1]
    schedule = VisitSchedule(times)
    shape = (n, J1)
    if not np.allclose(df["time"].to_numpy().reshape(shape), times[None, :]):
        raise ConfigError("subjects must share the visit schedule")
    return Cohort(
        schedule=schedule,
        c=df["C"].to_numpy().reshape(shape)[:, 0].astype(float),
        d=df["D"].to_numpy().reshape(shape)[:, 0].astype(int),
        a=df["A"].to_numpy().reshape(shape).astype(int),
        z=df["Z"].to_numpy().reshape(shape).astype(float),
        meta={"source": str(path)},
    )
