"""Latent biomarker dynamics on a visit grid.

Between visits the marker follows a linear-drift Brownian motion: over an
interval of length dt with the treatment indicator held at a, the increment
is Gaussian with mean ``(subject slope + covariate effects + gamma_a * a) * dt``
and variance ``tau**2 * dt``.  Treatment is right-continuous piecewise
constant: the decision taken at a visit applies until the next visit.
Observations add independent Gaussian noise to the latent value at each
visit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AlignmentError, ScheduleError

__all__ = [
    "ModelParams",
    "SubjectCovariates",
    "VisitSchedule",
    "Trajectory",
    "drift",
    "transition",
    "cumulative_treatment",
    "treatment_integral",
]


@dataclass(frozen=True)
class ModelParams:
    """Population-level parameters of the marker law.

    Parameters
    ----------
    mu0, mu1 : float
        Mean initial level and mean baseline slope.
    gamma_c, gamma_d : float
        Slope effects of the continuous covariate (per unit) and of the
        binary covariate.
    gamma_a : float
        Slope effect of treatment; negative for a beneficial treatment.
    tau : float
        Brownian diffusion scale, strictly positive.
    sigma_eps : float
        Observation-noise standard deviation.
    sigma_mu0, sigma_mu1 : float
        Standard deviations of the subject-level random initial level and
        random slope.  Zero means the corresponding effect is common to all
        subjects.
    """

    mu0: float
    mu1: float
    gamma_c: float
    gamma_d: float
    gamma_a: float
    tau: float
    sigma_eps: float
    sigma_mu0: float = 0.0
    sigma_mu1: float = 0.0

    def __post_init__(self):
        vals = (self.mu0, self.mu1, self.gamma_c, self.gamma_d, self.gamma_a,
                self.tau, self.sigma_eps, self.sigma_mu0, self.sigma_mu1)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("all ModelParams fields must be finite")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        for name in ("sigma_eps", "sigma_mu0", "sigma_mu1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class SubjectCovariates:
    """One subject's covariates and, when known, realized random effects.

    ``mu0i``/``mu1i`` are the subject's realized initial level and slope.
    They are set when the individual parameters are treated as known and
    left ``None`` when only their population distribution is available.
    """

    c: float
    d: int
    mu0i: Optional[float] = None
    mu1i: Optional[float] = None

    def __post_init__(self):
        if self.d not in (0, 1):
            raise ValueError("d must be 0 or 1")
        if not np.isfinite(self.c):
            raise ValueError("c must be finite")

    @property
    def effects_known(self) -> bool:
        return self.mu0i is not None and self.mu1i is not None


@dataclass(frozen=True, eq=False)
class VisitSchedule:
    """Strictly increasing visit times t_0 < t_1 < ... < t_J."""

    times: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise ScheduleError("times must be a non-empty 1-d sequence")
        if t[0] < 0:
            raise ScheduleError("t_0 must be >= 0")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ScheduleError("times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def regular(cls, n_intervals: int, dt: float = 1.0, t0: float = 0.0) -> "VisitSchedule":
        if n_intervals < 0 or dt <= 0:
            raise ScheduleError("need n_intervals >= 0 and dt > 0")
        return cls(t0 + dt * np.arange(n_intervals + 1))

    @property
    def n_visits(self) -> int:
        return self.times.size

    @property
    def horizon(self) -> int:
        """Number of post-baseline visits J."""
        return self.times.size - 1

    @property
    def intervals(self) -> np.ndarray:
        return np.diff(self.times)

    def __eq__(self, other):
        return isinstance(other, VisitSchedule) and np.array_equal(self.times, other.times)

    def __len__(self):
        return self.times.size


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One subject's latent path, observations and treatment path on a grid.

    All three arrays have length J+1 and align with the visit schedule; the
    treatment value at index j is the decision taken at t_j, in force on
    [t_j, t_{j+1}).
    """

    y: np.ndarray
    z: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        z = np.array(self.z, dtype=float)
        a = np.array(self.a, dtype=int)
        if not (y.shape == z.shape == a.shape) or y.ndim != 1:
            raise AlignmentError("y, z, a must be 1-d arrays of equal length")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("treatment indicators must be 0 or 1")
        for name, arr in (("y", y), ("z", z), ("a", a)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.y.size


def drift(params: ModelParams, cov: SubjectCovariates, a: int) -> float:
    """Instantaneous slope of the marker under treatment indicator ``a``.

    Uses the subject's realized slope when it is known, the population mean
    slope otherwise.
    """
    mu1 = cov.mu1i if cov.mu1i is not None else params.mu1
    return mu1 + params.gamma_c * cov.c + params.gamma_d * cov.d + params.gamma_a * a


def transition(y_now: float, dt: float, a: int, params: ModelParams,
               cov: SubjectCovariates) -> tuple[float, float]:
    """Exact one-step law of the marker: returns (mean, variance).

    The conditional law of Y at the next visit given the current value is
    Gaussian with mean ``y_now + drift * dt`` and variance ``tau**2 * dt``.
    """
    if dt <= 0:
        raise ScheduleError("dt must be > 0")
    return y_now + drift(params, cov, a) * dt, params.tau ** 2 * dt


def cumulative_treatment(schedule: VisitSchedule, a: np.ndarray) -> float:
    """Total time on treatment over [t_0, t_J], treatment constant per interval."""
    a = np.asarray(a)
    if a.shape != (schedule.n_visits,):
        raise AlignmentError("treatment path must have one value per visit")
    if schedule.n_visits == 1:
        return 0.0
    return float(np.sum(a[:-1] * schedule.intervals))


def treatment_integral(times: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Integral of the treatment path from t_0 to each visit time.

    ``a`` may be shorter than ``times``; decisions beyond its length are
    taken as 0 (useful for partial histories).  Returns one value per entry
    of ``times``.
    """
    times = np.asarray(times, dtype=float)
    a = np.asarray(a, dtype=float)
    out = np.zeros_like(times)
    if times.size <= 1:
        return out
    widths = np.diff(times)
    held = np.zeros(times.size - 1)
    n = min(a.size, held.size)
    held[:n] = a[:n]
    out[1:] = np.cumsum(held * widths)
    return out
