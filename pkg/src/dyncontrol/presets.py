"""Reference simulation-study setting used by the replication commands.

A biomarker resembling log10 HIV viral load rises without treatment and is
pushed down by an antiretroviral; the containment level corresponds to a
50 copies/mL detection limit.  Treatment in the observational generator is
assigned preferentially at high observed marker values.
"""

from __future__ import annotations

from .model import ModelParams, VisitSchedule
from .strategies import ObservationalAssignmentModel

__all__ = [
    "reference_params",
    "reference_assignment",
    "reference_schedule",
    "PATIENT_PROFILES",
    "OMEGA_GRID",
    "ETA",
]

#: exceedance level of the containment loss (log10 of the detection limit)
ETA = 1.7

#: the four (D, C) patient profiles of the strategy-optimization tables
PATIENT_PROFILES = ((1, 0.5), (1, -0.5), (0, 0.5), (0, -0.5))

#: treatment-cost weights swept in the strategy-optimization tables
OMEGA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.5, 3.0)


def reference_params(sigma_mu0: float = 1.0, sigma_mu1: float = 0.5) -> ModelParams:
    """Generator parameters of the simulation study.

    The random-effect SDs depend on the experiment: estimation and
    posterior-uncertainty runs use (1.0, 0.5); known-parameter strategy runs
    set both to zero.
    """
    return ModelParams(mu0=-2.0, mu1=1.0, gamma_c=0.3, gamma_d=1.0, gamma_a=-3.0,
                       tau=2.0, sigma_eps=0.5, sigma_mu0=sigma_mu0, sigma_mu1=sigma_mu1)


def reference_assignment() -> ObservationalAssignmentModel:
    """Observational treatment-assignment law (about 2/3 of patient-time treated)."""
    return ObservationalAssignmentModel(alpha0=-3.0, alpha_z=2.0, alpha_c=0.3, alpha_d=0.5)


def reference_schedule(n_intervals: int = 10) -> VisitSchedule:
    """Unit-spaced visits t_j = j, j = 0..J."""
    return VisitSchedule.regular(n_intervals)
