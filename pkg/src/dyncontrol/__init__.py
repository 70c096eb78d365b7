"""Simulation, estimation and optimal-strategy search for a treated
longitudinal biomarker driven by linear-drift Brownian dynamics."""

__version__ = "0.1.0"

from .errors import (AlignmentError, ConfigError, ContractError,
                     DegenerateModelError, DynControlError,
                     InvalidPosteriorError, ResolutionError, ScheduleError)
from .model import (ModelParams, SubjectCovariates, Trajectory, VisitSchedule,
                    cumulative_treatment, drift, transition, treatment_integral)
from .strategies import (AlwaysTreat, DeterministicThreshold,
                         LogisticStochastic, NeverTreat,
                         ObservationalAssignmentModel, ObservedHistory,
                         ParamPredictionContainment, PersonalizedThreshold,
                         PredictionContainment, Randomized, StrategySpec,
                         assign_observational, decide, exceedance_probability,
                         strategy_from_json, strategy_to_json)
from .simulate import (Cohort, PopulationSpec, read_cohort_csv,
                       simulate_cohort, simulate_subject, write_cohort_csv)
from .risk import (RiskEstimate, RiskEvaluator, RiskSpec, contrast,
                   estimate_risk_skp, estimate_risk_spdp, loss)
from .optimize import (SearchConfig, ThresholdResult, golden_section,
                       make_threshold_objective, optimize_threshold,
                       sweep_omega)
from .mle import (FittedModel, PARAM_NAMES, bootstrap_se, fit_ml,
                  log_likelihood, marginal_covariance)
from .adaptive import (DesignExpansion, DtdrStep, DtdrTrace, PosteriorState,
                       RecordedEnvironment, SimulatedEnvironment,
                       design_expansion, dtdr_run, posterior_update)
from .oracle import (GridDensity, closed_form_fixed_regime, oracle_risk,
                     propagate_recurrence, risk_integral)
from . import presets
