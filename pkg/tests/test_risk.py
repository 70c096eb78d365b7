import numpy as np
import pytest

from dyncontrol import (AlwaysTreat, ContractError, ModelParams, NeverTreat,
                        PersonalizedThreshold, PopulationSpec,
                        PredictionContainment, RiskEvaluator, RiskSpec,
                        SubjectCovariates, Trajectory, contrast,
                        estimate_risk_skp, estimate_risk_spdp,
                        exceedance_probability, loss, presets)
from dyncontrol.adaptive import PosteriorState
from dyncontrol.strategies import ObservedHistory

PARAMS = presets.reference_params(0.0, 0.0)
SCHED = presets.reference_schedule()
COV = SubjectCovariates(c=0.5, d=0, mu0i=-2.0, mu1i=1.0)
SPEC = RiskSpec(kind="additive-exceedance", eta=1.7, omega=0.5)


def test_loss_zero_when_low_and_untreated():
    traj = Trajectory(np.full(11, -5.0), np.full(11, -5.0), np.zeros(11, int))
    assert loss(traj, SPEC) == (0.0, 0.0)


def test_loss_all_treated_no_exceedance():
    # interior visits 1..9 each contribute omega/J
    traj = Trajectory(np.full(11, -5.0), np.full(11, -5.0), np.ones(11, int))
    marker, treat = loss(traj, SPEC)
    assert marker == 0.0
    assert treat == pytest.approx(0.5 * 9 / 10)


def test_loss_terminal_level():
    y = np.linspace(-2, 9.5, 11)
    traj = Trajectory(y, y, np.zeros(11, int))
    marker, treat = loss(traj, RiskSpec(kind="terminal-level"))
    assert marker == pytest.approx(9.5)
    assert treat == 0.0


def test_loss_counts_interior_visits_only():
    y = np.full(11, -5.0)
    y[0] = 10.0   # baseline exceedance never counts
    y[10] = 10.0  # terminal exceedance not in the additive window
    traj = Trajectory(y, y, np.zeros(11, int))
    marker, _ = loss(traj, SPEC)
    assert marker == 0.0
    y[5] = 10.0
    marker, _ = loss(Trajectory(y, y, np.zeros(11, int)), SPEC)
    assert marker == pytest.approx(0.1)


def test_estimate_decomposition_and_se():
    est = estimate_risk_skp(PARAMS, COV, SCHED, PersonalizedThreshold(-2.362),
                            SPEC, 5000, 42)
    assert est.total == pytest.approx(est.cost_marker + est.cost_treatment, abs=1e-12)
    assert est.mc_se > 0 and est.k == 5000


def test_reference_row_reproduction():
    est = estimate_risk_skp(PARAMS, COV, SCHED, PersonalizedThreshold(-2.362),
                            SPEC, 40000, 42)
    assert est.total == pytest.approx(0.193, abs=0.012)
    assert est.cost_marker == pytest.approx(0.024, abs=0.008)
    assert est.fraction_treated == pytest.approx(0.376, abs=0.02)


def test_never_treat_has_zero_treatment_cost():
    est = estimate_risk_skp(PARAMS, COV, SCHED, NeverTreat(), SPEC, 2000, 1)
    assert est.cost_treatment == 0.0
    assert est.fraction_treated == 0.0


def test_inert_treatment_identical_marker_cost():
    p0 = ModelParams(mu0=-2.0, mu1=1.0, gamma_c=0.3, gamma_d=1.0, gamma_a=0.0,
                     tau=2.0, sigma_eps=0.5)
    a = estimate_risk_skp(p0, COV, SCHED, NeverTreat(), SPEC, 4000, 7)
    b = estimate_risk_skp(p0, COV, SCHED, AlwaysTreat(), SPEC, 4000, 7)
    assert a.cost_marker == b.cost_marker


def test_worker_count_does_not_change_results():
    est1 = estimate_risk_skp(PARAMS, COV, SCHED, PersonalizedThreshold(-1.0),
                             SPEC, 40000, 5, workers=1)
    est4 = estimate_risk_skp(PARAMS, COV, SCHED, PersonalizedThreshold(-1.0),
                             SPEC, 40000, 5, workers=4)
    assert est1 == est4


def test_total_affine_in_omega():
    base = RiskSpec(kind="additive-exceedance", eta=1.7, omega=0.0)
    mid = RiskSpec(kind="additive-exceedance", eta=1.7, omega=1.0)
    top = RiskSpec(kind="additive-exceedance", eta=1.7, omega=2.0)
    strat = PersonalizedThreshold(-2.0)
    r0 = estimate_risk_skp(PARAMS, COV, SCHED, strat, base, 4000, 3)
    r1 = estimate_risk_skp(PARAMS, COV, SCHED, strat, mid, 4000, 3)
    r2 = estimate_risk_skp(PARAMS, COV, SCHED, strat, top, 4000, 3)
    assert r2.total - r1.total == pytest.approx(r1.total - r0.total, abs=1e-12)
    assert r1.total >= r0.total


def test_spdp_degenerate_posterior_matches_skp():
    post = PosteriorState(nu=[-2.0, 1.0], omega=np.zeros((2, 2)))
    skp = estimate_risk_skp(PARAMS, COV, SCHED, PersonalizedThreshold(-2.0),
                            SPEC, 20000, 11)
    spdp = estimate_risk_spdp(post, PARAMS,
                              SubjectCovariates(c=0.5, d=0),
                              SCHED, PersonalizedThreshold(-2.0), SPEC, 20000, 12)
    se = np.hypot(skp.mc_se, spdp.mc_se)
    assert abs(skp.total - spdp.total) <= 3 * se


def test_spdp_reference_row():
    post = PosteriorState(nu=[-2.0, 1.0], omega=np.diag([1.0, 0.25]))
    params = presets.reference_params(1.0, 0.5)
    est = estimate_risk_spdp(post, params, SubjectCovariates(c=0.5, d=0),
                             SCHED, PersonalizedThreshold(-2.371), SPEC, 40000, 13)
    assert est.total == pytest.approx(0.205, abs=0.02)


def test_spdp_wider_posterior_increases_se():
    narrow = PosteriorState(nu=[-2.0, 1.0], omega=np.diag([1.0, 0.25]))
    wide = PosteriorState(nu=[-2.0, 1.0], omega=np.diag([1.0, 4.0]))
    params = presets.reference_params(1.0, 0.5)
    cov = SubjectCovariates(c=0.5, d=0)
    a = estimate_risk_spdp(narrow, params, cov, SCHED,
                           PersonalizedThreshold(-2.0), SPEC, 20000, 4)
    b = estimate_risk_spdp(wide, params, cov, SCHED,
                           PersonalizedThreshold(-2.0), SPEC, 20000, 4)
    assert b.mc_se > a.mc_se


def test_marginal_risk_over_population():
    pop = PopulationSpec(n=1, params=presets.reference_params(1.0, 0.5))
    est = estimate_risk_skp(presets.reference_params(1.0, 0.5), None, SCHED,
                            NeverTreat(), SPEC, 20000, 6, population=pop)
    # marginal never-treat risk mixes the four profiles and the effect laws
    assert 0.3 < est.total < 0.8


def test_contrast_basics():
    a = estimate_risk_skp(PARAMS, COV, SCHED, AlwaysTreat(), SPEC, 2000, 3)
    b = estimate_risk_skp(PARAMS, COV, SCHED, AlwaysTreat(), SPEC, 2000, 3)
    eff, se = contrast(a, b)
    assert eff == 0.0
    other = estimate_risk_skp(PARAMS, COV, SCHED, AlwaysTreat(),
                              RiskSpec(kind="terminal-level"), 2000, 3)
    with pytest.raises(ContractError):
        contrast(a, other)


def test_crn_evaluator_deterministic():
    ev1 = RiskEvaluator(PARAMS, SCHED, SPEC, 5000, 17, cov=COV)
    ev2 = RiskEvaluator(PARAMS, SCHED, SPEC, 5000, 17, cov=COV)
    for beta in (-3.0, 0.0, 5.0):
        assert ev1(PersonalizedThreshold(beta)) == ev2(PersonalizedThreshold(beta))


def test_containment_filter_matches_scalar_predictive():
    # the engine's Kalman predictive equals the joint-conditioning result
    params = presets.reference_params(1.0, 0.5)
    cov = SubjectCovariates(c=0.5, d=0)
    strat = PredictionContainment(eta=1.7, kappa=0.05)
    est_small = estimate_risk_skp(params, cov, SCHED, strat, SPEC, 200, 21)
    assert np.isfinite(est_small.total)
    # cross-check decisions on one trajectory via the scalar machinery
    from dyncontrol import simulate_subject
    traj = simulate_subject(params, cov, SCHED, strat, seed=21, replicate=0)
    hist = ObservedHistory(SCHED, 0, traj.z[:1], np.zeros(0, int), cov)
    p = exceedance_probability(hist, params, 1.0, 1.7, 0)
    assert traj.a[0] == int(p > 0.05)
