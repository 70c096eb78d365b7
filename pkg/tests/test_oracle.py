import numpy as np
import pytest
from scipy.stats import norm

from dyncontrol import (AlwaysTreat, LogisticStochastic, NeverTreat,
                        PersonalizedThreshold, PredictionContainment,
                        Randomized, ResolutionError, RiskSpec,
                        SubjectCovariates, VisitSchedule,
                        closed_form_fixed_regime, estimate_risk_skp,
                        oracle_risk, presets, propagate_recurrence)
from dyncontrol.oracle import initial_grid, risk_integral

PARAMS = presets.reference_params(0.0, 0.0)
COV = SubjectCovariates(c=0.5, d=0, mu0i=-2.0, mu1i=1.0)
SPEC = RiskSpec(kind="additive-exceedance", eta=1.7, omega=0.5)
SCHED2 = VisitSchedule(np.array([0.0, 1.0, 2.0]))
SCHED10 = presets.reference_schedule()


def test_never_treat_closed_form_value():
    # independent re-derivation of the interior-visit exceedance sum
    want = sum(norm.sf((1.7 - (-2.0 + 1.15 * j)) / (2.0 * np.sqrt(j)))
               for j in range(1, 10)) / 10.0
    got = closed_form_fixed_regime(PARAMS, COV, SCHED10, "never", SPEC)
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(0.5387, abs=5e-4)


def test_always_treat_cost_component():
    spec = RiskSpec(kind="additive-exceedance", eta=1.7, omega=1.0)
    lo = closed_form_fixed_regime(PARAMS, COV, SCHED10, "never", spec)
    hi = closed_form_fixed_regime(PARAMS, COV, SCHED10, "always", spec)
    zero_omega = RiskSpec(kind="additive-exceedance", eta=1.7, omega=0.0)
    hi0 = closed_form_fixed_regime(PARAMS, COV, SCHED10, "always", zero_omega)
    # treatment cost of the always regime: one unit per interior visit / J
    assert hi - hi0 == pytest.approx(9.0 / 10.0)
    assert lo == closed_form_fixed_regime(PARAMS, COV, SCHED10, "never", zero_omega)


def test_terminal_closed_forms():
    spec = RiskSpec(kind="terminal-level")
    assert closed_form_fixed_regime(PARAMS, COV, SCHED10, "never", spec) == pytest.approx(9.5)
    assert closed_form_fixed_regime(PARAMS, COV, SCHED10, "always", spec) == pytest.approx(-20.5)
    # symmetric exceedance case: mean at the threshold gives one half
    p = presets.reference_params(0.0, 0.0)
    cov = SubjectCovariates(c=0.0, d=0, mu0i=1.7, mu1i=-p.gamma_a)
    half = closed_form_fixed_regime(p, cov, SCHED10, "always",
                                    RiskSpec(kind="terminal-exceedance", eta=1.7))
    assert half == pytest.approx(0.5)


def test_marginal_closed_form_uses_effect_variances():
    params = presets.reference_params(1.0, 0.5)
    cov = SubjectCovariates(c=0.5, d=0)
    got = closed_form_fixed_regime(params, cov, SCHED10, "never", SPEC)
    want = sum(norm.sf((1.7 - (-2.0 + 1.15 * j)) /
                       np.sqrt(1.0 + 0.25 * j ** 2 + 4.0 * j))
               for j in range(1, 10)) / 10.0
    assert got == pytest.approx(want, abs=1e-12)


def test_closed_form_vs_monte_carlo():
    for regime, strat in (("never", NeverTreat()), ("always", AlwaysTreat())):
        cf = closed_form_fixed_regime(PARAMS, COV, SCHED10, regime, SPEC)
        mc = estimate_risk_skp(PARAMS, COV, SCHED10, strat, SPEC, 100_000, 314)
        assert abs(cf - mc.total) <= max(3 * mc.mc_se, 5e-4)


def test_grid_matches_closed_form_fixed_regimes():
    for sched in (SCHED2, VisitSchedule(np.array([0.0, 1.0, 2.0, 3.0]))):
        for regime, strat in (("never", NeverTreat()), ("always", AlwaysTreat())):
            cf = closed_form_fixed_regime(PARAMS, COV, sched, regime, SPEC)
            gr = oracle_risk(PARAMS, COV, sched, strat, SPEC)
            assert gr == pytest.approx(cf, abs=1e-4)


def test_grid_refinement_improves_fixed_regime():
    cf = closed_form_fixed_regime(PARAMS, COV, SCHED2, "never", SPEC)
    err = [abs(oracle_risk(PARAMS, COV, SCHED2, NeverTreat(), SPEC, ny=n) - cf)
           for n in (64, 128)]
    assert err[1] <= err[0] / 2.0


def test_mass_conservation_along_propagation():
    state = initial_grid(PARAMS, COV, SCHED10, PersonalizedThreshold(-1.0), SPEC)
    for _ in range(1, 4):
        state = propagate_recurrence(state, PersonalizedThreshold(-1.0), PARAMS,
                                     COV, SCHED10, SPEC)
        assert abs(state.total_mass() - 1.0) < 1e-6


def test_mass_drift_raises_resolution_error():
    state = initial_grid(PARAMS, COV, SCHED2, NeverTreat(), SPEC, ny=64)
    # sabotage the state to force a visible mass loss
    broken = type(state)(centers=state.centers, edges=state.edges,
                         mass=state.mass * 0.5, a_prev=state.a_prev,
                         j=state.j, acc_exceed=0.0, acc_level=0.0,
                         acc_treat=0.0, mass_error=0.0)
    with pytest.raises(ResolutionError):
        propagate_recurrence(broken, NeverTreat(), PARAMS, COV, SCHED2, SPEC)


def test_risk_integral_trivials():
    state = initial_grid(PARAMS, COV, SCHED2, AlwaysTreat(), SPEC)
    state = propagate_recurrence(state, AlwaysTreat(), PARAMS, COV, SCHED2, SPEC)
    assert state.total_mass() == pytest.approx(1.0, abs=1e-6)
    # omega-only loss under always-treat: one treated interior visit / J
    omega_only = RiskSpec(kind="additive-exceedance", eta=1e9, omega=1.0)
    st = initial_grid(PARAMS, COV, SCHED2, AlwaysTreat(), omega_only)
    st = propagate_recurrence(st, AlwaysTreat(), PARAMS, COV, SCHED2, omega_only)
    assert risk_integral(st, omega_only, J=2) == pytest.approx(0.5, abs=1e-6)
    # terminal mean via quadrature
    term = RiskSpec(kind="terminal-level")
    st2 = initial_grid(PARAMS, COV, SCHED2, NeverTreat(), term)
    st2 = propagate_recurrence(st2, NeverTreat(), PARAMS, COV, SCHED2, term)
    assert risk_integral(st2, term, J=2) == pytest.approx(-2.0 + 1.15 * 2, abs=1e-3)


@pytest.mark.parametrize("strategy", [
    Randomized(0.4),
    LogisticStochastic(-3.0, 2.0, 0.3, 0.0),
    LogisticStochastic(-1.0, 1.0, 0.3, 2.0),
    PersonalizedThreshold(-1.0),
    PredictionContainment(eta=1.7, kappa=0.05),
])
def test_grid_matches_monte_carlo_all_families(strategy):
    gr = oracle_risk(PARAMS, COV, SCHED2, strategy, SPEC)
    mc = estimate_risk_skp(PARAMS, COV, SCHED2, strategy, SPEC, 200_000, 99)
    assert abs(gr - mc.total) <= max(3 * mc.mc_se, 1e-3)


def test_grid_containment_without_measurement_noise():
    p = presets.reference_params(0.0, 0.0)
    p = type(p)(**{**vars(p), "sigma_eps": 0.0})
    strategy = PredictionContainment(eta=1.7, kappa=0.05)
    gr = oracle_risk(p, COV, SCHED2, strategy, SPEC)
    mc = estimate_risk_skp(p, COV, SCHED2, strategy, SPEC, 200_000, 17)
    assert abs(gr - mc.total) <= max(3 * mc.mc_se, 1e-3)


def test_grid_requires_known_effects():
    with pytest.raises(ValueError):
        oracle_risk(PARAMS, SubjectCovariates(c=0.5, d=0), SCHED2,
                    NeverTreat(), SPEC)
