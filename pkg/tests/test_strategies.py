import numpy as np
import pytest
from scipy.stats import norm

from dyncontrol import (AlwaysTreat, DeterministicThreshold, LogisticStochastic,
                        ModelParams, NeverTreat, ObservationalAssignmentModel,
                        ObservedHistory, ParamPredictionContainment,
                        PersonalizedThreshold, PredictionContainment,
                        Randomized, SubjectCovariates, VisitSchedule,
                        assign_observational, decide, exceedance_probability,
                        strategy_from_json, strategy_to_json)

PARAMS = ModelParams(mu0=-2.0, mu1=1.0, gamma_c=0.3, gamma_d=1.0, gamma_a=-3.0,
                     tau=2.0, sigma_eps=0.5)
SCHED = VisitSchedule.regular(10)


def history(z, a=(), cov=None, sigma_eps=None):
    cov = cov or SubjectCovariates(c=0.5, d=0, mu0i=-2.0, mu1i=1.0)
    return ObservedHistory(SCHED, len(z) - 1, np.asarray(z, float),
                           np.asarray(a, int), cov)


def test_personalized_threshold_crossing():
    hist = history([0.5])
    assert decide(PersonalizedThreshold(0.0), hist, PARAMS) == 1
    assert decide(PersonalizedThreshold(0.5), hist, PARAMS) == 0  # strict


def test_covariate_threshold():
    cov = SubjectCovariates(c=2.0, d=0, mu0i=0.0, mu1i=1.0)
    hist = history([0.9], cov=cov)
    # cut at beta0 + beta_c * c = 0 + 0.5*2 = 1
    assert decide(DeterministicThreshold(0.0, 0.5), hist, PARAMS) == 0
    hist2 = history([1.1], cov=cov)
    assert decide(DeterministicThreshold(0.0, 0.5), hist2, PARAMS) == 1


def test_logistic_probability():
    # logit at (Z=0, C=0, a_prev=0) is -3: p = 1/(1+e^3)
    spec = LogisticStochastic(alpha0=-3.0, alpha_z=2.0, alpha_c=0.3, alpha_a=0.0)
    cov = SubjectCovariates(c=0.0, d=0, mu0i=0.0, mu1i=1.0)
    hist = history([0.0], cov=cov)
    rng = np.random.default_rng(0)
    draws = [decide(spec, hist, PARAMS, rng) for _ in range(20000)]
    assert np.mean(draws) == pytest.approx(1.0 / (1.0 + np.exp(3.0)), abs=0.006)


def test_deterministic_rules_consume_no_randomness():
    hist = history([0.5])
    # rng=None would crash if the rule drew anything
    assert decide(PersonalizedThreshold(0.0), hist, PARAMS, rng=None) == 1
    assert decide(NeverTreat(), hist, PARAMS, rng=None) == 0
    assert decide(AlwaysTreat(), hist, PARAMS, rng=None) == 1


def test_randomized_rates():
    rng = np.random.default_rng(1)
    hist = history([0.0])
    draws = [decide(Randomized(0.25), hist, PARAMS, rng) for _ in range(20000)]
    assert np.mean(draws) == pytest.approx(0.25, abs=0.01)


def test_exceedance_closed_form():
    # known effects, sigma_eps = 0: probit of (eta - y - drift*dt)/(tau sqrt(dt))
    p = ModelParams(mu0=-2.0, mu1=1.0, gamma_c=0.3, gamma_d=1.0, gamma_a=-3.0,
                    tau=2.0, sigma_eps=0.0)
    hist = history([-2.0])
    got = exceedance_probability(hist, p, dt=1.0, eta=1.7, a_hyp=0)
    want = norm.sf((1.7 - (-2.0) - 1.15) / 2.0)
    assert got == pytest.approx(want, abs=1e-10)
    assert got == pytest.approx(0.1013, abs=5e-4)


def test_exceedance_limits_and_monotonicity():
    hist = history([-2.0])
    assert exceedance_probability(hist, PARAMS, 1.0, 1e9, 0) == pytest.approx(0.0)
    assert exceedance_probability(hist, PARAMS, 1.0, -1e9, 0) == pytest.approx(1.0)
    etas = np.linspace(-5, 5, 21)
    probs = [exceedance_probability(hist, PARAMS, 1.0, e, 0) for e in etas]
    assert np.all(np.diff(probs) <= 1e-12)


def test_exceedance_treated_smaller():
    hist = history([-2.0])
    for eta in (-2.0, 0.0, 1.7):
        p0 = exceedance_probability(hist, PARAMS, 1.0, eta, 0)
        p1 = exceedance_probability(hist, PARAMS, 1.0, eta, 1)
        assert p1 < p0


def test_exceedance_closed_form_multivisit_exact_observation():
    # with several exact observations the law conditions on the last one only
    p = ModelParams(mu0=-2.0, mu1=1.0, gamma_c=0.3, gamma_d=1.0, gamma_a=-3.0,
                    tau=2.0, sigma_eps=0.0)
    hist = history([-2.0, -0.6, 0.4], a=[0, 0])
    got = exceedance_probability(hist, p, dt=1.0, eta=1.7, a_hyp=0)
    want = norm.sf((1.7 - 0.4 - 1.15) / 2.0)
    assert got == pytest.approx(want, abs=1e-10)


def test_exceedance_matches_joint_conditioning_oracle():
    # brute-force joint-Gaussian conditioning, independently assembled
    from dyncontrol.model import treatment_integral
    p = ModelParams(mu0=-2.0, mu1=1.0, gamma_c=0.2, gamma_d=0.5, gamma_a=-3.0,
                    tau=2.0, sigma_eps=0.5, sigma_mu0=1.0, sigma_mu1=0.5)
    cov = SubjectCovariates(c=0.4, d=1)
    z = np.array([-2.0, -4.0, -6.0])
    for a_path in ([1, 1], [0, 0], [0, 1]):
        hist = ObservedHistory(SCHED, 2, z, np.array(a_path), cov)
        got = exceedance_probability(hist, p, 1.0, 1.7, 0)
        t = SCHED.times[:3]
        t_next = 3.0
        fixed = p.gamma_c * cov.c + p.gamma_d * cov.d
        aint = treatment_integral(t, np.array(a_path))
        A = np.column_stack([np.ones(3), t])
        om = np.diag([1.0, 0.25])
        nu = np.array([-2.0, 1.0])
        row = np.array([1.0, t_next])
        mz = A @ nu + fixed * t + p.gamma_a * aint
        my = row @ nu + fixed * t_next + p.gamma_a * aint[-1]
        czz = A @ om @ A.T + 4.0 * np.minimum.outer(t, t) + 0.25 * np.eye(3)
        cyz = A @ (om @ row) + 4.0 * t
        w = np.linalg.solve(czz, cyz)
        m = my + w @ (z - mz)
        v = row @ om @ row + 4.0 * t_next - cyz @ w
        want = norm.sf((1.7 - m) / np.sqrt(v))
        assert got == pytest.approx(want, abs=1e-10)


def test_containment_decision():
    spec = PredictionContainment(eta=1.7, kappa=0.05)
    p = ModelParams(mu0=-2.0, mu1=1.0, gamma_c=0.3, gamma_d=1.0, gamma_a=-3.0,
                    tau=2.0, sigma_eps=0.0)
    hist = history([-2.0])
    # untreated exceedance is ~0.101 > 0.05
    assert decide(spec, hist, p) == 1
    assert decide(PredictionContainment(eta=1.7, kappa=0.2), hist, p) == 0
    assert decide(ParamPredictionContainment(eta=1.7, beta=0.05), hist, p) == 1


def test_containment_terminal_visit_returns_zero():
    cov = SubjectCovariates(c=0.5, d=0, mu0i=-2.0, mu1i=1.0)
    hist = ObservedHistory(SCHED, 10, np.full(11, 5.0), np.zeros(10, int), cov)
    assert decide(PredictionContainment(eta=1.7, kappa=0.05), hist, PARAMS) == 0


def test_assign_observational_probabilities():
    model = ObservationalAssignmentModel(alpha0=-3.0, alpha_z=2.0,
                                         alpha_c=0.3, alpha_d=0.5)
    assert model.probability(1.5, 0.0, 0) == pytest.approx(0.5)
    assert model.probability(0.0, 0.0, 1) == pytest.approx(0.07585818, abs=1e-8)
    rng = np.random.default_rng(3)
    cov = SubjectCovariates(c=0.0, d=0)
    draws = [assign_observational(model, 1.5, cov, rng) for _ in range(20000)]
    assert np.mean(draws) == pytest.approx(0.5, abs=0.012)


def test_strategy_json_round_trip():
    specs = [NeverTreat(), AlwaysTreat(), Randomized(0.3),
             LogisticStochastic(-3.0, 2.0, 0.3, 0.0),
             DeterministicThreshold(-0.5, 0.3), PersonalizedThreshold(-2.362),
             PredictionContainment(1.7, 0.05), ParamPredictionContainment(1.7, 0.4)]
    for s in specs:
        assert strategy_from_json(strategy_to_json(s)) == s
    with pytest.raises(ValueError):
        strategy_from_json({"kind": "nope"})


def test_history_validation():
    cov = SubjectCovariates(c=0.0, d=0)
    with pytest.raises(Exception):
        ObservedHistory(SCHED, 1, np.array([0.0]), np.array([], int), cov)
