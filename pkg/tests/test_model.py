import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from dyncontrol import (AlignmentError, ModelParams, ScheduleError,
                        SubjectCovariates, Trajectory, VisitSchedule,
                        cumulative_treatment, drift, transition,
                        treatment_integral)


def make_params(**kw):
    base = dict(mu0=-2.0, mu1=1.0, gamma_c=0.3, gamma_d=1.0, gamma_a=-3.0,
                tau=2.0, sigma_eps=0.5)
    base.update(kw)
    return ModelParams(**base)


def test_drift_reference_case():
    p = make_params()
    cov = SubjectCovariates(c=0.5, d=0, mu0i=-2.0, mu1i=1.0)
    assert drift(p, cov, 1) == pytest.approx(-1.85)


def test_drift_hand_expansion():
    p = make_params()
    cov = SubjectCovariates(c=-0.5, d=1, mu0i=-2.0, mu1i=1.0)
    assert drift(p, cov, 0) == pytest.approx(1.85)


def test_drift_ignores_treatment_when_effect_zero():
    p = make_params(gamma_a=0.0)
    cov = SubjectCovariates(c=1.3, d=1, mu0i=0.0, mu1i=2.0)
    assert drift(p, cov, 0) == drift(p, cov, 1)


def test_drift_uses_population_slope_when_unknown():
    p = make_params()
    cov = SubjectCovariates(c=0.0, d=0)
    assert drift(p, cov, 0) == pytest.approx(p.mu1)


def test_transition_examples():
    p = make_params()
    cov = SubjectCovariates(c=0.5, d=0, mu0i=-2.0, mu1i=1.0)
    mean, var = transition(-2.0, 1.0, 0, p, cov)
    assert mean == pytest.approx(-0.85)
    assert var == pytest.approx(4.0)

    p2 = make_params(gamma_c=0.0)
    cov2 = SubjectCovariates(c=0.0, d=0, mu0i=0.0, mu1i=1.0)
    mean, var = transition(0.0, 2.0, 1, p2, cov2)
    assert mean == pytest.approx(-4.0)
    assert var == pytest.approx(8.0)


def test_transition_deterministic_limit():
    p = make_params(tau=1e-12)
    cov = SubjectCovariates(c=0.5, d=0, mu0i=-2.0, mu1i=1.0)
    mean, var = transition(-2.0, 1.0, 0, p, cov)
    assert mean == pytest.approx(-0.85)
    assert var < 1e-20


def test_transition_rejects_bad_dt():
    p = make_params()
    cov = SubjectCovariates(c=0.0, d=0)
    with pytest.raises(ScheduleError):
        transition(0.0, 0.0, 0, p, cov)


@given(
    y=hst.floats(-20, 20),
    dt1=hst.floats(0.1, 3.0),
    dt2=hst.floats(0.1, 3.0),
    a=hst.integers(0, 1),
)
@settings(max_examples=60, deadline=None)
def test_transition_semigroup(y, dt1, dt2, a):
    # composing two steps with the same action equals one long step
    p = make_params()
    cov = SubjectCovariates(c=0.7, d=1, mu0i=1.0, mu1i=0.5)
    m1, v1 = transition(y, dt1, a, p, cov)
    m12, v12 = transition(m1, dt2, a, p, cov)
    m_direct, v_direct = transition(y, dt1 + dt2, a, p, cov)
    assert m12 == pytest.approx(m_direct, rel=1e-12, abs=1e-12)
    assert v1 + v12 - v1 == pytest.approx(v12)
    assert v1 + (v12) == pytest.approx(v_direct, rel=1e-12)


def test_transition_mean_affine_in_state_and_action():
    p = make_params()
    cov = SubjectCovariates(c=0.2, d=1, mu0i=0.0, mu1i=1.0)
    dt = 1.5
    m00, _ = transition(0.0, dt, 0, p, cov)
    m10, _ = transition(1.0, dt, 0, p, cov)
    m01, _ = transition(0.0, dt, 1, p, cov)
    assert m10 - m00 == pytest.approx(1.0)           # slope 1 in y
    assert m01 - m00 == pytest.approx(p.gamma_a * dt)  # slope gamma_a*dt in a


def test_transition_variance_ignores_state():
    p = make_params()
    cov = SubjectCovariates(c=0.2, d=1, mu0i=0.0, mu1i=1.0)
    _, v0 = transition(-5.0, 2.0, 0, p, cov)
    _, v1 = transition(12.0, 2.0, 1, p, cov)
    assert v0 == v1 == pytest.approx(p.tau ** 2 * 2.0)


def test_params_validation():
    with pytest.raises(ValueError):
        make_params(tau=0.0)
    with pytest.raises(ValueError):
        make_params(sigma_eps=-0.1)
    with pytest.raises(ValueError):
        make_params(mu0=np.inf)


def test_covariates_validation():
    with pytest.raises(ValueError):
        SubjectCovariates(c=0.0, d=2)
    assert not SubjectCovariates(c=0.0, d=1, mu0i=1.0).effects_known
    assert SubjectCovariates(c=0.0, d=1, mu0i=1.0, mu1i=0.0).effects_known


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        VisitSchedule(np.array([0.0, 1.0, 1.0]))
    with pytest.raises(ScheduleError):
        VisitSchedule(np.array([-1.0, 1.0]))
    s = VisitSchedule.regular(10)
    assert s.horizon == 10
    assert s.times[0] == 0.0 and s.times[-1] == 10.0


def test_cumulative_treatment():
    s = VisitSchedule.regular(10)
    assert cumulative_treatment(s, np.ones(11)) == pytest.approx(10.0)
    assert cumulative_treatment(s, np.zeros(11)) == pytest.approx(0.0)
    alt = np.array([1, 0] * 5 + [1])
    assert cumulative_treatment(s, alt) == pytest.approx(5.0)
    with pytest.raises(AlignmentError):
        cumulative_treatment(s, np.ones(10))


def test_treatment_integral_partial_history():
    t = np.array([0.0, 1.0, 2.0, 4.0])
    out = treatment_integral(t, np.array([1, 0, 1]))
    assert out.tolist() == [0.0, 1.0, 1.0, 3.0]
    # shorter history: missing decisions count as untreated
    out2 = treatment_integral(t, np.array([1]))
    assert out2.tolist() == [0.0, 1.0, 1.0, 1.0]


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.zeros(3), np.zeros(3), np.array([0, 2, 0]))
    with pytest.raises(AlignmentError):
        Trajectory(np.zeros(3), np.zeros(2), np.zeros(2))
