"""Independent risk computation: closed forms and grid-density propagation.

For fixed regimes the marker's marginal law at every visit is Gaussian in
closed form.  For adaptive rules at small horizons, the joint law of the
latent state (and, for prediction-based rules, the filter mean) is pushed
through the visit recurrence on a discretized grid: multiply by the decision
probability, apply the Gaussian transition kernel, and accumulate the
additive loss terms.  Cell masses (density times cell volume) are the grid
representation throughout, so mass conservation is a direct check.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri, roots_hermitenorm
from scipy.special import expit

from .errors import ResolutionError
from .model import ModelParams, SubjectCovariates, VisitSchedule
from .risk import RiskSpec, _filter_plan
from . import strategies as st

__all__ = ["closed_form_fixed_regime", "GridDensity", "initial_grid",
           "propagate_recurrence", "risk_integral", "oracle_risk"]

_MASS_TOL = 1e-4


def closed_form_fixed_regime(params: ModelParams, cov: SubjectCovariates,
                             schedule: VisitSchedule, regime: str,
                             spec: RiskSpec) -> float:
    """Exact risk of the always-treat or never-treat regime.

    The marginal law of the marker at t_j is Gaussian; with unknown effects
    the random-effect variances enter the marginal variance.  Additive risks
    average the interior post-baseline visits and divide by J, matching the
    Monte Carlo discretization.
    """
    if regime not in ("always", "never"):
        raise ValueError("regime must be 'always' or 'never'")
    a = 1 if regime == "always" else 0
    t = schedule.times
    J = schedule.horizon
    if cov.effects_known:
        mu0, mu1 = cov.mu0i, cov.mu1i
        var_extra = np.zeros_like(t)
    else:
        mu0, mu1 = params.mu0, params.mu1
        var_extra = params.sigma_mu0 ** 2 + params.sigma_mu1 ** 2 * t ** 2
    slope = mu1 + params.gamma_c * cov.c + params.gamma_d * cov.d + params.gamma_a * a
    means = mu0 + slope * t
    sds = np.sqrt(params.tau ** 2 * t + var_extra)

    n_window = max(J - 1, 0)
    treat_cost = spec.omega * a * n_window / J if J else 0.0
    win = slice(1, J)
    if spec.kind == "additive-exceedance":
        marker = float(np.sum(_sf(spec.eta, means[win], sds[win]))) / J
    elif spec.kind == "additive-mean":
        marker = float(np.sum(means[win])) / J
    elif spec.kind == "terminal-level":
        marker = float(means[J])
    else:
        marker = float(_sf(spec.eta, means[J], sds[J]))
    return marker + treat_cost


def _sf(eta, mean, sd):
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    out = np.where(sd > 0, 1.0 - ndtr((eta - mean) / np.where(sd > 0, sd, 1.0)),
                   (mean > eta).astype(float))
    return out


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Cell-mass representation of the propagated joint law at one visit.

    ``mass`` has shape (n_sheets, ny) or, when the strategy tracks a filter
    mean, (n_sheets, nm, ny).  Sheets enumerate the discrete part of the
    state (the previous action) when the strategy depends on it.
    """

    centers: np.ndarray
    edges: np.ndarray
    mass: np.ndarray
    a_prev: tuple
    j: int
    acc_exceed: float
    acc_level: float
    acc_treat: float
    mass_error: float
    m_centers: Optional[np.ndarray] = None
    m_edges: Optional[np.ndarray] = None

    def total_mass(self) -> float:
        return float(self.mass.sum())

    def y_marginal(self) -> np.ndarray:
        m = self.mass.sum(axis=0)
        return m.sum(axis=0) if m.ndim == 2 else m


def _cell_masses(edges: np.ndarray, mean: float, sd: float) -> np.ndarray:
    if sd <= 0:
        out = np.zeros(edges.size - 1)
        idx = np.clip(np.searchsorted(edges, mean) - 1, 0, edges.size - 2)
        out[idx] = 1.0
        return out
    cdf = ndtr((edges - mean) / sd)
    return np.diff(cdf)


def _frac_above(edges: np.ndarray, cut: float) -> np.ndarray:
    """Per-cell fraction lying strictly above ``cut`` (linear within cells)."""
    lo, hi = edges[:-1], edges[1:]
    return np.clip((hi - cut) / (hi - lo), 0.0, 1.0)


def _transition_kernel(edges: np.ndarray, centers: np.ndarray, shift: float,
                       sd: float) -> np.ndarray:
    """K[target, source]: mass moved from a source cell into each target cell."""
    zmat = (edges[:, None] - centers[None, :] - shift) / sd
    cdf = ndtr(zmat)
    return cdf[1:, :] - cdf[:-1, :]


_GH_NODES, _GH_WEIGHTS = roots_hermitenorm(61)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def _needs_memory(strategy) -> bool:
    return isinstance(strategy, st.LogisticStochastic) and strategy.alpha_a != 0.0


def _containment(strategy) -> bool:
    return isinstance(strategy, (st.PredictionContainment, st.ParamPredictionContainment))


def _containment_cut(strategy, params, cov, pred_var, dt) -> float:
    """Level on the filtered mean above which the containment rule treats."""
    kappa = strategy.kappa if isinstance(strategy, st.PredictionContainment) else strategy.beta
    mu1 = cov.mu1i + params.gamma_c * cov.c + params.gamma_d * cov.d
    if kappa <= 0.0:
        return -np.inf
    if kappa >= 1.0:
        return np.inf
    return strategy.eta - mu1 * dt - np.sqrt(pred_var) * ndtri(1.0 - kappa)


def _decision_prob(strategy, params, cov, centers, edges, a_prev):
    """P(treat | latent value in cell), measurement noise integrated out."""
    s = params.sigma_eps
    if isinstance(strategy, st.NeverTreat):
        return np.zeros(centers.size)
    if isinstance(strategy, st.AlwaysTreat):
        return np.ones(centers.size)
    if isinstance(strategy, st.Randomized):
        return np.full(centers.size, strategy.p)
    if isinstance(strategy, st.DeterministicThreshold):
        cut = strategy.beta0 + strategy.beta_c * cov.c
        return _sf(cut, centers, s) if s > 0 else _frac_above(edges, cut)
    if isinstance(strategy, st.PersonalizedThreshold):
        return _sf(strategy.beta, centers, s) if s > 0 else _frac_above(edges, strategy.beta)
    if isinstance(strategy, st.LogisticStochastic):
        base = (strategy.alpha0 + strategy.alpha_c * cov.c
                + strategy.alpha_a * a_prev)
        zs = centers[:, None] + s * _GH_NODES[None, :]
        return expit(base + strategy.alpha_z * zs) @ _GH_WEIGHTS
    raise TypeError(f"no grid decision rule for {type(strategy).__name__}")


def _grid_axes(params, cov, schedule, ny, pad=0.0):
    t = schedule.times
    d0 = cov.mu1i + params.gamma_c * cov.c + params.gamma_d * cov.d
    d1 = d0 + params.gamma_a
    lo_drift, hi_drift = min(d0, d1, 0.0), max(d0, d1, 0.0)
    smax = params.tau * np.sqrt(t[-1]) + params.sigma_eps + pad
    lo = cov.mu0i + lo_drift * t[-1] - 6.0 * smax
    hi = cov.mu0i + hi_drift * t[-1] + 6.0 * smax
    edges = np.linspace(lo, hi, ny + 1)
    return 0.5 * (edges[:-1] + edges[1:]), edges


def initial_grid(params: ModelParams, cov: SubjectCovariates,
                 schedule: VisitSchedule, strategy, spec: RiskSpec,
                 ny: int = 512, nm: int = 256) -> GridDensity:
    """Exact state after the first transition (the law at visit 1).

    The baseline latent value is the known subject level, so the visit-0
    decision probability is computed exactly and the visit-1 law is a
    two-component Gaussian mixture (one per action), discretized to cell
    masses.  Prediction-based rules add the filter-mean coordinate.
    """
    if not cov.effects_known:
        raise ValueError("the grid oracle requires known subject effects")
    if schedule.horizon < 1:
        raise ValueError("need at least one interval")
    t = schedule.times
    dt0 = t[1] - t[0]
    mu0i = cov.mu0i
    slope0 = cov.mu1i + params.gamma_c * cov.c + params.gamma_d * cov.d
    J = schedule.horizon

    contain = _containment(strategy)
    if contain and params.sigma_eps > 0:
        gains, pred_vars = _filter_plan(params, schedule, np.zeros((2, 2)))
        cut0 = _containment_cut(strategy, params, cov, pred_vars[0], dt0)
        p0 = float(mu0i > cut0)
    elif contain:
        pred_var0 = params.tau ** 2 * dt0
        cut0 = _containment_cut(strategy, params, cov, pred_var0, dt0)
        p0 = float(mu0i > cut0)
    else:
        one = np.array([mu0i])
        edges0 = np.array([mu0i - 0.5, mu0i + 0.5])
        p0 = float(_decision_prob(strategy, params, cov, one, edges0, a_prev=0)[0])

    centers, edges = _grid_axes(params, cov, schedule, ny)
    keep_sheets = _needs_memory(strategy)
    use_m = contain and params.sigma_eps > 0

    branch_w = {0: 1.0 - p0, 1: p0}
    if use_m:
        m_centers, m_edges = _grid_axes(params, cov, schedule, nm, pad=params.sigma_eps)
        k1 = float(gains[1][0])
        mass = np.zeros((1, nm, ny))
        for a0, w in branch_w.items():
            if w == 0.0:
                continue
            mean_y = mu0i + (slope0 + params.gamma_a * a0) * dt0
            my = _cell_masses(edges, mean_y, params.tau * np.sqrt(dt0))
            m_mean = (1.0 - k1) * mean_y + k1 * centers
            sd_m = k1 * params.sigma_eps
            cdf = ndtr((m_edges[:, None] - m_mean[None, :]) / sd_m)
            cond = cdf[1:, :] - cdf[:-1, :]
            mass[0] += w * cond * my[None, :]
        state = GridDensity(centers=centers, edges=edges, mass=mass, a_prev=(None,),
                            j=1, acc_exceed=0.0, acc_level=0.0, acc_treat=0.0,
                            mass_error=abs(1.0 - mass.sum()),
                            m_centers=m_centers, m_edges=m_edges)
    else:
        sheets = []
        labels = []
        for a0, w in branch_w.items():
            mean_y = mu0i + (slope0 + params.gamma_a * a0) * dt0
            sheets.append(w * _cell_masses(edges, mean_y, params.tau * np.sqrt(dt0)))
            labels.append(a0)
        mass = np.stack(sheets)
        if not keep_sheets:
            mass = mass.sum(axis=0, keepdims=True)
            labels = [None]
        state = GridDensity(centers=centers, edges=edges, mass=mass,
                            a_prev=tuple(labels), j=1, acc_exceed=0.0,
                            acc_level=0.0, acc_treat=0.0,
                            mass_error=abs(1.0 - mass.sum()))
    return _accumulate_arrival(state, spec, J)


def _accumulate_arrival(state: GridDensity, spec: RiskSpec, J: int) -> GridDensity:
    if not 1 <= state.j <= J - 1:
        return state
    ym = state.y_marginal()
    exceed = float(ym @ _frac_above(state.edges, spec.eta)) if np.isfinite(spec.eta) else 0.0
    level = float(ym @ state.centers)
    return replace(state, acc_exceed=state.acc_exceed + exceed,
                   acc_level=state.acc_level + level)


def propagate_recurrence(state: GridDensity, strategy, params: ModelParams,
                         cov: SubjectCovariates, schedule: VisitSchedule,
                         spec: RiskSpec) -> GridDensity:
    """One visit step: decide, accumulate the loss terms, apply the transition.

    Multiplies the current cell masses by the decision probabilities, pushes
    each action branch through the Gaussian transition kernel, and then
    (for prediction-based rules) refreshes the filter-mean coordinate.
    Raises when accumulated mass drift exceeds the tolerance.
    """
    j = state.j
    J = schedule.horizon
    if j >= J:
        raise ValueError("state is already at the horizon")
    dt = schedule.times[j + 1] - schedule.times[j]
    slope0 = cov.mu1i + params.gamma_c * cov.c + params.gamma_d * cov.d
    sd_y = params.tau * np.sqrt(dt)
    in_window = 1 <= j <= J - 1

    if state.m_centers is not None:
        gains, pred_vars = _filter_plan(params, schedule, np.zeros((2, 2)))
        cut = _containment_cut(strategy, params, cov, pred_vars[j], dt)
        p1_m = _frac_above(state.m_edges, cut)
        treat = float(np.tensordot(state.mass[0].sum(axis=1), p1_m, axes=1))
        k_next = float(gains[j + 1][0])
        sd_m = k_next * params.sigma_eps
        new_mass = np.zeros_like(state.mass[0])
        for a, sel in ((1, p1_m), (0, 1.0 - p1_m)):
            branch = state.mass[0] * sel[:, None]
            if not branch.any():
                continue
            drift = (slope0 + params.gamma_a * a) * dt
            ky = _transition_kernel(state.edges, state.centers, drift, sd_y)
            f1 = branch @ ky.T  # (m_src, y_target)
            m_pred = (1.0 - k_next) * (state.m_centers + drift)
            for i_m in range(state.m_centers.size):
                row = f1[i_m]
                if not row.any():
                    continue
                m_mean = m_pred[i_m] + k_next * state.centers
                cdf = ndtr((state.m_edges[:, None] - m_mean[None, :]) / sd_m)
                new_mass += (cdf[1:, :] - cdf[:-1, :]) * row[None, :]
        new = replace(state, mass=new_mass[None, ...], j=j + 1,
                      acc_treat=state.acc_treat + (treat if in_window else 0.0))
    else:
        keep_sheets = _needs_memory(strategy)
        n_out = 2 if keep_sheets else 1
        new_mass = np.zeros((n_out, state.centers.size))
        treat = 0.0
        for sheet, label in zip(state.mass, state.a_prev):
            if _containment(strategy):
                # exact observations collapse the filter mean onto the state
                cut = _containment_cut(strategy, params, cov,
                                       params.tau ** 2 * dt, dt)
                p1 = _frac_above(state.edges, cut)
            else:
                p1 = _decision_prob(strategy, params, cov, state.centers,
                                    state.edges, a_prev=(label or 0))
            treat += float(sheet @ p1)
            for a, weight in ((1, p1), (0, 1.0 - p1)):
                branch = sheet * weight
                if not branch.any():
                    continue
                drift = (slope0 + params.gamma_a * a) * dt
                ky = _transition_kernel(state.edges, state.centers, drift, sd_y)
                new_mass[a if keep_sheets else 0] += ky @ branch
        new = replace(state, mass=new_mass,
                      a_prev=(0, 1) if keep_sheets else (None,), j=j + 1,
                      acc_treat=state.acc_treat + (treat if in_window else 0.0))

    err = abs(1.0 - new.total_mass())
    new = replace(new, mass_error=max(state.mass_error, err))
    if err > _MASS_TOL:
        raise ResolutionError(f"mass drift {err:.2e} exceeds {_MASS_TOL}; refine the grid")
    return _accumulate_arrival(new, spec, J)


def risk_integral(state: GridDensity, spec: RiskSpec, J: Optional[int] = None) -> float:
    """Combine the accumulated loss terms (and terminal marginal) into the risk."""
    J = state.j if J is None else J
    treat_cost = spec.omega * state.acc_treat / J
    if spec.kind == "additive-exceedance":
        return state.acc_exceed / J + treat_cost
    if spec.kind == "additive-mean":
        return state.acc_level / J + treat_cost
    ym = state.y_marginal()
    if spec.kind == "terminal-level":
        return float(ym @ state.centers) + treat_cost
    return float(ym @ _frac_above(state.edges, spec.eta)) + treat_cost


def oracle_risk(params: ModelParams, cov: SubjectCovariates, schedule: VisitSchedule,
                strategy, spec: RiskSpec, ny: int = 512, nm: int = 256) -> float:
    """Quadrature risk of a strategy at a small horizon (J <= 3 recommended)."""
    state = initial_grid(params, cov, schedule, strategy, spec, ny=ny, nm=nm)
    for _ in range(1, schedule.horizon):
        state = propagate_recurrence(state, strategy, params, cov, schedule, spec)
    return risk_integral(state, spec, J=schedule.horizon)
