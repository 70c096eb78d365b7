"""Maximum-likelihood estimation of the marker law from observational cohorts.

The observation vector of one subject is multivariate Gaussian: its mean is
affine in the fixed effects through time and the integrated treatment path,
and its covariance combines the random-effect terms, the Brownian covariance
``tau^2 * min(t_j, t_j')`` and the measurement-noise diagonal.  Because the
mean carries the realized treatment path, the assignment law never needs to
be modeled; the likelihood is conditional on treatment.

All subjects share one schedule, so a single Cholesky factorization per
parameter value serves the whole cohort.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular, LinAlgError
from scipy.optimize import minimize

from .model import ModelParams, VisitSchedule, treatment_integral
from .simulate import Cohort, stream

__all__ = ["PARAM_NAMES", "FittedModel", "marginal_covariance",
           "log_likelihood", "fit_ml", "bootstrap_se"]

PARAM_NAMES = ("mu0", "mu1", "gamma_c", "gamma_d", "gamma_a",
               "tau", "sigma_eps", "sigma_mu0", "sigma_mu1")

_PENALTY = -1.0e12
_VAR_SLICE = slice(5, 9)  # tau, sigma_eps, sigma_mu0, sigma_mu1


@dataclass
class FittedModel:
    """Point estimates with observed-information uncertainty."""

    params: ModelParams
    vcov: np.ndarray
    se: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "estimates": {n: getattr(self.params, n) for n in PARAM_NAMES},
            "se": {n: float(s) for n, s in zip(PARAM_NAMES, self.se)},
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "vcov": self.vcov.tolist(),
            "diagnostics": self.diagnostics,
        }


def params_to_vector(params: ModelParams) -> np.ndarray:
    return np.array([getattr(params, n) for n in PARAM_NAMES], dtype=float)


def vector_to_params(x: np.ndarray) -> ModelParams:
    return ModelParams(**dict(zip(PARAM_NAMES, map(float, x))))


def marginal_covariance(schedule: VisitSchedule, params: ModelParams) -> np.ndarray:
    """Covariance of the observation vector, marginal over the random effects."""
    t = schedule.times
    return (params.sigma_mu0 ** 2
            + params.sigma_mu1 ** 2 * np.outer(t, t)
            + params.tau ** 2 * np.minimum.outer(t, t)
            + params.sigma_eps ** 2 * np.eye(t.size))


def _treatment_integrals(cohort: Cohort) -> np.ndarray:
    t = cohort.schedule.times
    out = np.empty_like(cohort.z)
    for i in range(cohort.n):
        out[i] = treatment_integral(t, cohort.a[i])
    return out


def _mean_matrix(cohort: Cohort, params: ModelParams, a_int: np.ndarray) -> np.ndarray:
    t = cohort.schedule.times
    slope = (params.mu1 + params.gamma_c * cohort.c + params.gamma_d * cohort.d)
    return params.mu0 + np.outer(slope, t) + params.gamma_a * a_int


def _gauss_loglik(z: np.ndarray, mean: np.ndarray, sigma: np.ndarray) -> float:
    n, m = z.shape
    try:
        cf, lower = cho_factor(sigma, lower=True)
    except (LinAlgError, ValueError):
        return _PENALTY
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf))))
    resid = z - mean
    w = solve_triangular(cf, resid.T, lower=lower)
    quad = float(np.sum(w * w))
    return -0.5 * (n * m * np.log(2.0 * np.pi) + n * logdet + quad)


def log_likelihood(cohort: Cohort, params: ModelParams) -> float:
    """Exact marginal Gaussian log-likelihood of the cohort observations.

    Returns a large negative surrogate when the implied covariance is not
    positive definite (pathological parameter values).
    """
    if cohort.n < 1:
        raise ValueError("cohort is empty")
    a_int = _treatment_integrals(cohort)
    return _gauss_loglik(cohort.z, _mean_matrix(cohort, params, a_int),
                         marginal_covariance(cohort.schedule, params))


def _moment_init(cohort: Cohort) -> np.ndarray:
    """Cheap pooled-regression starting values."""
    t = cohort.schedule.times
    n, m = cohort.z.shape
    a_int = _treatment_integrals(cohort)
    tt = np.tile(t, n)
    X = np.column_stack([
        np.ones(n * m), tt,
        np.repeat(cohort.c, m) * tt,
        np.repeat(cohort.d, m) * tt,
        a_int.ravel(),
    ])
    beta, *_ = np.linalg.lstsq(X, cohort.z.ravel(), rcond=None)
    resid = (cohort.z.ravel() - X @ beta).reshape(n, m)
    d1 = np.diff(resid, axis=1)
    v_d = max(float(np.var(d1)), 1e-3)
    dt_med = float(np.median(np.diff(t)))
    tau = np.sqrt(0.5 * v_d / dt_med)
    s_eps = np.sqrt(0.25 * v_d)
    s_mu0 = np.sqrt(max(float(np.var(resid[:, 0])) - s_eps ** 2, 1e-2))
    tail = max(float(np.var(resid[:, -1])) - s_mu0 ** 2 - tau ** 2 * t[-1] - s_eps ** 2, 1e-2)
    s_mu1 = np.sqrt(tail) / max(t[-1], 1.0)
    return np.array([beta[0], beta[1], beta[2], beta[3], beta[4],
                     tau, s_eps, max(s_mu0, 1e-2), max(s_mu1, 1e-2)])


def fit_ml(cohort: Cohort, init: ModelParams | None = None, *,
           gtol: float = 1e-6, maxiter: int = 500) -> FittedModel:
    """Quasi-Newton maximization of the marginal likelihood.

    Variance parameters are optimized on the log scale to keep them
    positive; gradients are numerically differentiated.  The reported
    covariance of the estimates is the inverse observed information in the
    natural parametrization.
    """
    x0 = params_to_vector(init) if init is not None else _moment_init(cohort)
    a_int = _treatment_integrals(cohort)
    z = cohort.z
    schedule = cohort.schedule
    penalized = 0

    def negll_natural(x: np.ndarray) -> float:
        nonlocal penalized
        if not np.all(np.isfinite(x)):
            penalized += 1
            return -_PENALTY
        params = vector_to_params(x)
        val = _gauss_loglik(z, _mean_matrix(cohort, params, a_int),
                            marginal_covariance(schedule, params))
        if val == _PENALTY:
            penalized += 1
        return -val

    def to_working(x):
        w = np.array(x, dtype=float)
        w[_VAR_SLICE] = np.log(np.maximum(w[_VAR_SLICE], 1e-8))
        return w

    def to_natural(w):
        x = np.array(w, dtype=float)
        x[_VAR_SLICE] = np.exp(np.clip(x[_VAR_SLICE], -25.0, 25.0))
        return x

    bounds = [(None, None)] * 5 + [(-11.5, 8.0)] * 4
    res = minimize(lambda w: negll_natural(to_natural(w)), to_working(x0),
                   method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-14})
    x_hat = to_natural(res.x)
    hess = _numerical_hessian(negll_natural, x_hat)
    vcov, se = _invert_information(hess)
    return FittedModel(
        params=vector_to_params(x_hat),
        vcov=vcov,
        se=se,
        loglik=-float(res.fun),
        converged=bool(res.success),
        iterations=int(res.nit),
        diagnostics={"penalized_evaluations": penalized,
                     "message": str(res.message)},
    )


def _numerical_hessian(f, x, rel_step: float = 1e-4) -> np.ndarray:
    p = x.size
    h = rel_step * np.maximum(np.abs(x), 0.05)
    H = np.empty((p, p))
    f0 = f(x)
    fp = np.empty(p)
    fm = np.empty(p)
    for i in range(p):
        e = np.zeros(p); e[i] = h[i]
        fp[i] = f(x + e)
        fm[i] = f(x - e)
        H[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / h[i] ** 2
    for i in range(p):
        for j in range(i + 1, p):
            ei = np.zeros(p); ei[i] = h[i]
            ej = np.zeros(p); ej[j] = h[j]
            fpp = f(x + ei + ej)
            fmm = f(x - ei - ej)
            H[i, j] = H[j, i] = (fpp - fp[i] - fp[j] + 2.0 * f0 - fm[i] - fm[j] + fmm) / (2.0 * h[i] * h[j])
    return H


def _invert_information(hess: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        cf = cho_factor(hess)
        vcov = cho_solve(cf, np.eye(hess.shape[0]))
    except (LinAlgError, ValueError):
        vcov = np.linalg.pinv(hess)
    d = np.diag(vcov)
    se = np.sqrt(np.where(d > 0, d, np.nan))
    return vcov, se


def bootstrap_se(cohort: Cohort, fitted: FittedModel, b: int, seed: int) -> dict:
    """Parametric-bootstrap SDs of the estimates.

    Each resample redraws the observation vectors from the fitted law while
    keeping every subject's covariates, treatment path and schedule fixed,
    then refits.  Failed refits are dropped and counted.
    """
    if b < 2:
        raise ValueError("need b >= 2 resamples")
    if not fitted.converged:
        raise ValueError("refusing to bootstrap a non-converged fit")
    a_int = _treatment_integrals(cohort)
    mean = _mean_matrix(cohort, fitted.params, a_int)
    sigma = marginal_covariance(cohort.schedule, fitted.params)
    L = np.linalg.cholesky(sigma)
    estimates = []
    failures = 0
    for r in range(b):
        noise = stream(seed, r, 0).standard_normal(cohort.z.shape)
        boot = Cohort(schedule=cohort.schedule, c=cohort.c, d=cohort.d,
                      a=cohort.a, z=mean + noise @ L.T)
        refit = fit_ml(boot, init=fitted.params)
        if refit.converged:
            estimates.append(params_to_vector(refit.params))
        else:
            failures += 1
    est = np.array(estimates)
    sds = est.std(axis=0, ddof=1) if est.shape[0] >= 2 else np.full(len(PARAM_NAMES), np.nan)
    return {"sd": dict(zip(PARAM_NAMES, map(float, sds))),
            "completed": int(est.shape[0]), "failures": failures}
