"""Random-intercept mixed models with model-based standard errors.

Both models have only an intercept and the cluster-level treatment, so each
cluster enters through a handful of sufficient statistics: ``(n_j, Z_j,
mean_j, SS_j)`` for the linear model and ``(n_j, Z_j, events_j)`` for the
logistic one. Identical logistic-model patterns are evaluated once and
weighted by their multiplicity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, logsumexp

from .core import (
    ConvergenceError,
    EstimateResult,
    Measure,
    ObservedDataset,
    OutcomeKind,
    PotentialOutcomeDataset,
    RankDeficiencyError,
    ValidationError,
    cluster_means,
    wald_result,
)
from .estimands import precision_weighted_estimand

ICC_UPPER = 0.999
PROFILE_TOL = 1e-8


@dataclass(frozen=True)
class VarianceComponents:
    sigma_b_sq: float
    sigma_w_sq: float

    @property
    def icc(self) -> float:
        total = self.sigma_b_sq + self.sigma_w_sq
        return self.sigma_b_sq / total if total > 0 else 0.0


def _require_two_per_arm(data: ObservedDataset) -> None:
    n1 = int(np.sum(data.treatment == 1))
    n0 = int(np.sum(data.treatment == 0))
    if n1 < 2 or n0 < 2:
        raise ValidationError(f"mixed models need two clusters per arm (treated={n1}, control={n0})")


# ---------------------------------------------------------------- linear model


@dataclass(frozen=True, eq=False)
class _LmmStats:
    n: np.ndarray
    z: np.ndarray
    ybar: np.ndarray
    ss: np.ndarray

    @classmethod
    def from_data(cls, data: ObservedDataset) -> _LmmStats:
        ybar = cluster_means(data)
        dev = data.y - ybar[data.cluster_index]
        ss = np.bincount(data.cluster_index, weights=dev**2, minlength=data.n_clusters)
        return cls(data.sizes.astype(float), data.treatment.astype(float), ybar, ss)


def _gls(st: _LmmStats, icc: float):
    w = st.n / (1.0 + (st.n - 1.0) * icc)
    d = np.column_stack([np.ones_like(st.z), st.z])
    xtx = d.T @ (w[:, None] * d)
    coef = np.linalg.solve(xtx, d.T @ (w * st.ybar))
    resid = st.ybar - d @ coef
    # r' R^-1 r collapses to SS_j / (1 - icc) + w_j (ybar_j - mu_j)^2
    q = float(np.sum(st.ss) / (1.0 - icc) + np.sum(w * resid**2))
    return coef, xtx, q


def lmm_criterion(st: _LmmStats, icc: float, method: str = "REML") -> float:
    """-2 x profiled (restricted) log-likelihood, up to a constant."""
    coef, xtx, q = _gls(st, icc)
    n_obs = float(st.n.sum())
    logdet_r = float(np.sum((st.n - 1.0) * math.log1p(-icc) + np.log1p((st.n - 1.0) * icc)))
    if method == "REML":
        dof = n_obs - 2.0
        return dof * math.log(q / dof) + logdet_r + math.log(np.linalg.det(xtx))
    if method == "ML":
        return n_obs * math.log(q / n_obs) + logdet_r
    raise ValueError(f"method must be 'REML' or 'ML', got {method!r}")


@dataclass(frozen=True, eq=False)
class LmmFit:
    coefficients: np.ndarray
    cov: np.ndarray
    components: VarianceComponents
    icc: float
    criterion: float
    method: str
    boundary: bool
    local_min_verified: bool


def lmm_fit_model(data: ObservedDataset, icc: float | None = None, method: str = "REML") -> LmmFit:
    """Profile the intracluster correlation, then GLS for the fixed effects.

    ``icc=None`` minimises the profiled criterion over ``[0, 0.999]`` with
    bounded Brent search; a number pins it.
    """
    _require_two_per_arm(data)
    st = _LmmStats.from_data(data)
    n_obs = float(st.n.sum())
    if n_obs <= 2:
        raise ValidationError("too few observations for a mixed model")
    if np.sum(st.ss) <= 0 and np.all(st.n == 1):
        raise RankDeficiencyError("no within-cluster information")

    def crit(r):
        return lmm_criterion(st, r, method)

    verified = True
    if icc is None:
        res = optimize.minimize_scalar(
            crit, bounds=(0.0, ICC_UPPER), method="bounded", options={"xatol": PROFILE_TOL}
        )
        candidates = [(float(res.fun), float(res.x)), (crit(0.0), 0.0), (crit(ICC_UPPER), ICC_UPPER)]
        fval, rho = min(candidates)
        lo, hi = max(rho - PROFILE_TOL, 0.0), min(rho + PROFILE_TOL, ICC_UPPER)
        verified = crit(lo) >= fval - 1e-12 and crit(hi) >= fval - 1e-12
    else:
        rho = float(icc)
        if not 0.0 <= rho <= ICC_UPPER:
            raise ValueError(f"icc must lie in [0, {ICC_UPPER}], got {rho}")
        fval = crit(rho)

    coef, xtx, q = _gls(st, rho)
    sigma2 = q / (n_obs - 2.0 if method == "REML" else n_obs)
    try:
        cov = sigma2 * np.linalg.inv(xtx)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("singular GLS information") from exc
    comps = VarianceComponents(sigma_b_sq=rho * sigma2, sigma_w_sq=(1.0 - rho) * sigma2)
    return LmmFit(
        coefficients=coef,
        cov=cov,
        components=comps,
        icc=rho,
        criterion=fval,
        method=method,
        boundary=icc is None and rho <= 10 * PROFILE_TOL,
        local_min_verified=verified,
    )


def lmm_fit(data: ObservedDataset, icc: float | None = None, method: str = "REML") -> EstimateResult:
    """Random-intercept linear mixed model; difference with model-based z interval."""
    fit = lmm_fit_model(data, icc, method)
    return wald_result(
        fit.coefficients[1],
        math.sqrt(fit.cov[1, 1]),
        Measure.DIFFERENCE,
        df=None,
        variance_method="model-based",
        diagnostics={
            "icc": fit.icc,
            "sigma_b_sq": fit.components.sigma_b_sq,
            "sigma_w_sq": fit.components.sigma_w_sq,
            "icc_fixed": icc is not None,
            "boundary": fit.boundary,
            "local_min_verified": fit.local_min_verified,
            "method": fit.method,
        },
    )


def implied_lmm_target(po: PotentialOutcomeDataset, vc: VarianceComponents | float) -> float:
    """Precision-weighted difference the LMM slope converges to at this ICC."""
    icc = vc.icc if isinstance(vc, VarianceComponents) else float(vc)
    return precision_weighted_estimand(po, icc)


# -------------------------------------------------------------- logistic model


@dataclass(frozen=True, eq=False)
class BinomialPatterns:
    """Distinct ``(n, events, z)`` cluster patterns with multiplicities."""

    n: np.ndarray
    events: np.ndarray
    z: np.ndarray
    count: np.ndarray

    @classmethod
    def from_data(cls, data: ObservedDataset) -> BinomialPatterns:
        if data.outcome_kind is not OutcomeKind.BINARY:
            raise ValidationError("logistic mixed model needs a binary outcome")
        events = np.rint(np.bincount(data.cluster_index, weights=data.y, minlength=data.n_clusters))
        rows = np.column_stack([data.sizes, events.astype(np.int64), data.treatment])
        uniq, counts = np.unique(rows, axis=0, return_counts=True)
        return cls(
            uniq[:, 0].astype(float), uniq[:, 1].astype(float), uniq[:, 2].astype(float), counts.astype(float)
        )


def _modes(n, s, eta, s2, tol=1e-12, max_iter=200):
    """Maximise ``h(b) = s log p + (n - s) log(1 - p) - b^2 / (2 s2)`` per pattern.

    ``h`` is strictly concave and its root lies in ``[-n s2, n s2]``; Newton
    steps that leave the current bracket fall back to bisection.
    """
    lo, hi = -n * s2 - 1.0, n * s2 + 1.0
    b = np.zeros_like(n)
    for _ in range(max_iter):
        p = expit(eta + b)
        g = s - n * p - b / s2
        hess = -n * p * (1.0 - p) - 1.0 / s2
        lo = np.where(g > 0, b, lo)
        hi = np.where(g < 0, b, hi)
        newton = b - g / hess
        inside = (newton > lo) & (newton < hi)
        new = np.where(inside, newton, 0.5 * (lo + hi))
        done = np.max(np.abs(new - b)) <= tol * (1.0 + np.max(np.abs(b)))
        b = new
        if done:
            break
    return b


def glmm_loglik(theta, pat: BinomialPatterns, nodes, weights, with_grad=True):
    """Adaptive Gauss-Hermite log-likelihood and its exact gradient.

    ``theta = (alpha, beta, log sigma_b)``. The gradient differentiates the
    quadrature approximation itself, including the dependence of the
    centring mode and scale on ``theta``, so it agrees with finite
    differences of the returned value.
    """
    alpha, beta, tau = theta
    s2 = math.exp(2.0 * tau)
    n, s, z, cnt = pat.n, pat.events, pat.z, pat.count
    eta = alpha + beta * z
    bhat = _modes(n, s, eta, s2)
    p = expit(eta + bhat)
    v = p * (1.0 - p)
    curv = n * v + 1.0 / s2  # -h''(bhat)
    scale = 1.0 / np.sqrt(curv)

    x = nodes[None, :]
    bk = bhat[:, None] + math.sqrt(2.0) * scale[:, None] * x
    eta_k = eta[:, None] + bk
    pk = expit(eta_k)
    # log p = -log(1 + e^-eta) and log(1 - p) = -log(1 + e^eta), finite for any eta
    hk = (
        -s[:, None] * np.logaddexp(0.0, -eta_k)
        - (n - s)[:, None] * np.logaddexp(0.0, eta_k)
        - bk**2 / (2.0 * s2)
    )
    logterms = np.log(weights)[None, :] + x**2 + hk
    lse = logsumexp(logterms, axis=1)
    ll_j = 0.5 * math.log(2.0) + np.log(scale) + lse - tau - 0.5 * math.log(2.0 * math.pi)
    ll = float(np.dot(cnt, ll_j))
    if not with_grad:
        return ll

    post = np.exp(logterms - lse[:, None])
    # partial derivatives of h at (bhat, theta)
    dh1_dtheta = np.stack([-n * v, -z * n * v, 2.0 * bhat / s2], axis=1)  # d h'/d theta
    h3 = -n * v * (1.0 - 2.0 * p)
    dh2_dtheta = np.stack([-n * v * (1.0 - 2.0 * p), -z * n * v * (1.0 - 2.0 * p), np.full_like(n, 2.0 / s2)], axis=1)
    dbhat = dh1_dtheta / curv[:, None]  # -d h'/d theta / h''
    dcurv = -(dh2_dtheta + h3[:, None] * dbhat)  # d(-h'')/d theta
    dscale = -0.5 * scale[:, None] * dcurv / curv[:, None]

    resid_k = s[:, None] - n[:, None] * pk
    dh_k = np.stack([resid_k, z[:, None] * resid_k, bk**2 / s2], axis=2)  # partial h at nodes
    h1_k = resid_k - bk / s2
    db_k = dbhat[:, None, :] + math.sqrt(2.0) * x[:, :, None] * dscale[:, None, :]
    inner = np.sum(post[:, :, None] * (dh_k + h1_k[:, :, None] * db_k), axis=1)
    grad_j = dscale / scale[:, None] + inner
    grad_j[:, 2] -= 1.0
    return ll, cnt @ grad_j


def _logistic_loglik(ab, pat: BinomialPatterns):
    eta = ab[0] + ab[1] * pat.z
    ll = pat.count * (pat.events * eta - pat.n * np.logaddexp(0.0, eta))
    resid = pat.count * (pat.events - pat.n * expit(eta))
    return float(ll.sum()), np.array([resid.sum(), np.dot(resid, pat.z)])


@dataclass(frozen=True, eq=False)
class GlmmFit:
    params: np.ndarray  # alpha, beta, log sigma_b (nan when sigma_b fixed at 0)
    cov: np.ndarray  # covariance of (alpha, beta)
    loglik: float
    gradient: np.ndarray
    sigma_b: float
    converged: bool
    iterations: int
    boundary: bool
    quad_nodes: int
    diagnostics: dict = field(default_factory=dict)


GLMM_LOG_SIGMA_BOUNDS = (-9.0, 3.0)
GLMM_GTOL = 1e-6


def _numeric_hessian(fun_grad, x, rel_step=1e-5):
    k = x.size
    h = np.empty((k, k))
    for i in range(k):
        step = rel_step * max(1.0, abs(x[i]))
        e = np.zeros(k)
        e[i] = step
        h[i] = (fun_grad(x + e) - fun_grad(x - e)) / (2.0 * step)
    return 0.5 * (h + h.T)


def glmm_logit_fit_model(
    data: ObservedDataset,
    quad_nodes: int = 15,
    sigma_b: float | None = None,
) -> GlmmFit:
    """Maximise the adaptive-quadrature marginal likelihood of the random-intercept logit model.

    ``sigma_b=None`` estimates the random-intercept SD; a number holds it
    fixed (0 reduces to ordinary logistic regression). ``quad_nodes=1`` is
    the Laplace approximation.
    """
    _require_two_per_arm(data)
    if quad_nodes < 1:
        raise ValueError("quad_nodes must be at least 1")
    pat = BinomialPatterns.from_data(data)
    p1 = pat.count @ (pat.events * pat.z) / (pat.count @ (pat.n * pat.z))
    p0 = pat.count @ (pat.events * (1 - pat.z)) / (pat.count @ (pat.n * (1 - pat.z)))
    if not (0 < p1 < 1 and 0 < p0 < 1):
        raise ValidationError("an arm has no events or only events; logistic fit diverges")
    a0 = math.log(p0 / (1 - p0))
    start = np.array([a0, math.log(p1 / (1 - p1)) - a0])
    nodes, qw = np.polynomial.hermite.hermgauss(quad_nodes)

    if sigma_b is not None and sigma_b <= 0.0:
        def negll_ab(ab):
            ll, g = _logistic_loglik(ab, pat)
            return -ll, -g
        tau_fixed = None
    elif sigma_b is not None:
        tau_fixed = math.log(sigma_b)

        def negll_ab(ab):
            ll, g = glmm_loglik(np.array([ab[0], ab[1], tau_fixed]), pat, nodes, qw)
            return -ll, -g[:2]
    else:
        negll_ab = None

    if negll_ab is not None:
        res = optimize.minimize(
            negll_ab, start, jac=True, method="BFGS", options={"gtol": GLMM_GTOL, "maxiter": 500}
        )
        ab = res.x
        ll, g = negll_ab(ab)
        hess = _numeric_hessian(lambda q: negll_ab(q)[1], ab)
        params = np.array([ab[0], ab[1], np.nan if tau_fixed is None else tau_fixed])
        boundary = tau_fixed is None
        sig = 0.0 if tau_fixed is None else float(sigma_b)
        grad = -g
        ll = -ll
        converged = bool(np.max(np.abs(grad)) <= GLMM_GTOL * max(1.0, abs(ll)) or res.success)
        iters = int(res.nit)
    else:
        def negll(theta):
            ll, g = glmm_loglik(theta, pat, nodes, qw)
            return -ll, -g

        x0 = np.array([start[0], start[1], math.log(0.5)])
        bounds = [(None, None), (None, None), GLMM_LOG_SIGMA_BOUNDS]
        res = optimize.minimize(
            negll, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"gtol": GLMM_GTOL, "ftol": 1e-15, "maxiter": 1000},
        )
        theta = res.x
        boundary = theta[2] <= GLMM_LOG_SIGMA_BOUNDS[0] + 1e-6
        if boundary:
            # profile away the flat log-sigma direction at the lower bound
            def negll_ab(ab):
                ll, g = glmm_loglik(np.array([ab[0], ab[1], theta[2]]), pat, nodes, qw)
                return -ll, -g[:2]
            hess = _numeric_hessian(lambda q: negll_ab(q)[1], theta[:2])
        else:
            hess_full = _numeric_hessian(lambda q: negll(q)[1], theta)
            hess = hess_full
        nll, ng = negll(theta)
        ll, grad = -nll, -ng
        params = theta
        sig = math.exp(theta[2])
        free = grad[:2] if boundary else grad
        converged = bool(np.max(np.abs(free)) <= GLMM_GTOL * max(1.0, abs(ll)))
        iters = int(res.nit)

    try:
        cov_full = np.linalg.inv(hess)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("observed information is singular") from exc
    cov = cov_full[:2, :2]
    if not (np.all(np.isfinite(cov)) and cov[1, 1] > 0):
        raise RankDeficiencyError("observed information is not positive definite")
    if not converged:
        raise ConvergenceError(f"GLMM optimiser stopped without meeting the gradient tolerance: {grad}")
    return GlmmFit(
        params=params,
        cov=cov,
        loglik=float(ll),
        gradient=np.asarray(grad),
        sigma_b=sig,
        converged=converged,
        iterations=iters,
        boundary=bool(boundary),
        quad_nodes=quad_nodes,
        diagnostics={"patterns": int(pat.n.size)},
    )


def glmm_logit_fit(
    data: ObservedDataset, quad_nodes: int = 15, sigma_b: float | None = None
) -> EstimateResult:
    """Random-intercept logistic model; conditional odds ratio with model-based z interval."""
    fit = glmm_logit_fit_model(data, quad_nodes, sigma_b)
    return wald_result(
        fit.params[1],
        math.sqrt(fit.cov[1, 1]),
        Measure.ODDS_RATIO,
        df=None,
        variance_method="model-based",
        diagnostics={
            "sigma_b_sq": fit.sigma_b**2,
            "loglik": fit.loglik,
            "iterations": fit.iterations,
            "converged": fit.converged,
            "boundary": fit.boundary,
            "quad_nodes": fit.quad_nodes,
            "sigma_b_fixed": sigma_b is not None,
        },
    )
