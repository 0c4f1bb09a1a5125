"""GEE with an exchangeable working correlation.

The exchangeable correlation matrix ``R = (1 - rho) I + rho 11'`` has the
closed-form inverse ``(I - c 11') / (1 - rho)`` with
``c = rho / (1 + (n_j - 1) rho)``, so cluster quadratic forms reduce to sums
and never need an ``n_j x n_j`` matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import (
    ConvergenceError,
    EstimateResult,
    Measure,
    ObservedDataset,
    OutcomeKind,
    RankDeficiencyError,
    ValidationError,
    wald_result,
)
from .engine import GlmFit, Link, SandwichSpec, cluster_robust_vcov, design, fit_working_glm

GEE_TOL = 1e-8
GEE_MAX_ITER = 200
_RHO_MARGIN = 1e-6
_MIN_EIGEN = 0.05  # floor on 1 + (n_max - 1) rho after a clamp from below


@dataclass(frozen=True, eq=False)
class GeeFit(GlmFit):
    rho_hat: float = 0.0
    phi_hat: float = 1.0
    rho_clamped: bool = False


def _mean_and_derivative(link: Link, eta: np.ndarray):
    if link is Link.LOGIT:
        mu = expit(eta)
        v = mu * (1.0 - mu)
        return mu, v, v
    return eta, np.ones_like(eta), np.ones_like(eta)


def _cluster_sums(idx, m, values):
    return np.bincount(idx, weights=values, minlength=m)


def _score_and_info(data, x, link, coef, rho, phi):
    """Per-cluster ``D'V^-1 (y - mu)`` and ``D'V^-1 D`` under exchangeable R."""
    idx, m, n = data.cluster_index, data.n_clusters, data.sizes
    mu, v, dmu = _mean_and_derivative(link, x @ coef)
    sd = np.sqrt(v)
    a = (dmu / sd)[:, None] * x  # standardized derivative rows
    r = (data.y - mu) / sd
    c = rho / (1.0 + (n - 1) * rho)
    scale = 1.0 / (phi * (1.0 - rho))

    sum_r = _cluster_sums(idx, m, r)
    sum_a = np.column_stack([_cluster_sums(idx, m, a[:, k]) for k in range(2)])
    ar = np.column_stack([_cluster_sums(idx, m, a[:, k] * r) for k in range(2)])
    scores = scale * (ar - (c * sum_r)[:, None] * sum_a)

    aa = np.empty((m, 2, 2))
    for p in range(2):
        for q in range(p, 2):
            s = _cluster_sums(idx, m, a[:, p] * a[:, q])
            aa[:, p, q] = aa[:, q, p] = s
    info = scale * (aa - c[:, None, None] * sum_a[:, :, None] * sum_a[:, None, :])
    return scores, info, mu, r


def _moment_updates(data, r, n_params, estimate_rho, rho):
    """Pearson-residual moment estimates of dispersion and exchangeable correlation."""
    n_obs = data.n_participants
    phi = float(np.sum(r**2) / (n_obs - n_params))
    if not estimate_rho:
        return phi, rho, False
    sizes = data.sizes
    n_pairs = float(np.sum(sizes * (sizes - 1)) / 2.0)
    if n_pairs - n_params <= 0 or phi <= 0:
        return phi, 0.0, False
    s = _cluster_sums(data.cluster_index, data.n_clusters, r)
    s2 = _cluster_sums(data.cluster_index, data.n_clusters, r**2)
    raw = float(np.sum((s**2 - s2) / 2.0) / (phi * (n_pairs - n_params)))
    nmax = int(sizes.max())
    lo = -(1.0 - _MIN_EIGEN) / (nmax - 1) if nmax > 1 else 0.0
    hi = 1.0 - _RHO_MARGIN
    clamped = not lo <= raw <= hi
    return phi, min(max(raw, lo), hi), clamped


def gee_exchangeable_fit(
    data: ObservedDataset,
    link: Link | str = Link.LOGIT,
    rho: float | str = "estimate",
) -> GeeFit:
    """Alternate Fisher scoring for ``(alpha, beta)`` with moment updates of ``rho`` and ``phi``.

    Pass a number as ``rho`` to hold the working correlation fixed.
    """
    link = Link(link)
    if link is Link.LOGIT and data.outcome_kind is not OutcomeKind.BINARY:
        raise ValidationError("logit link needs a binary outcome")
    estimate_rho = isinstance(rho, str)
    if estimate_rho and rho != "estimate":
        raise ValueError(f"rho must be 'estimate' or a number, got {rho!r}")
    rho_val = 0.0 if estimate_rho else float(rho)
    if not estimate_rho and not -1.0 < rho_val < 1.0:
        raise ValueError(f"fixed rho must lie in (-1, 1), got {rho_val}")

    start = fit_working_glm(data, link)
    x = design(data)
    coef = start.coefficients.copy()
    p = 2
    phi = 1.0
    clamped = False
    trace = []
    converged = False
    for it in range(1, GEE_MAX_ITER + 1):
        mu, v, _ = _mean_and_derivative(link, x @ coef)
        r = (data.y - mu) / np.sqrt(v)
        phi, new_rho, clamped = _moment_updates(data, r, p, estimate_rho, rho_val)
        if phi <= 0.0:
            phi = 1.0  # perfect fit; the scale cancels from the mean equations
        rho_step = abs(new_rho - rho_val)
        rho_val = new_rho
        scores, info, _, _ = _score_and_info(data, x, link, coef, rho_val, phi)
        a = info.sum(axis=0)
        try:
            step = np.linalg.solve(a, scores.sum(axis=0))
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError("singular GEE information matrix") from exc
        coef = coef + step
        delta = float(np.max(np.abs(step)))
        trace.append((it, coef.tolist(), rho_val, delta))
        if delta <= GEE_TOL * max(1.0, float(np.max(np.abs(coef)))) and rho_step <= GEE_TOL:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"GEE did not converge in {GEE_MAX_ITER} iterations", trace)

    scores, info, mu, _ = _score_and_info(data, x, link, coef, rho_val, phi)
    return GeeFit(
        coefficients=coef,
        link=link,
        weights=np.ones(data.n_participants),
        fitted=mu,
        cluster_scores=scores,
        cluster_bread=info,
        converged=True,
        iterations=it,
        trace=trace,
        rho_hat=rho_val,
        phi_hat=phi,
        rho_clamped=clamped,
    )


def gee_fit(
    data: ObservedDataset,
    link: Link | str = Link.LOGIT,
    rho: float | str = "estimate",
    sandwich: SandwichSpec = SandwichSpec(),
) -> EstimateResult:
    """Exchangeable GEE estimate with cluster-robust (default Fay-Graubard) errors."""
    fit = gee_exchangeable_fit(data, link, rho)
    measure = Measure.ODDS_RATIO if fit.link is Link.LOGIT else Measure.DIFFERENCE
    var = cluster_robust_vcov(fit, sandwich)
    return wald_result(
        fit.beta,
        math.sqrt(max(var, 0.0)),
        measure,
        df=data.n_clusters - 2,
        variance_method=sandwich.tag,
        diagnostics={
            "rho": fit.rho_hat,
            "phi": fit.phi_hat,
            "rho_clamped": fit.rho_clamped,
            "rho_fixed": not isinstance(rho, str),
            "iterations": fit.iterations,
            "converged": fit.converged,
        },
    )
