"""Analyses of cluster-level summaries.

With only an intercept and a treatment indicator, every cluster-level
regression here has a closed-form solution: the treatment coefficient is a
contrast of weighted arm averages. Weights are ``n_j`` for the
participant-average versions and 1 for the cluster-average versions.

* marginal: ``logit(P1) - logit(P0)`` where ``Pz`` averages cluster
  proportions in arm ``z`` (the GLM fit on proportions, any family);
* cluster-specific: difference of weighted arm means of cluster log-odds
  (the weighted linear regression on transformed summaries).

For a difference measure the two coincide.
"""

from __future__ import annotations

from collections.abc import Hashable
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BoundaryPolicy,
    BoundednessError,
    DegenerateArmError,
    EstimateResult,
    InestimableVarianceError,
    Measure,
    ObservedDataset,
    OutcomeKind,
    ValidationError,
    Weighting,
    cluster_means,
    wald_result,
)


@dataclass(frozen=True, eq=False)
class SummaryRegressionFit:
    """Cluster-level two-group regression.

    ``residuals`` are working residuals on the link scale, so the usual
    weighted least-squares sandwich applies to both the linear and the logit
    fits.
    """

    beta_hat: float
    alpha_hat: float
    arm_aggregates: tuple[float, float]  # (treated, control) on the response scale being contrasted
    weights_used: str
    weights: np.ndarray
    treatment: np.ndarray
    residuals: np.ndarray
    link: str
    diagnostics: dict = field(default_factory=dict)


def _cluster_weights(data: ObservedDataset, weighting: Weighting) -> tuple[np.ndarray, str]:
    if Weighting(weighting) is Weighting.PARTICIPANT:
        return data.sizes.astype(float), "cluster-size"
    return np.ones(data.n_clusters), "equal"


def _arm_weighted_means(values: np.ndarray, weights: np.ndarray, z: np.ndarray) -> tuple[float, float]:
    t, c = z == 1, z == 0
    return (
        float(np.dot(weights[t], values[t]) / weights[t].sum()),
        float(np.dot(weights[c], values[c]) / weights[c].sum()),
    )


def _check_binary(data: ObservedDataset, measure: Measure) -> None:
    if measure is Measure.ODDS_RATIO and data.outcome_kind is not OutcomeKind.BINARY:
        raise ValidationError("odds ratios need a binary outcome")


def logit(p):
    return np.log(p) - np.log1p(-p)


def marginal_summary_fit(
    data: ObservedDataset, weighting: Weighting, measure: Measure
) -> SummaryRegressionFit:
    measure = Measure(measure)
    data.require_both_arms()
    _check_binary(data, measure)
    pi = cluster_means(data)
    w, tag = _cluster_weights(data, weighting)
    z = data.treatment
    p1, p0 = _arm_weighted_means(pi, w, z)
    fitted = np.where(z == 1, p1, p0)
    if measure is Measure.ODDS_RATIO:
        for label, p in (("treated", p1), ("control", p0)):
            if not 0.0 < p < 1.0:
                raise DegenerateArmError(f"{label} arm proportion is {p}; logit undefined")
        alpha = float(logit(p0))
        beta = float(logit(p1)) - alpha
        # d logit(mu)/d mu = 1 / (mu (1 - mu)): IRLS working residuals
        resid = (pi - fitted) / (fitted * (1.0 - fitted))
        link = "logit"
    else:
        alpha, beta = p0, p1 - p0
        resid = pi - fitted
        link = "identity"
    return SummaryRegressionFit(
        beta_hat=beta,
        alpha_hat=alpha,
        arm_aggregates=(p1, p0),
        weights_used=tag,
        weights=w,
        treatment=z.copy(),
        residuals=resid,
        link=link,
        diagnostics={"arm_proportion_treated": p1, "arm_proportion_control": p0},
    )


def cluster_log_odds(
    data: ObservedDataset,
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR,
) -> tuple[np.ndarray, list[Hashable]]:
    """Cluster log-odds, plus the ids of clusters that were continuity-corrected."""
    boundary_policy = BoundaryPolicy(boundary_policy)
    pi = cluster_means(data)
    edge = (pi <= 0.0) | (pi >= 1.0)
    ids = [data.cluster_ids[i] for i in np.flatnonzero(edge)]
    if ids and boundary_policy is BoundaryPolicy.ERROR:
        raise BoundednessError(
            f"{len(ids)} cluster(s) with all or no events; cluster log-odds undefined: {ids[:10]}",
            ids,
        )
    if ids:
        events = pi * data.sizes
        pi = np.where(edge, (events + 0.5) / (data.sizes + 1.0), pi)
    return logit(pi), ids


def cluster_specific_summary_fit(
    data: ObservedDataset,
    weighting: Weighting,
    measure: Measure,
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR,
) -> SummaryRegressionFit:
    measure = Measure(measure)
    data.require_both_arms()
    _check_binary(data, measure)
    corrected: list[Hashable] = []
    if measure is Measure.ODDS_RATIO:
        response, corrected = cluster_log_odds(data, boundary_policy)
    else:
        response = cluster_means(data)
    w, tag = _cluster_weights(data, weighting)
    z = data.treatment
    m1, m0 = _arm_weighted_means(response, w, z)
    resid = response - np.where(z == 1, m1, m0)
    diagnostics = {"arm_mean_treated": m1, "arm_mean_control": m0}
    if corrected:
        diagnostics["continuity_corrected"] = list(map(str, corrected))
    return SummaryRegressionFit(
        beta_hat=m1 - m0,
        alpha_hat=m0,
        arm_aggregates=(m1, m0),
        weights_used=tag,
        weights=w,
        treatment=z.copy(),
        residuals=resid,
        link="identity",
        diagnostics=diagnostics,
    )


def huber_white_vcov(fit: SummaryRegressionFit) -> float:
    """HC0 sandwich variance of the treatment coefficient.

    ``(D'WD)^-1 (sum_j w_j^2 e_j^2 d_j d_j') (D'WD)^-1`` with ``d_j = (1, Z_j)``.
    """
    z = fit.treatment
    n1, n0 = int(np.sum(z == 1)), int(np.sum(z == 0))
    if n1 < 2 or n0 < 2:
        raise InestimableVarianceError(
            f"need at least two clusters per arm for a robust variance (treated={n1}, control={n0})"
        )
    d = np.column_stack([np.ones_like(z, dtype=float), z.astype(float)])
    w = fit.weights
    bread = np.linalg.inv(d.T @ (w[:, None] * d))
    u = (w * fit.residuals)[:, None] * d
    meat = u.T @ u
    return float((bread @ meat @ bread)[1, 1])


def _result(fit: SummaryRegressionFit, data: ObservedDataset, measure: Measure, **extra) -> EstimateResult:
    var = huber_white_vcov(fit)
    return wald_result(
        fit.beta_hat,
        np.sqrt(max(var, 0.0)),
        measure,
        df=data.n_clusters - 2,
        variance_method="HC0",
        diagnostics={**fit.diagnostics, "weights": fit.weights_used, **extra},
    )


def marginal_summary_estimate(
    data: ObservedDataset, weighting: Weighting, measure: Measure
) -> EstimateResult:
    """Marginal estimator from cluster proportions, with HC0 standard errors."""
    measure = Measure(measure)
    return _result(marginal_summary_fit(data, weighting, measure), data, measure)


def cluster_specific_summary_estimate(
    data: ObservedDataset,
    weighting: Weighting,
    measure: Measure,
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR,
) -> EstimateResult:
    """Cluster-specific estimator from (log-odds of) cluster proportions, with HC0 standard errors."""
    measure = Measure(measure)
    fit = cluster_specific_summary_fit(data, weighting, measure, boundary_policy)
    return _result(fit, data, measure)
