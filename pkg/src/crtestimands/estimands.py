"""True estimand values computed from complete potential-outcome tables.

All pooled sums go through :func:`math.fsum` so that identities such as
marginal == cluster-specific for differences hold to ~1e-15.
"""

from __future__ import annotations

import math
from collections.abc import Hashable
from dataclasses import dataclass

from .core import (
    Averaging,
    BoundaryPolicy,
    BoundednessError,
    EstimandSpec,
    Margin,
    Measure,
    PotentialOutcomeDataset,
    UndefinedEstimandError,
    Weighting,
)


def odds(p: float) -> float:
    return p / (1.0 - p)


def corrected_mean(events: float, n: int) -> float:
    """Add half an event and half a non-event."""
    return (events + 0.5) / (n + 1.0)


@dataclass(frozen=True)
class ClusterContrast:
    cluster_id: Hashable
    n: int
    mean1: float
    mean0: float
    beta: float
    odds_ratio: float | None
    corrected: bool = False


def cluster_contrasts(
    po: PotentialOutcomeDataset,
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR,
) -> list[ClusterContrast]:
    """Per-cluster mean potential outcomes, difference and odds ratio.

    ``odds_ratio`` is ``None`` when either arm mean is 0 or 1. With
    ``BoundaryPolicy.CONTINUITY_CORRECTION`` such an arm mean is replaced by
    ``(events + 0.5) / (n + 1)`` for the odds ratio only, mirroring what the
    cluster-summary estimator does to observed boundary clusters.
    """
    boundary_policy = BoundaryPolicy(boundary_policy)
    out = []
    for c in po.clusters:
        n = c.n
        s1, s0 = math.fsum(c.y1), math.fsum(c.y0)
        m1, m0 = s1 / n, s0 / n
        o1, o0 = m1, m0
        corrected = False
        if boundary_policy is BoundaryPolicy.CONTINUITY_CORRECTION:
            if not 0.0 < m1 < 1.0:
                o1, corrected = corrected_mean(s1, n), True
            if not 0.0 < m0 < 1.0:
                o0, corrected = corrected_mean(s0, n), True
        ratio = odds(o1) / odds(o0) if (0.0 < o1 < 1.0 and 0.0 < o0 < 1.0) else None
        out.append(ClusterContrast(c.cluster_id, n, m1, m0, m1 - m0, ratio, corrected))
    return out


def _arm_means(po: PotentialOutcomeDataset, weighting: Weighting) -> tuple[float, float]:
    weighting = Weighting(weighting)
    if weighting is Weighting.PARTICIPANT:
        n = po.n_participants
        return math.fsum(po.y1) / n, math.fsum(po.y0) / n
    m = po.n_clusters
    return (
        math.fsum(math.fsum(c.y1) / c.n for c in po.clusters) / m,
        math.fsum(math.fsum(c.y0) / c.n for c in po.clusters) / m,
    )


def marginal_estimand(po: PotentialOutcomeDataset, weighting: Weighting, measure: Measure) -> float:
    """Contrast of arm-level mean potential outcomes.

    Participant-average pools every participant; cluster-average first takes
    each cluster mean and then gives clusters equal weight. For odds ratios
    the odds transform is applied to those already-averaged means.
    """
    p1, p0 = _arm_means(po, weighting)
    if Measure(measure) is Measure.DIFFERENCE:
        return p1 - p0
    for label, p in (("treated", p1), ("control", p0)):
        if not 0.0 < p < 1.0:
            raise UndefinedEstimandError(
                f"marginal odds ratio undefined: {label} mean potential outcome is {p}"
            )
    return odds(p1) / odds(p0)


def cluster_specific_estimand(
    po: PotentialOutcomeDataset,
    weighting: Weighting,
    measure: Measure,
    averaging: Averaging = Averaging.LOG,
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR,
) -> float:
    """Average of within-cluster contrasts.

    Clusters are weighted by ``n_j`` (participant-average) or equally
    (cluster-average). Odds ratios averaged with ``Averaging.LOG`` are the
    exponentiated weighted mean of ``log OR_j``; ``Averaging.IDENTITY`` is
    the plain weighted mean of ``OR_j`` with nothing to back-transform.
    """
    contrasts = cluster_contrasts(po, boundary_policy)
    if Weighting(weighting) is Weighting.PARTICIPANT:
        weights = [float(c.n) for c in contrasts]
    else:
        weights = [1.0] * len(contrasts)
    total = math.fsum(weights)

    if Measure(measure) is Measure.DIFFERENCE:
        return math.fsum(w * c.beta for w, c in zip(weights, contrasts)) / total

    bad = [c.cluster_id for c in contrasts if c.odds_ratio is None]
    if bad:
        raise BoundednessError(
            f"cluster-specific odds ratio undefined in {len(bad)} cluster(s): {bad[:10]}", bad
        )
    if Averaging(averaging) is Averaging.LOG:
        return math.exp(math.fsum(w * math.log(c.odds_ratio) for w, c in zip(weights, contrasts)) / total)
    return math.fsum(w * c.odds_ratio for w, c in zip(weights, contrasts)) / total


def precision_weighted_estimand(po: PotentialOutcomeDataset, rho: float) -> float:
    """Difference averaged with weights ``n_j / (1 + (n_j - 1) rho)``.

    This is what the GLS slope of a random-intercept linear model estimates
    when the intracluster correlation converges to ``rho``.
    """
    rho = float(rho)
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    contrasts = cluster_contrasts(po)
    weights = [c.n / (1.0 + (c.n - 1) * rho) for c in contrasts]
    return math.fsum(w * c.beta for w, c in zip(weights, contrasts)) / math.fsum(weights)


def estimand_value(
    po: PotentialOutcomeDataset,
    spec: EstimandSpec,
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR,
) -> float:
    if spec.margin is Margin.MARGINAL:
        return marginal_estimand(po, spec.weighting, spec.measure)
    return cluster_specific_estimand(po, spec.weighting, spec.measure, spec.averaging, boundary_policy)


def all_estimands(
    po: PotentialOutcomeDataset,
    measure: Measure,
    averaging: Averaging = Averaging.LOG,
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR,
) -> dict[EstimandSpec, float | Exception]:
    """Evaluate the four margin x weighting estimands; failures are returned, not raised."""
    out: dict[EstimandSpec, float | Exception] = {}
    for margin in Margin:
        for weighting in Weighting:
            spec = EstimandSpec(margin, weighting, Measure(measure), averaging)
            try:
                out[spec] = estimand_value(po, spec, boundary_policy)
            except (UndefinedEstimandError, BoundednessError) as exc:
                out[spec] = exc
    return out
