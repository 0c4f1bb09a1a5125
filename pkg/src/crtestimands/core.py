"""Domain types for cluster-randomised trial data and results.

Everything here is immutable after construction. Datasets keep a flat,
participant-level view (``y``, ``cluster_index``) alongside per-cluster arrays
(``sizes``, ``treatment``) because every estimator in the package works with
one or the other.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import stats


class CRTError(Exception):
    """Base class for package errors."""


class ValidationError(CRTError, ValueError):
    """Input data violates a structural invariant."""


class EstimationError(CRTError, ArithmeticError):
    """An estimator could not produce a result for otherwise valid data."""


class UndefinedEstimandError(EstimationError):
    """The requested estimand is undefined for this potential-outcome table."""


class BoundednessError(EstimationError):
    """Cluster proportions at 0 or 1 where a cluster-level log-odds is needed."""

    def __init__(self, message: str, clusters: Sequence[Hashable] = ()):
        super().__init__(message)
        self.clusters = tuple(clusters)


class DegenerateArmError(EstimationError):
    """An arm-level proportion sits at 0 or 1, so its logit is infinite."""


class SeparationError(DegenerateArmError):
    """Weighted arm mean at 0 or 1 under a logit link."""


class InestimableVarianceError(EstimationError):
    """Too few clusters to estimate a cluster-robust variance."""


class RankDeficiencyError(EstimationError):
    """Singular bread or information matrix."""


class ConvergenceError(EstimationError):
    def __init__(self, message: str, trace: Sequence[Any] = ()):
        super().__init__(message)
        self.trace = list(trace)


class OutcomeKind(str, enum.Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class Margin(str, enum.Enum):
    MARGINAL = "marginal"
    CLUSTER_SPECIFIC = "cluster-specific"


class Weighting(str, enum.Enum):
    PARTICIPANT = "participant-average"
    CLUSTER = "cluster-average"


class Measure(str, enum.Enum):
    DIFFERENCE = "difference"
    ODDS_RATIO = "odds-ratio"


class Averaging(str, enum.Enum):
    """How cluster-specific odds ratios are averaged across clusters."""

    LOG = "log"
    IDENTITY = "identity"


class BoundaryPolicy(str, enum.Enum):
    ERROR = "error"
    CONTINUITY_CORRECTION = "cc"


@dataclass(frozen=True)
class EstimandSpec:
    margin: Margin
    weighting: Weighting
    measure: Measure
    averaging: Averaging = Averaging.LOG

    @property
    def label(self) -> str:
        return f"{self.margin.value}, {self.weighting.value}"


def _as_outcome_array(values: Iterable[float], where: str) -> np.ndarray:
    try:
        if not isinstance(values, np.ndarray):
            values = list(values)
        arr = np.array(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"non-numeric outcome in {where}") from exc
    if arr.ndim != 1:
        raise ValidationError(f"outcomes for {where} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"missing or non-finite outcome in {where}")
    arr.setflags(write=False)
    return arr


def _is_binary(arr: np.ndarray) -> bool:
    return bool(np.all((arr == 0.0) | (arr == 1.0)))


def _resolve_kind(kind: OutcomeKind | str | None, *arrays: np.ndarray) -> OutcomeKind:
    binary = all(_is_binary(a) for a in arrays)
    if kind is None:
        return OutcomeKind.BINARY if binary else OutcomeKind.CONTINUOUS
    kind = OutcomeKind(kind)
    if kind is OutcomeKind.BINARY and not binary:
        raise ValidationError("binary outcome kind requires every value in {0, 1}")
    return kind


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ClusterRecord:
    cluster_id: Hashable
    treatment: int
    outcomes: np.ndarray

    def __post_init__(self):
        if self.treatment not in (0, 1):
            raise ValidationError(
                f"cluster {self.cluster_id!r}: treatment must be 0 or 1, got {self.treatment!r}"
            )
        object.__setattr__(self, "treatment", int(self.treatment))
        object.__setattr__(
            self, "outcomes", _as_outcome_array(self.outcomes, f"cluster {self.cluster_id!r}")
        )
        if self.outcomes.size == 0:
            raise ValidationError(f"cluster {self.cluster_id!r} has no outcomes")

    @property
    def n(self) -> int:
        return int(self.outcomes.size)


class ObservedDataset:
    """Observed outcomes ``Y_ij`` with a cluster-level treatment ``Z_j``.

    Parameters
    ----------
    clusters : iterable of ClusterRecord
        One record per cluster; order is preserved everywhere downstream.
    outcome_kind : OutcomeKind, optional
        Inferred from the data when omitted (binary iff every value is 0 or 1).
    """

    def __init__(self, clusters: Iterable[ClusterRecord], outcome_kind: OutcomeKind | str | None = None):
        clusters = tuple(clusters)
        if not clusters:
            raise ValidationError("dataset has no clusters")
        ids = [c.cluster_id for c in clusters]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValidationError(f"duplicate cluster_id {dup!r}")
        self.clusters = clusters
        self.cluster_ids = tuple(ids)
        self.sizes = _frozen(np.array([c.n for c in clusters], dtype=np.int64))
        self.treatment = _frozen(np.array([c.treatment for c in clusters], dtype=np.int64))
        self.y = _frozen(np.concatenate([c.outcomes for c in clusters]))
        self.cluster_index = _frozen(np.repeat(np.arange(len(clusters)), self.sizes))
        self.outcome_kind = _resolve_kind(outcome_kind, self.y)

    @classmethod
    def from_long(
        cls,
        cluster_id: Sequence[Hashable],
        treatment: Sequence[int],
        outcome: Sequence[float],
        outcome_kind: OutcomeKind | str | None = None,
    ) -> ObservedDataset:
        """Build from participant-level columns, grouping by first appearance."""
        if not (len(cluster_id) == len(treatment) == len(outcome)):
            raise ValidationError("columns must have equal length")
        order: dict[Hashable, int] = {}
        arms: dict[Hashable, int] = {}
        values: dict[Hashable, list] = {}
        for cid, z, yv in zip(cluster_id, treatment, outcome):
            if cid not in order:
                order[cid] = len(order)
                arms[cid] = z
                values[cid] = []
            elif arms[cid] != z:
                raise ValidationError(f"cluster {cid!r} has mixed treatment assignment")
            values[cid].append(yv)
        records = [ClusterRecord(cid, arms[cid], values[cid]) for cid in order]
        return cls(records, outcome_kind)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_participants(self) -> int:
        return int(self.y.size)

    @property
    def treatment_long(self) -> np.ndarray:
        return self.treatment[self.cluster_index]

    def require_both_arms(self) -> None:
        if not (np.any(self.treatment == 1) and np.any(self.treatment == 0)):
            raise ValidationError("estimation needs at least one treated and one control cluster")

    def filter_sizes(self, min_size: int | None = None, max_size: int | None = None) -> ObservedDataset:
        """Keep clusters with ``min_size <= n_j`` and ``n_j < max_size``."""
        keep = [
            c for c in self.clusters
            if (min_size is None or c.n >= min_size) and (max_size is None or c.n < max_size)
        ]
        return ObservedDataset(keep, self.outcome_kind)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObservedDataset):
            return NotImplemented
        return (
            self.cluster_ids == other.cluster_ids
            and self.outcome_kind == other.outcome_kind
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.sizes, other.sizes)
            and np.array_equal(self.y, other.y)
        )

    def __repr__(self) -> str:
        return (
            f"ObservedDataset(M={self.n_clusters}, N={self.n_participants}, "
            f"kind={self.outcome_kind.value})"
        )


@dataclass(frozen=True, eq=False)
class PotentialClusterRecord:
    cluster_id: Hashable
    y1: np.ndarray
    y0: np.ndarray

    def __post_init__(self):
        where = f"cluster {self.cluster_id!r}"
        object.__setattr__(self, "y1", _as_outcome_array(self.y1, where))
        object.__setattr__(self, "y0", _as_outcome_array(self.y0, where))
        if self.y1.size != self.y0.size:
            raise ValidationError(f"{where}: y1 and y0 differ in length")
        if self.y1.size == 0:
            raise ValidationError(f"{where} has no participants")

    @property
    def n(self) -> int:
        return int(self.y1.size)


class PotentialOutcomeDataset:
    """Both potential outcomes ``Y_ij(1)``, ``Y_ij(0)`` for every participant."""

    def __init__(
        self,
        clusters: Iterable[PotentialClusterRecord],
        outcome_kind: OutcomeKind | str | None = None,
    ):
        clusters = tuple(clusters)
        if not clusters:
            raise ValidationError("potential-outcome table has no clusters")
        ids = [c.cluster_id for c in clusters]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate cluster_id in potential-outcome table")
        self.clusters = clusters
        self.cluster_ids = tuple(ids)
        self.sizes = _frozen(np.array([c.n for c in clusters], dtype=np.int64))
        self.y1 = _frozen(np.concatenate([c.y1 for c in clusters]))
        self.y0 = _frozen(np.concatenate([c.y0 for c in clusters]))
        self.cluster_index = _frozen(np.repeat(np.arange(len(clusters)), self.sizes))
        self.outcome_kind = _resolve_kind(outcome_kind, self.y1, self.y0)

    @classmethod
    def from_long(
        cls,
        cluster_id: Sequence[Hashable],
        y1: Sequence[float],
        y0: Sequence[float],
        outcome_kind: OutcomeKind | str | None = None,
    ) -> PotentialOutcomeDataset:
        if not (len(cluster_id) == len(y1) == len(y0)):
            raise ValidationError("columns must have equal length")
        groups: dict[Hashable, tuple[list, list]] = {}
        for cid, a, b in zip(cluster_id, y1, y0):
            g = groups.setdefault(cid, ([], []))
            g[0].append(a)
            g[1].append(b)
        return cls([PotentialClusterRecord(c, g[0], g[1]) for c, g in groups.items()], outcome_kind)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_participants(self) -> int:
        return int(self.y1.size)

    def observe(self, treatment: Sequence[int]) -> ObservedDataset:
        """Reveal ``Y_ij = Y_ij(Z_j)`` under a cluster assignment."""
        treatment = np.asarray(treatment, dtype=np.int64)
        if treatment.shape != (self.n_clusters,):
            raise ValidationError("need one treatment indicator per cluster")
        records = [
            ClusterRecord(c.cluster_id, int(z), c.y1 if z else c.y0)
            for c, z in zip(self.clusters, treatment)
        ]
        return ObservedDataset(records, self.outcome_kind)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PotentialOutcomeDataset):
            return NotImplemented
        return (
            self.cluster_ids == other.cluster_ids
            and self.outcome_kind == other.outcome_kind
            and np.array_equal(self.sizes, other.sizes)
            and np.array_equal(self.y1, other.y1)
            and np.array_equal(self.y0, other.y0)
        )

    def __repr__(self) -> str:
        return (
            f"PotentialOutcomeDataset(M={self.n_clusters}, N={self.n_participants}, "
            f"kind={self.outcome_kind.value})"
        )


@dataclass(frozen=True)
class ClusterSummary:
    cluster_id: Hashable
    treatment: int
    n: int
    mean: float
    log_odds: float | None = None


def _logit(p):
    return np.log(p) - np.log1p(-p)


def cluster_means(data: ObservedDataset) -> np.ndarray:
    """Per-cluster outcome means, in cluster order."""
    totals = np.bincount(data.cluster_index, weights=data.y, minlength=data.n_clusters)
    return totals / data.sizes


def summarize_clusters(data: ObservedDataset) -> list[ClusterSummary]:
    """One :class:`ClusterSummary` per cluster.

    ``log_odds`` is only filled in for binary outcomes with a cluster mean
    strictly inside (0, 1); boundary clusters keep ``None``.
    """
    out = []
    binary = data.outcome_kind is OutcomeKind.BINARY
    for c in data.clusters:
        mean = math.fsum(c.outcomes) / c.n
        lo = float(_logit(mean)) if binary and 0.0 < mean < 1.0 else None
        out.append(ClusterSummary(c.cluster_id, c.treatment, c.n, mean, lo))
    return out


def _plain(value: Any) -> Any:
    """Convert numpy scalars/arrays to JSON-friendly python values."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass(frozen=True)
class EstimateResult:
    """Point estimate plus Wald inference.

    ``estimate``, ``ci_low`` and ``ci_high`` are on the natural scale (an odds
    ratio is already exponentiated); ``link_scale_estimate`` and ``se_link``
    live on the scale where the interval was built. ``df`` is ``None`` when a
    normal reference distribution was used.
    """

    estimate: float
    link_scale_estimate: float
    se_link: float
    ci_low: float
    ci_high: float
    p_value: float
    df: float | None
    variance_method: str
    measure: Measure
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "link_scale_estimate": self.link_scale_estimate,
            "se_link": self.se_link,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
            "df": self.df,
            "variance_method": self.variance_method,
            "measure": self.measure.value,
            "diagnostics": _plain(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> EstimateResult:
        return cls(
            estimate=d["estimate"],
            link_scale_estimate=d["link_scale_estimate"],
            se_link=d["se_link"],
            ci_low=d["ci_low"],
            ci_high=d["ci_high"],
            p_value=d["p_value"],
            df=d["df"],
            variance_method=d["variance_method"],
            measure=Measure(d["measure"]),
            diagnostics=dict(d.get("diagnostics", {})),
        )


def wald_result(
    link_estimate: float,
    se: float,
    measure: Measure,
    *,
    df: float | None,
    variance_method: str,
    diagnostics: Mapping | None = None,
    level: float = 0.95,
) -> EstimateResult:
    """Wald interval and two-sided p-value on the link scale.

    Uses a t reference with ``df`` degrees of freedom, or the normal when
    ``df`` is None. Odds ratios are exponentiated after the interval is built.
    """
    link_estimate = float(link_estimate)
    se = float(se)
    if not (math.isfinite(se) and se >= 0.0):
        raise EstimationError(f"invalid standard error {se!r}")
    if df is not None and df <= 0:
        raise InestimableVarianceError(f"non-positive degrees of freedom ({df})")
    ref = stats.norm if df is None else stats.t(df)
    crit = float(ref.ppf(0.5 + level / 2.0))
    lo, hi = link_estimate - crit * se, link_estimate + crit * se
    if se > 0.0:
        p = float(2.0 * ref.sf(abs(link_estimate) / se))
    else:
        p = 1.0 if link_estimate == 0.0 else 0.0
    if measure is Measure.ODDS_RATIO:
        est, lo, hi = math.exp(link_estimate), math.exp(lo), math.exp(hi)
    else:
        est = link_estimate
    return EstimateResult(
        estimate=est,
        link_scale_estimate=link_estimate,
        se_link=se,
        ci_low=lo,
        ci_high=hi,
        p_value=min(max(p, 0.0), 1.0),
        df=None if df is None else float(df),
        variance_method=variance_method,
        measure=measure,
        diagnostics=_plain(dict(diagnostics or {})),
    )
