"""Run every estimator for every estimand on one observed trial.

The grid has four estimand blocks and eight estimator rows:

==============================  ===================================
estimand                        estimators
==============================  ===================================
marginal, participant-average   IEE (unweighted), summaries (weighted), GEE exchangeable
cluster-specific, part.-avg.    summaries (weighted), mixed model
marginal, cluster-average       IEE (weighted), summaries (unweighted)
cluster-specific, cluster-avg.  summaries (unweighted)
==============================  ===================================
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field

from .core import (
    BoundaryPolicy,
    CRTError,
    EstimandSpec,
    EstimateResult,
    EstimationError,
    Margin,
    Measure,
    ObservedDataset,
    OutcomeKind,
    ValidationError,
    Weighting,
)
from .engine import Link, SandwichSpec
from .gee import gee_fit
from .iee import iee_estimate
from .mixed import glmm_logit_fit, lmm_fit
from .summaries import cluster_specific_summary_estimate, marginal_summary_estimate

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class AnalysisOptions:
    measure: Measure | None = None  # None: odds ratio for binary data, difference otherwise
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR
    fg_bound: float = 0.75
    quad_nodes: int = 15
    min_cluster_size: int | None = None
    max_cluster_size: int | None = None

    def __post_init__(self):
        if self.measure is not None:
            object.__setattr__(self, "measure", Measure(self.measure))
        object.__setattr__(self, "boundary_policy", BoundaryPolicy(self.boundary_policy))

    def resolve_measure(self, data: ObservedDataset) -> Measure:
        if self.measure is None:
            return Measure.ODDS_RATIO if data.outcome_kind is OutcomeKind.BINARY else Measure.DIFFERENCE
        if self.measure is Measure.ODDS_RATIO and data.outcome_kind is not OutcomeKind.BINARY:
            raise ValidationError("odds ratios need a binary outcome")
        return self.measure

    def to_dict(self) -> dict:
        d = asdict(self)
        d["measure"] = None if self.measure is None else self.measure.value
        d["boundary_policy"] = self.boundary_policy.value
        return d


# Row runners take (data, measure, options). Module-level so they pickle.


def _iee_pa(data, measure, opt):
    return iee_estimate(data, Weighting.PARTICIPANT, measure, SandwichSpec(b=opt.fg_bound))


def _iee_ca(data, measure, opt):
    return iee_estimate(data, Weighting.CLUSTER, measure, SandwichSpec(b=opt.fg_bound))


def _mg_summ_pa(data, measure, opt):
    return marginal_summary_estimate(data, Weighting.PARTICIPANT, measure)


def _mg_summ_ca(data, measure, opt):
    return marginal_summary_estimate(data, Weighting.CLUSTER, measure)


def _cs_summ_pa(data, measure, opt):
    return cluster_specific_summary_estimate(data, Weighting.PARTICIPANT, measure, opt.boundary_policy)


def _cs_summ_ca(data, measure, opt):
    return cluster_specific_summary_estimate(data, Weighting.CLUSTER, measure, opt.boundary_policy)


def _gee(data, measure, opt):
    link = Link.LOGIT if measure is Measure.ODDS_RATIO else Link.IDENTITY
    return gee_fit(data, link, "estimate", SandwichSpec(b=opt.fg_bound))


def _mixed(data, measure, opt):
    if measure is Measure.ODDS_RATIO:
        return glmm_logit_fit(data, opt.quad_nodes)
    return lmm_fit(data)


@dataclass(frozen=True)
class EstimatorRow:
    key: str
    margin: Margin
    weighting: Weighting
    run: Callable[[ObservedDataset, Measure, AnalysisOptions], EstimateResult]
    labels: tuple[str, str]  # (odds-ratio label, difference label)

    def estimator_label(self, measure: Measure) -> str:
        return self.labels[0] if measure is Measure.ODDS_RATIO else self.labels[1]

    def estimand(self, measure: Measure) -> EstimandSpec:
        return EstimandSpec(self.margin, self.weighting, measure)


_MG, _CS = Margin.MARGINAL, Margin.CLUSTER_SPECIFIC
_PA, _CA = Weighting.PARTICIPANT, Weighting.CLUSTER

ROWS: tuple[EstimatorRow, ...] = (
    EstimatorRow("iee-unweighted", _MG, _PA, _iee_pa, ("IEEs (unweighted)",) * 2),
    EstimatorRow("summaries-weighted-marginal", _MG, _PA, _mg_summ_pa, ("Cluster-level summaries (weighted)",) * 2),
    EstimatorRow("gee-exchangeable", _MG, _PA, _gee, ("GEEs with exchangeable correlation (unweighted)",) * 2),
    EstimatorRow(
        "summaries-weighted-cs", _CS, _PA, _cs_summ_pa, ("Cluster-level summaries (weighted)",) * 2
    ),
    EstimatorRow(
        "mixed-model", _CS, _PA, _mixed,
        ("Mixed-effects logistic regression model", "Linear mixed-effects model"),
    ),
    EstimatorRow("iee-weighted", _MG, _CA, _iee_ca, ("IEEs (weighted)",) * 2),
    EstimatorRow("summaries-unweighted-marginal", _MG, _CA, _mg_summ_ca, ("Cluster-level summaries (unweighted)",) * 2),
    EstimatorRow("summaries-unweighted-cs", _CS, _CA, _cs_summ_ca, ("Cluster-level summaries (unweighted)",) * 2),
)

ROWS_BY_KEY = {r.key: r for r in ROWS}


@dataclass
class GridRow:
    key: str
    estimand: str
    estimator: str
    result: EstimateResult | None = None
    failure: dict | None = None

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "estimand": self.estimand,
            "estimator": self.estimator,
            "result": None if self.result is None else self.result.to_dict(),
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> GridRow:
        res = d.get("result")
        return cls(
            key=d["key"],
            estimand=d["estimand"],
            estimator=d["estimator"],
            result=None if res is None else EstimateResult.from_dict(res),
            failure=d.get("failure"),
        )


@dataclass
class AnalysisGrid:
    measure: Measure
    outcome_kind: OutcomeKind
    n_clusters: int
    n_participants: int
    options: dict
    rows: list[GridRow] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __getitem__(self, key: str) -> GridRow:
        for row in self.rows:
            if row.key == key:
                return row
        raise KeyError(key)

    @property
    def n_failed(self) -> int:
        return sum(r.result is None for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "measure": self.measure.value,
            "outcome_kind": self.outcome_kind.value,
            "n_clusters": self.n_clusters,
            "n_participants": self.n_participants,
            "options": self.options,
            "rows": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> AnalysisGrid:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {d.get('schema_version')!r}")
        return cls(
            measure=Measure(d["measure"]),
            outcome_kind=OutcomeKind(d["outcome_kind"]),
            n_clusters=d["n_clusters"],
            n_participants=d["n_participants"],
            options=dict(d["options"]),
            rows=[GridRow.from_dict(r) for r in d["rows"]],
            schema_version=d["schema_version"],
        )

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text: str) -> AnalysisGrid:
        return cls.from_dict(json.loads(text))

    def render_text(self) -> str:
        return render_grid(self)


def run_row(row: EstimatorRow, data: ObservedDataset, measure: Measure, options: AnalysisOptions) -> EstimateResult:
    return row.run(data, measure, options)


def analyze(data: ObservedDataset, options: AnalysisOptions | None = None) -> AnalysisGrid:
    """Fit all eight rows; a row that cannot be estimated carries a failure record."""
    options = options or AnalysisOptions()
    if options.min_cluster_size is not None or options.max_cluster_size is not None:
        data = data.filter_sizes(options.min_cluster_size, options.max_cluster_size)
    data.require_both_arms()
    measure = options.resolve_measure(data)
    grid = AnalysisGrid(
        measure=measure,
        outcome_kind=data.outcome_kind,
        n_clusters=data.n_clusters,
        n_participants=data.n_participants,
        options=options.to_dict(),
    )
    for row in ROWS:
        gr = GridRow(row.key, row.estimand(measure).label, row.estimator_label(measure))
        try:
            gr.result = row.run(data, measure, options)
        except CRTError as exc:
            gr.failure = {"error": type(exc).__name__, "message": str(exc)}
        grid.rows.append(gr)
    if grid.n_failed == len(grid.rows):
        reasons = "; ".join(f"{r.key}: {r.failure['message']}" for r in grid.rows)
        raise EstimationError(f"no estimable cells ({reasons})")
    return grid


def format_p(p: float) -> str:
    if p < 0.001:
        return "<0.001"
    return f"{float(f'{p:.2g}'):g}"


def _format_estimate(res: EstimateResult) -> str:
    fmt = "{:.2f}" if res.measure is Measure.ODDS_RATIO else "{:.3f}"
    est, lo, hi = (fmt.format(v) for v in (res.estimate, res.ci_low, res.ci_high))
    return f"{est} ({lo} to {hi})"


def render_grid(grid: AnalysisGrid) -> str:
    head = "Odds ratio (95% CI)" if grid.measure is Measure.ODDS_RATIO else "Difference (95% CI)"
    lines = [
        f"M = {grid.n_clusters} clusters, N = {grid.n_participants} participants, "
        f"outcome = {grid.outcome_kind.value}",
        "",
    ]
    table = [("Estimand", "Estimator", head, "P-value", "SE")]
    last = None
    for row in grid.rows:
        estimand = row.estimand if row.estimand != last else ""
        last = row.estimand
        if row.result is None:
            table.append((estimand, row.estimator, f"failed: {row.failure['error']}", "", ""))
        else:
            r = row.result
            table.append((estimand, row.estimator, _format_estimate(r), format_p(r.p_value), r.variance_method))
    widths = [max(len(t[i]) for t in table) for i in range(len(table[0]))]
    for i, t in enumerate(table):
        lines.append("  ".join(c.ljust(w) for c, w in zip(t, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    failed = [r for r in grid.rows if r.result is None]
    if failed:
        lines.append("")
        for r in failed:
            lines.append(f"* {r.key}: {r.failure['message']}")
    return "\n".join(lines) + "\n"


def finite(x: float) -> bool:
    return x is not None and math.isfinite(x)
