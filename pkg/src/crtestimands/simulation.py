"""Simulated trials with controllable informative cluster size.

Each cluster gets a size from a categorical distribution and a latent normal
intercept shared by both potential worlds. Binary outcomes are
logistic-normal and a single uniform draw per participant couples ``Y(1)``
and ``Y(0)``, so a participant with ``Y(0) = 1`` also has ``Y(1) = 1`` under a
non-negative effect. Continuous outcomes share one residual across worlds.
Effects live on the link scale and may differ by size stratum, which is how
the contrast kind of informativeness is switched on. A size-dependent control
mean switches on the outcome kind.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .analysis import ROWS, ROWS_BY_KEY, AnalysisOptions, EstimatorRow
from .core import (
    BoundaryPolicy,
    CRTError,
    EstimandSpec,
    Measure,
    ObservedDataset,
    OutcomeKind,
    PotentialClusterRecord,
    PotentialOutcomeDataset,
    ValidationError,
)
from .estimands import estimand_value

SUPERPOPULATION_INDEX = 2**32  # replicate stream reserved for the large truth draw


class DegenerateDgpWarning(UserWarning):
    """Informativeness was requested but the configuration cannot produce it."""


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process for one simulated trial design.

    ``control_mean`` is on the link scale (logit for binary outcomes).
    ``control_mean_by_size`` and ``effects`` are per size stratum, in the order
    of ``size_distribution``; a single effect is broadcast to every stratum.
    """

    n_clusters: int
    size_distribution: tuple[tuple[int, float], ...]
    outcome_kind: OutcomeKind = OutcomeKind.BINARY
    control_mean: float = 0.0
    control_mean_by_size: tuple[float, ...] | None = None
    effects: tuple[float, ...] = (0.0,)
    random_intercept_sd: float = 0.0
    residual_sd: float = 1.0
    informative: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        dist = tuple((int(s), float(p)) for s, p in self.size_distribution)
        object.__setattr__(self, "size_distribution", dist)
        effects = (
            (float(self.effects),) if np.isscalar(self.effects) else tuple(float(e) for e in self.effects)
        )
        object.__setattr__(self, "effects", effects)
        if self.control_mean_by_size is not None:
            object.__setattr__(self, "control_mean_by_size", tuple(float(c) for c in self.control_mean_by_size))

        if int(self.n_clusters) != self.n_clusters or self.n_clusters < 4:
            raise ValidationError(f"n_clusters must be an integer >= 4, got {self.n_clusters}")
        if not dist:
            raise ValidationError("size_distribution is empty")
        sizes = [s for s, _ in dist]
        probs = [p for _, p in dist]
        if any(s < 1 for s in sizes):
            raise ValidationError("cluster sizes must be >= 1")
        if len(set(sizes)) != len(sizes):
            raise ValidationError("size_distribution lists a size twice")
        if any(p < 0 or not math.isfinite(p) for p in probs) or abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ValidationError("size probabilities must be non-negative and sum to 1")
        if len(effects) not in (1, len(dist)):
            raise ValidationError("effects needs one value or one per size stratum")
        if self.control_mean_by_size is not None and len(self.control_mean_by_size) != len(dist):
            raise ValidationError("control_mean_by_size needs one value per size stratum")
        if self.random_intercept_sd < 0 or self.residual_sd < 0:
            raise ValidationError("standard deviations must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s for s, _ in self.size_distribution], dtype=np.int64)

    @property
    def size_probs(self) -> np.ndarray:
        return np.array([p for _, p in self.size_distribution])

    def stratum_effects(self) -> np.ndarray:
        return np.resize(np.array(self.effects), len(self.size_distribution))

    def stratum_control_means(self) -> np.ndarray:
        if self.control_mean_by_size is None:
            return np.full(len(self.size_distribution), self.control_mean)
        return np.array(self.control_mean_by_size)

    @property
    def degenerate(self) -> bool:
        """Informativeness requested, yet sizes or effects cannot vary together."""
        one_size = len(self.size_distribution) == 1
        one_effect = len(set(self.stratum_effects().tolist())) == 1
        return self.informative and one_size and one_effect

    @classmethod
    def from_mapping(cls, d: dict) -> DgpConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = dict(d)
        try:
            if "size_distribution" in kw:
                kw["size_distribution"] = tuple(tuple(pair) for pair in kw["size_distribution"])
            for key in ("effects", "control_mean_by_size"):
                if isinstance(kw.get(key), list):
                    kw[key] = tuple(kw[key])
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"invalid config: {exc}") from exc

    def to_mapping(self) -> dict:
        d = {
            "n_clusters": self.n_clusters,
            "size_distribution": [list(p) for p in self.size_distribution],
            "outcome_kind": self.outcome_kind.value,
            "control_mean": self.control_mean,
            "effects": list(self.effects),
            "random_intercept_sd": self.random_intercept_sd,
            "residual_sd": self.residual_sd,
            "informative": self.informative,
            "seed": self.seed,
        }
        if self.control_mean_by_size is not None:
            d["control_mean_by_size"] = list(self.control_mean_by_size)
        return d


def skewed_size_config(seed: int = 0, n_clusters: int = 31) -> DgpConfig:
    """Roughly the scale of a 31-cluster trial with sizes 12 to 272.

    Control event rate 4.5%, latent-scale ICC 0.03, and a larger effect in
    clusters of 100 or more participants (about 7 of 31 clusters).
    """
    latent_var = 0.03 * (math.pi**2 / 3) / 0.97
    small = [12, 25, 40, 60, 80]
    large = [130, 200, 272]
    dist = [(s, 0.774 / len(small)) for s in small] + [(s, 0.226 / len(large)) for s in large]
    return DgpConfig(
        n_clusters=n_clusters,
        size_distribution=tuple(dist),
        control_mean=math.log(0.045 / 0.955),
        effects=tuple([math.log(1.15)] * len(small) + [math.log(2.26)] * len(large)),
        random_intercept_sd=math.sqrt(latent_var),
        informative=True,
        seed=seed,
    )


def replicate_rng(seed: int, replicate_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(replicate_index),)))


def allocate(rng: np.random.Generator, m: int) -> np.ndarray:
    """1:1 cluster randomization; with odd M a coin decides which arm gets the extra cluster."""
    n_treated = m // 2 + (int(rng.integers(2)) if m % 2 else 0)
    z = np.zeros(m, dtype=np.int64)
    z[rng.permutation(m)[:n_treated]] = 1
    return z


def generate(config: DgpConfig, replicate_index: int = 0) -> tuple[PotentialOutcomeDataset, ObservedDataset]:
    """Draw one potential-outcome table and its randomized observation.

    Deterministic in ``(config.seed, replicate_index)``.
    """
    if config.degenerate:
        warnings.warn(
            "informative cluster size requested but every cluster has the same size and effect",
            DegenerateDgpWarning,
            stacklevel=2,
        )
    rng = replicate_rng(config.seed, replicate_index)
    m = config.n_clusters
    stratum = rng.choice(len(config.size_distribution), size=m, p=config.size_probs)
    sizes = config.sizes[stratum]
    intercept = rng.normal(0.0, config.random_intercept_sd, size=m) if config.random_intercept_sd > 0 else np.zeros(m)
    eta0 = config.stratum_control_means()[stratum] + intercept
    eta1 = eta0 + config.stratum_effects()[stratum]

    idx = np.repeat(np.arange(m), sizes)
    if config.outcome_kind is OutcomeKind.BINARY:
        u = rng.random(idx.size)
        y0 = (u < expit(eta0)[idx]).astype(float)
        y1 = (u < expit(eta1)[idx]).astype(float)
    else:
        e = rng.normal(0.0, config.residual_sd, size=idx.size)
        y0 = eta0[idx] + e
        y1 = eta1[idx] + e

    bounds = np.concatenate([[0], np.cumsum(sizes)])
    width = len(str(m - 1))
    records = [
        PotentialClusterRecord(f"c{j:0{width}d}", y1[bounds[j] : bounds[j + 1]], y0[bounds[j] : bounds[j + 1]])
        for j in range(m)
    ]
    po = PotentialOutcomeDataset(records, config.outcome_kind)
    z = allocate(rng, m)
    return po, po.observe(z)


def superpopulation_truth(
    config: DgpConfig,
    estimands: Iterable[EstimandSpec],
    n_clusters: int = 100_000,
    boundary_policy: BoundaryPolicy = BoundaryPolicy.ERROR,
) -> dict[EstimandSpec, float]:
    """Approximate super-population estimands by the finite-population formulas on one large draw."""
    po, _ = generate(replace(config, n_clusters=n_clusters), SUPERPOPULATION_INDEX)
    return {spec: estimand_value(po, spec, BoundaryPolicy(boundary_policy)) for spec in estimands}


@dataclass
class CellTrace:
    """Per-replicate raw values for one estimator row; NaN marks a failure."""

    estimate: list[float] = field(default_factory=list)
    link_estimate: list[float] = field(default_factory=list)
    se_link: list[float] = field(default_factory=list)
    ci_low: list[float] = field(default_factory=list)
    ci_high: list[float] = field(default_factory=list)
    truth: list[float] = field(default_factory=list)
    failures: Counter = field(default_factory=Counter)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            k: np.array(getattr(self, k))
            for k in ("estimate", "link_estimate", "se_link", "ci_low", "ci_high", "truth")
        }


@dataclass(frozen=True)
class CellReport:
    key: str
    estimator: str
    estimand: str
    replicates: int  # successful fits
    failures: int
    failure_reasons: dict
    mean_estimate: float
    mean_link_estimate: float
    empirical_se: float  # link scale
    mean_model_se: float  # link scale
    mean_truth: float  # finite-population truth averaged over replicates
    bias: float  # mean estimate minus mean_truth
    relative_bias: float
    mean_finite_bias: float  # mean of estimate minus same-replicate truth
    coverage_finite: float
    coverage_average: float
    mc_se: float  # Monte Carlo SE of mean_estimate


@dataclass
class StudyReport:
    config: DgpConfig
    measure: Measure
    requested_replicates: int
    cells: dict[str, CellReport]
    traces: dict[str, CellTrace]
    degenerate_config: bool = False

    def to_dict(self, include_traces: bool = False) -> dict:
        d = {
            "schema_version": 1,
            "config": self.config.to_mapping(),
            "measure": self.measure.value,
            "requested_replicates": self.requested_replicates,
            "degenerate_config": self.degenerate_config,
            "cells": {k: _finite_or_none(vars(c)) for k, c in self.cells.items()},
        }
        if include_traces:
            d["traces"] = {
                k: {n: _finite_or_none(a.tolist()) for n, a in t.arrays().items()} for k, t in self.traces.items()
            }
        return d


def _finite_or_none(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_none(v) for v in obj]
    return obj


def _one_replicate(config: DgpConfig, index: int, rows: Sequence[EstimatorRow], options: AnalysisOptions):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDgpWarning)
        po, obs = generate(config, index)
    measure = options.resolve_measure(obs)
    out = []
    for row in rows:
        try:
            truth = estimand_value(po, row.estimand(measure), options.boundary_policy)
        except CRTError:
            truth = math.nan
        try:
            r = row.run(obs, measure, options)
            out.append((r.estimate, r.link_scale_estimate, r.se_link, r.ci_low, r.ci_high, truth, None))
        except CRTError as exc:
            out.append((math.nan,) * 5 + (truth, type(exc).__name__))
    return out


def _chunk(config, indices, rows, options):
    return [_one_replicate(config, i, rows, options) for i in indices]


def _summarize(row: EstimatorRow, measure: Measure, trace: CellTrace, requested: int) -> CellReport:
    a = trace.arrays()
    ok = np.isfinite(a["estimate"])
    n_ok = int(ok.sum())
    est, link, se = a["estimate"][ok], a["link_estimate"][ok], a["se_link"][ok]
    lo, hi, truth = a["ci_low"][ok], a["ci_high"][ok], a["truth"][ok]
    has_truth = np.isfinite(truth)
    nan = math.nan
    mean_truth = float(np.mean(a["truth"][np.isfinite(a["truth"])])) if np.isfinite(a["truth"]).any() else nan
    mean_est = float(np.mean(est)) if n_ok else nan
    bias = mean_est - mean_truth
    cover_f = float(np.mean((lo[has_truth] <= truth[has_truth]) & (truth[has_truth] <= hi[has_truth]))) if has_truth.any() else nan
    cover_a = float(np.mean((lo <= mean_truth) & (mean_truth <= hi))) if n_ok and math.isfinite(mean_truth) else nan
    return CellReport(
        key=row.key,
        estimator=row.estimator_label(measure),
        estimand=row.estimand(measure).label,
        replicates=n_ok,
        failures=requested - n_ok,
        failure_reasons=dict(sorted(trace.failures.items())),
        mean_estimate=mean_est,
        mean_link_estimate=float(np.mean(link)) if n_ok else nan,
        empirical_se=float(np.std(link, ddof=1)) if n_ok > 1 else nan,
        mean_model_se=float(np.mean(se)) if n_ok else nan,
        mean_truth=mean_truth,
        bias=bias,
        relative_bias=bias / abs(mean_truth) if mean_truth else nan,
        mean_finite_bias=float(np.mean(est[has_truth] - truth[has_truth])) if has_truth.any() else nan,
        coverage_finite=cover_f,
        coverage_average=cover_a,
        mc_se=float(np.std(est, ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else nan,
    )


def run_study(
    config: DgpConfig,
    estimators: Sequence[str | EstimatorRow] | None = None,
    replicates: int = 100,
    options: AnalysisOptions | None = None,
    n_jobs: int = 1,
) -> StudyReport:
    """Simulate ``replicates`` trials and score each estimator against its oracle estimand.

    Estimator failures are counted per replicate and never abort the study.
    With ``n_jobs > 1`` replicates run in worker processes; the reduction is
    in replicate order, so the report does not depend on ``n_jobs``.
    """
    if replicates < 1:
        raise ValidationError("replicates must be >= 1")
    options = options or AnalysisOptions()
    rows = [ROWS_BY_KEY[e] if isinstance(e, str) else e for e in (estimators or ROWS)]
    measure = options.measure or (
        Measure.ODDS_RATIO if config.outcome_kind is OutcomeKind.BINARY else Measure.DIFFERENCE
    )
    options = replace(options, measure=measure)

    indices = list(range(replicates))
    if n_jobs > 1 and replicates > 1:
        chunks = [indices[i::n_jobs] for i in range(n_jobs)]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(_chunk, [config] * n_jobs, chunks, [rows] * n_jobs, [options] * n_jobs))
        by_index = {}
        for chunk, part in zip(chunks, parts):
            by_index.update(zip(chunk, part))
        results = [by_index[i] for i in indices]
    else:
        results = _chunk(config, indices, rows, options)

    traces = {row.key: CellTrace() for row in rows}
    for rep in results:
        for row, (e, le, se, lo, hi, truth, err) in zip(rows, rep):
            t = traces[row.key]
            t.estimate.append(e)
            t.link_estimate.append(le)
            t.se_link.append(se)
            t.ci_low.append(lo)
            t.ci_high.append(hi)
            t.truth.append(truth)
            if err is not None:
                t.failures[err] += 1
    cells = {row.key: _summarize(row, measure, traces[row.key], replicates) for row in rows}
    return StudyReport(config, measure, replicates, cells, traces, config.degenerate)
