"""Working-GLM fitting and cluster-robust sandwich covariances.

The design is always an intercept plus the cluster-level treatment
indicator. Fits store per-cluster score vectors ``U_j`` and per-cluster bread
contributions ``D_j' V_j^-1 D_j`` so any fit (independence or exchangeable)
can be handed to :func:`cluster_robust_vcov`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import (
    ConvergenceError,
    InestimableVarianceError,
    ObservedDataset,
    OutcomeKind,
    RankDeficiencyError,
    SeparationError,
    ValidationError,
)

IRLS_TOL = 1e-10
IRLS_MAX_ITER = 100


class Link(str, enum.Enum):
    IDENTITY = "identity"
    LOGIT = "logit"


class Correction(str, enum.Enum):
    NONE = "none"
    FAY_GRAUBARD = "fay-graubard"


@dataclass(frozen=True)
class SandwichSpec:
    """Cluster-robust variance options.

    ``b`` caps the leverage-like quantities in the Fay-Graubard adjustment;
    0.75 is the value Fay and Graubard suggest.
    """

    correction: Correction = Correction.FAY_GRAUBARD
    b: float = 0.75

    def __post_init__(self):
        object.__setattr__(self, "correction", Correction(self.correction))
        if not 0.0 < self.b < 1.0:
            raise ValueError(f"Fay-Graubard bound must lie in (0, 1), got {self.b}")

    @property
    def tag(self) -> str:
        if self.correction is Correction.NONE:
            return "HC0"
        return f"FG(b={self.b:g})"


HC0 = SandwichSpec(Correction.NONE)


@dataclass(frozen=True, eq=False)
class GlmFit:
    coefficients: np.ndarray  # (alpha, beta)
    link: Link
    weights: np.ndarray
    fitted: np.ndarray
    cluster_scores: np.ndarray  # (M, 2)
    cluster_bread: np.ndarray  # (M, 2, 2)
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)

    @property
    def alpha(self) -> float:
        return float(self.coefficients[0])

    @property
    def beta(self) -> float:
        return float(self.coefficients[1])

    @property
    def bread(self) -> np.ndarray:
        return self.cluster_bread.sum(axis=0)


def design(data: ObservedDataset) -> np.ndarray:
    """Participant-level ``N x 2`` design ``(1, Z_j)``."""
    z = data.treatment_long.astype(float)
    return np.column_stack([np.ones_like(z), z])


def _weighted_arm_means(data: ObservedDataset, w: np.ndarray) -> tuple[float, float]:
    z = data.treatment_long
    t, c = z == 1, z == 0
    return (
        float(np.dot(w[t], data.y[t]) / w[t].sum()),
        float(np.dot(w[c], data.y[c]) / w[c].sum()),
    )


def _per_cluster(data: ObservedDataset, x: np.ndarray, resid_w: np.ndarray, info_w: np.ndarray):
    m = data.n_clusters
    idx = data.cluster_index
    scores = np.column_stack(
        [np.bincount(idx, weights=resid_w * x[:, k], minlength=m) for k in range(2)]
    )
    bread = np.empty((m, 2, 2))
    for a in range(2):
        for b in range(a, 2):
            v = np.bincount(idx, weights=info_w * x[:, a] * x[:, b], minlength=m)
            bread[:, a, b] = v
            bread[:, b, a] = v
    return scores, bread


def fit_working_glm(
    data: ObservedDataset,
    link: Link | str = Link.LOGIT,
    obs_weights: np.ndarray | None = None,
) -> GlmFit:
    """Fit ``g(E[Y_ij]) = alpha + beta Z_j`` under working independence.

    Identity link is weighted least squares. Logit link is IRLS started at
    zero with binomial working variance, iterated until the largest
    coefficient change drops below ``1e-10`` relative to the coefficient
    scale.
    """
    link = Link(link)
    data.require_both_arms()
    n = data.n_participants
    w = np.ones(n) if obs_weights is None else np.asarray(obs_weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("obs_weights must be one finite, non-negative weight per participant")
    x = design(data)
    y = data.y

    if link is Link.IDENTITY:
        xtwx = x.T @ (w[:, None] * x)
        try:
            coef = np.linalg.solve(xtwx, x.T @ (w * y))
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError("singular weighted design") from exc
        mu = x @ coef
        scores, bread = _per_cluster(data, x, w * (y - mu), w)
        return GlmFit(coef, link, w, mu, scores, bread, True, 1)

    if data.outcome_kind is not OutcomeKind.BINARY:
        raise ValidationError("logit link needs a binary outcome")
    p1, p0 = _weighted_arm_means(data, w)
    for label, p in (("treated", p1), ("control", p0)):
        if not 0.0 < p < 1.0:
            raise SeparationError(f"weighted {label} mean is {p}; logit fit diverges")

    coef = np.zeros(2)
    trace = []
    converged = False
    for it in range(1, IRLS_MAX_ITER + 1):
        eta = x @ coef
        mu = expit(eta)
        v = mu * (1.0 - mu)
        work = eta + (y - mu) / v
        wv = w * v
        new = np.linalg.solve(x.T @ (wv[:, None] * x), x.T @ (wv * work))
        step = float(np.max(np.abs(new - coef)))
        coef = new
        trace.append((it, coef.tolist(), step))
        if step <= IRLS_TOL * max(1.0, float(np.max(np.abs(coef)))):
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {IRLS_MAX_ITER} iterations", trace)
    mu = expit(x @ coef)
    v = mu * (1.0 - mu)
    scores, bread = _per_cluster(data, x, w * (y - mu), w * v)
    return GlmFit(coef, link, w, mu, scores, bread, True, it, trace)


def logit_closed_form(data: ObservedDataset, obs_weights: np.ndarray | None = None) -> tuple[float, float]:
    """Analytic logit fit for the two-group design: ``(logit p0, logit p1 - logit p0)``."""
    w = np.ones(data.n_participants) if obs_weights is None else np.asarray(obs_weights, float)
    p1, p0 = _weighted_arm_means(data, w)
    a = np.log(p0 / (1 - p0))
    return float(a), float(np.log(p1 / (1 - p1)) - a)


def cluster_robust_cov(fit: GlmFit, spec: SandwichSpec = HC0) -> np.ndarray:
    """Full 2x2 cluster-robust covariance ``A^-1 (sum_j H_j U_j U_j' H_j) A^-1``.

    ``H_j`` is the identity for plain HC0. For Fay-Graubard it is
    ``diag{(1 - min(b, q_jk))^(-1/2)}`` where ``q_jk`` is the k-th diagonal
    entry of ``B_j A^-1`` and ``B_j`` is cluster j's bread contribution.
    """
    m = fit.cluster_scores.shape[0]
    if m < 3:
        raise InestimableVarianceError(f"cluster-robust variance needs at least 3 clusters, got {m}")
    a = fit.bread
    if np.linalg.cond(a) > 1e12:
        raise RankDeficiencyError("bread matrix is singular")
    a_inv = np.linalg.inv(a)
    u = fit.cluster_scores
    if spec.correction is Correction.FAY_GRAUBARD:
        q = np.einsum("jab,ba->ja", fit.cluster_bread, a_inv)
        u = u / np.sqrt(1.0 - np.minimum(spec.b, q))
    meat = u.T @ u
    return a_inv @ meat @ a_inv


def cluster_robust_vcov(fit: GlmFit, spec: SandwichSpec = HC0) -> float:
    """Cluster-robust variance of the treatment coefficient."""
    return float(cluster_robust_cov(fit, spec)[1, 1])
