import warnings

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize
from scipy.special import expit

from crtestimands import (
    HC0,
    ClusterRecord,
    InestimableVarianceError,
    Link,
    ObservedDataset,
    SandwichSpec,
    SeparationError,
    ValidationError,
    cluster_robust_vcov,
    fit_working_glm,
)
from crtestimands.engine import cluster_robust_cov, design, logit_closed_form

from conftest import observed_binary


def _dense_fg(data, fit, b):
    """Fay-Graubard sandwich built cluster by cluster from dense blocks."""
    x = design(data)
    mu = fit.fitted
    v = mu * (1 - mu) if fit.link is Link.LOGIT else np.ones_like(mu)
    w = fit.weights
    blocks, scores = [], []
    for j in range(data.n_clusters):
        rows = data.cluster_index == j
        xj = x[rows]
        blocks.append(xj.T @ np.diag(w[rows] * v[rows]) @ xj)
        scores.append(xj.T @ (w[rows] * (data.y[rows] - mu[rows])))
    a_inv = np.linalg.inv(sum(blocks))
    meat = np.zeros((2, 2))
    for bj, uj in zip(blocks, scores):
        q = np.diag(bj @ a_inv)
        h = np.diag(1 / np.sqrt(1 - np.minimum(b, q)))
        meat += h @ np.outer(uj, uj) @ h
    return (a_inv @ meat @ a_inv)[1, 1]


def test_ex1_logit_closed_forms(ex1):
    assert fit_working_glm(ex1, "logit").beta == pytest.approx(np.log(4), abs=1e-12)
    w = 1 / ex1.sizes[ex1.cluster_index]
    assert fit_working_glm(ex1, "logit", w).beta == pytest.approx(np.log(25 / 9), abs=1e-12)


@given(observed_binary())
def test_irls_matches_closed_form(data):
    for w in (None, 1 / data.sizes[data.cluster_index]):
        fit = fit_working_glm(data, Link.LOGIT, w)
        a, b = logit_closed_form(data, w)
        assert fit.alpha == pytest.approx(a, abs=1e-10)
        assert fit.beta == pytest.approx(b, abs=1e-10)


@given(observed_binary())
def test_gaussian_variance_gives_same_logit_solution(data):
    # Gaussian working variance with a logit mean: sum x mu(1-mu)(y - mu) = 0
    x = design(data)

    def equations(c):
        mu = expit(x @ c)
        return x.T @ (mu * (1 - mu) * (data.y - mu))

    res = optimize.root(equations, np.zeros(2), method="hybr", options={"xtol": 1e-15})
    assert np.max(np.abs(equations(res.x))) < 1e-12
    fit = fit_working_glm(data, Link.LOGIT)
    assert fit.beta == pytest.approx(res.x[1], abs=1e-10)


@given(observed_binary(), st.sampled_from([Link.LOGIT, Link.IDENTITY]))
def test_hc0_matches_statsmodels(data, link):
    fam = sm.families.Binomial() if link is Link.LOGIT else sm.families.Gaussian()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = sm.GLM(data.y, design(data), family=fam).fit(
            cov_type="cluster", cov_kwds={"groups": data.cluster_index, "use_correction": False}, tol=1e-14
        )
    fit = fit_working_glm(data, link)
    assert fit.beta == pytest.approx(ref.params[1], abs=1e-8)
    assert cluster_robust_vcov(fit, HC0) == pytest.approx(ref.cov_params()[1, 1], rel=1e-7)


@given(observed_binary(), st.sampled_from([Link.LOGIT, Link.IDENTITY]), st.sampled_from([0.5, 0.75, 0.9]))
def test_fay_graubard_matches_dense_oracle(data, link, b):
    w = 1 / data.sizes[data.cluster_index]
    fit = fit_working_glm(data, link, w)
    assert cluster_robust_vcov(fit, SandwichSpec(b=b)) == pytest.approx(_dense_fg(data, fit, b), rel=1e-10)


@given(observed_binary(), st.sampled_from([Link.LOGIT, Link.IDENTITY]))
def test_fay_graubard_inflates(data, link):
    fit = fit_working_glm(data, link)
    assert cluster_robust_vcov(fit, SandwichSpec()) >= cluster_robust_vcov(fit, HC0) * (1 - 1e-12)


def test_covariance_is_symmetric(ex1):
    cov = cluster_robust_cov(fit_working_glm(ex1, "logit"), SandwichSpec())
    assert np.allclose(cov, cov.T, atol=0, rtol=1e-14)


def test_separation_detected():
    data = ObservedDataset([ClusterRecord(i, z, [z, z]) for i, z in enumerate([1, 1, 0, 0])])
    with pytest.raises(SeparationError):
        fit_working_glm(data, "logit")


def test_sandwich_needs_three_clusters():
    data = ObservedDataset([ClusterRecord("a", 1, [1, 0]), ClusterRecord("b", 0, [1, 0, 0])])
    with pytest.raises(InestimableVarianceError):
        cluster_robust_vcov(fit_working_glm(data, "logit"))


def test_bad_weights_rejected(ex1):
    with pytest.raises(ValidationError):
        fit_working_glm(ex1, "identity", np.ones(3))


def test_fg_bound_validated():
    with pytest.raises(ValueError):
        SandwichSpec(b=1.0)
    assert SandwichSpec().tag == "FG(b=0.75)" and HC0.tag == "HC0"
