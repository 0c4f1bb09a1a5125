import math

import numpy as np
import pytest
from hypothesis import given

from crtestimands import (
    BoundaryPolicy,
    BoundednessError,
    ClusterRecord,
    DegenerateArmError,
    InestimableVarianceError,
    Measure,
    ObservedDataset,
    ValidationError,
    Weighting,
    cluster_specific_summary_estimate,
    huber_white_vcov,
    marginal_summary_estimate,
)
from crtestimands.summaries import cluster_log_odds, cluster_specific_summary_fit, marginal_summary_fit

from conftest import observed_binary

PA, CA = Weighting.PARTICIPANT, Weighting.CLUSTER
OR, DIFF = Measure.ODDS_RATIO, Measure.DIFFERENCE
LOG3 = math.log(3.0)


@pytest.mark.parametrize("weighting, expected", [(PA, 4.0), (CA, 25 / 9)])
def test_ex1_marginal_or(ex1, weighting, expected):
    r = marginal_summary_estimate(ex1, weighting, OR)
    assert r.estimate == pytest.approx(expected, abs=1e-10)
    assert r.df == 2 and r.variance_method == "HC0"


@pytest.mark.parametrize("weighting, expected", [(PA, 1 / 3), (CA, 0.25)])
def test_ex1_differences(ex1, weighting, expected):
    assert marginal_summary_estimate(ex1, weighting, DIFF).estimate == pytest.approx(expected, abs=1e-12)
    assert cluster_specific_summary_estimate(ex1, weighting, DIFF).estimate == pytest.approx(expected, abs=1e-12)


def test_ex1_cluster_specific_or(ex1):
    pa = cluster_specific_summary_estimate(ex1, PA, OR)
    # (2 log 1 + 4 log 3)/6 - (2 log 1 + 4 log(1/3))/6
    assert pa.link_scale_estimate == pytest.approx((4 / 6) * LOG3 + (4 / 6) * LOG3, abs=1e-12)
    assert pa.estimate == pytest.approx(3 ** (4 / 3), abs=1e-10)
    ca = cluster_specific_summary_estimate(ex1, CA, OR)
    assert ca.estimate == pytest.approx(3.0, abs=1e-10)


def test_ex1_hc0_cluster_average_cs(ex1):
    fit = cluster_specific_summary_fit(ex1, CA, OR)
    # residuals are +-log(3)/2 in each arm of two clusters
    assert np.allclose(np.abs(fit.residuals), LOG3 / 2, atol=1e-15)
    assert huber_white_vcov(fit) == pytest.approx((LOG3 / 2) ** 2, abs=1e-12)
    r = cluster_specific_summary_estimate(ex1, CA, OR)
    assert r.se_link == pytest.approx(LOG3 / 2, abs=1e-12)


def test_hc0_hand_formula_differences(ex1):
    # HC0 for an unweighted two-group regression is sum(e^2)/M_z^2 per arm
    fit = marginal_summary_fit(ex1, CA, DIFF)
    e1 = np.array([0.5, 0.75]) - 0.625
    e0 = np.array([0.5, 0.25]) - 0.375
    assert huber_white_vcov(fit) == pytest.approx(np.sum(e1**2) / 4 + np.sum(e0**2) / 4, abs=1e-15)


def _boundary_data():
    return ObservedDataset(
        [
            ClusterRecord("t1", 1, [1, 0, 1]),
            ClusterRecord("t2", 1, [1, 1]),
            ClusterRecord("c1", 0, [0, 0, 0, 0]),
            ClusterRecord("c2", 0, [1, 0]),
        ]
    )


def test_boundary_cluster_error_names_clusters():
    with pytest.raises(BoundednessError) as info:
        cluster_specific_summary_estimate(_boundary_data(), CA, OR)
    assert set(info.value.clusters) == {"t2", "c1"}


def test_continuity_correction_applies_to_boundary_clusters_only():
    data = _boundary_data()
    lo, corrected = cluster_log_odds(data, BoundaryPolicy.CONTINUITY_CORRECTION)
    assert corrected == ["t2", "c1"]
    expected = [math.log(2), math.log(2.5 / 0.5), math.log(0.5 / 4.5), 0.0]
    assert lo == pytest.approx(expected, abs=1e-15)
    r = cluster_specific_summary_estimate(data, CA, OR, BoundaryPolicy.CONTINUITY_CORRECTION)
    assert r.link_scale_estimate == pytest.approx((expected[0] + expected[1] - expected[2] - expected[3]) / 2)
    assert r.diagnostics["continuity_corrected"] == ["t2", "c1"]


def test_marginal_rows_survive_boundary_clusters():
    r = marginal_summary_estimate(_boundary_data(), PA, OR)
    assert r.estimate == pytest.approx((4 / 5 / (1 / 5)) / ((1 / 6) / (5 / 6)), rel=1e-12)


def test_degenerate_arm():
    data = ObservedDataset(
        [ClusterRecord(i, z, [v, v]) for i, (z, v) in enumerate([(1, 1), (1, 1), (0, 0), (0, 1)])]
    )
    with pytest.raises(DegenerateArmError):
        marginal_summary_estimate(data, PA, OR)


def test_variance_needs_two_clusters_per_arm():
    data = ObservedDataset([ClusterRecord("a", 1, [1, 0]), ClusterRecord("b", 0, [1, 0]), ClusterRecord("c", 0, [1])])
    with pytest.raises(InestimableVarianceError):
        marginal_summary_estimate(data, PA, DIFF)


def test_odds_ratio_needs_binary():
    data = ObservedDataset([ClusterRecord(i, i % 2, [0.5 * i, 2.0]) for i in range(4)])
    with pytest.raises(ValidationError):
        marginal_summary_estimate(data, PA, OR)


@given(observed_binary())
def test_difference_summaries_coincide(data):
    for w in (PA, CA):
        a = marginal_summary_estimate(data, w, DIFF)
        b = cluster_specific_summary_estimate(data, w, DIFF)
        assert a.estimate == pytest.approx(b.estimate, abs=1e-12)
        assert a.se_link == pytest.approx(b.se_link, rel=1e-10)
