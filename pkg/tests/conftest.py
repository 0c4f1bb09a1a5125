import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from crtestimands import ClusterRecord, ObservedDataset, PotentialClusterRecord, PotentialOutcomeDataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_ex1() -> ObservedDataset:
    return ObservedDataset(
        [
            ClusterRecord("A", 1, [1, 0]),
            ClusterRecord("B", 1, [1, 1, 1, 0]),
            ClusterRecord("C", 0, [1, 0]),
            ClusterRecord("D", 0, [1, 0, 0, 0]),
        ]
    )


def make_po1() -> PotentialOutcomeDataset:
    return PotentialOutcomeDataset(
        [
            PotentialClusterRecord(1, [1, 1, 1, 0], [1, 0, 0, 0]),
            PotentialClusterRecord(2, [1, 0], [1, 0]),
        ]
    )


@pytest.fixture
def ex1():
    return make_ex1()


@pytest.fixture
def po1():
    return make_po1()


@st.composite
def potential_tables(draw, binary=True, min_clusters=2, max_clusters=12, max_size=30, interior=False):
    """Random potential-outcome tables; ``interior`` keeps every cluster-arm mean off 0 and 1."""
    m = draw(st.integers(min_clusters, max_clusters))
    records = []
    for j in range(m):
        n = draw(st.integers(2 if interior else 1, max_size))
        if binary:
            if interior:
                k1 = draw(st.integers(1, n - 1))
                k0 = draw(st.integers(1, n - 1))
                y1 = [1] * k1 + [0] * (n - k1)
                y0 = [1] * k0 + [0] * (n - k0)
            else:
                y1 = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
                y0 = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
        else:
            fl = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
            y1 = draw(st.lists(fl, min_size=n, max_size=n))
            y0 = draw(st.lists(fl, min_size=n, max_size=n))
        records.append(PotentialClusterRecord(j, y1, y0))
    return PotentialOutcomeDataset(records, "binary" if binary else "continuous")


@st.composite
def observed_binary(draw, min_per_arm=2, max_per_arm=10, max_size=40):
    """Binary trials where each arm has at least one event and one non-event overall."""
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    m1 = draw(st.integers(min_per_arm, max_per_arm))
    m0 = draw(st.integers(min_per_arm, max_per_arm))
    recs = []
    for j, z in enumerate([1] * m1 + [0] * m0):
        n = int(rng.integers(1, max_size + 1))
        p = rng.uniform(0.1, 0.9)
        recs.append(ClusterRecord(f"k{j}", z, (rng.random(n) < p).astype(int)))
    data = ObservedDataset(recs, "binary")
    for z in (0, 1):
        ys = data.y[data.treatment_long == z]
        if ys.min() == ys.max():
            # force both outcome values into the arm
            first = next(i for i, r in enumerate(recs) if r.treatment == z)
            r = recs[first]
            recs[first] = ClusterRecord(r.cluster_id, z, list(r.outcomes) + [1 - ys[0]])
            data = ObservedDataset(recs, "binary")
    return data


def random_table(seed: int, binary: bool, max_clusters: int = 50, max_size: int = 200) -> PotentialOutcomeDataset:
    """Potential-outcome table with M in [2, max_clusters] and n_j in [1, max_size]."""
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, max_clusters + 1))
    records = []
    for j in range(m):
        n = int(rng.integers(1, max_size + 1))
        if binary:
            y1 = (rng.random(n) < rng.random()).astype(float)
            y0 = (rng.random(n) < rng.random()).astype(float)
        else:
            y1 = rng.normal(rng.normal(), 3.0, n)
            y0 = rng.normal(rng.normal(), 3.0, n)
        records.append(PotentialClusterRecord(j, y1, y0))
    return PotentialOutcomeDataset(records, "binary" if binary else "continuous")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
