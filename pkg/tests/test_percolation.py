from fractions import Fraction

import numpy as np
import pytest

from fpp_flows.common import ClusterBudgetError, DomainError, HypothesisError
from fpp_flows.distributions import CapacityField, PinnedField, parse_distribution
from fpp_flows.lattice import endpoints
from fpp_flows.percolation import (
    Diameter,
    check_subcritical_level,
    cluster,
    diam,
    domination_experiment,
    domination_rows,
    domination_sample,
    edge_cluster,
    event_E,
    event_E_prime,
    ext_boundary,
    interior,
    squared_diameter,
)

RING = {
    ((-1, -1), 0): 1,
    ((0, -1), 0): 1,
    ((-1, 1), 0): 1,
    ((0, 1), 0): 1,
    ((-1, -1), 1): 1,
    ((-1, 0), 1): 1,
    ((1, -1), 1): 1,
    ((1, 0), 1): 1,
}
SEGMENT = {((0, 0), 0): 5, ((1, 0), 0): 5}


def test_cluster_follows_open_edges():
    field = PinnedField(2, SEGMENT)
    c = cluster(field, 1, (0, 0))
    assert c.vertices == {(0, 0), (1, 0), (2, 0)}
    assert (1, 0) in c
    assert cluster(field, 5, (0, 0)).vertices == {(0, 0)}


def test_cluster_respects_region():
    field = PinnedField(2, SEGMENT)
    c = cluster(field, 1, (0, 0), region=lambda y: y[0] <= 1)
    assert c.vertices == {(0, 0), (1, 0)}
    with pytest.raises(DomainError):
        cluster(field, 1, (5, 0), region=lambda y: y[0] <= 1)


def test_cluster_budget():
    field = PinnedField(2, default=1)
    c = cluster(field, 0, (0, 0), budget=50)
    assert c.budget_exceeded
    assert c.size == 50
    assert diam(c).lower_bound_only
    with pytest.raises(ClusterBudgetError):
        ext_boundary(c)


def test_edge_cluster_joins_both_endpoints():
    field = PinnedField(2, SEGMENT)
    c = edge_cluster(field, 1, ((2, 0), 1))
    assert c.vertices == {(0, 0), (1, 0), (2, 0), (2, 1)}


def test_squared_diameter():
    block = [(x, y) for x in range(3) for y in range(3)]
    assert squared_diameter(block) == 8
    assert squared_diameter([(0, 0)]) == 0
    line = [(x, 0) for x in range(1500)]
    assert squared_diameter(line) == 1499**2


def test_diameter_comparison_is_exact():
    assert Diameter(4).below(3)
    assert not Diameter(4).below(2)
    assert Diameter(8).below(Fraction(29, 10))
    assert not Diameter(9, lower_bound_only=True).below(100)


def test_ring_interior_and_boundary():
    field = PinnedField(2, RING)
    c = cluster(field, 0, (-1, -1))
    assert c.size == 8
    assert interior(c) == c.vertices | {(0, 0)}
    boundary = ext_boundary(c)
    assert len(boundary) == 12
    assert all((0, 0) not in endpoints(e) for e in boundary)


def test_singleton_boundary():
    c = cluster(PinnedField(2), 0, (3, 3))
    assert ext_boundary(c) == {((2, 3), 0), ((3, 3), 0), ((3, 2), 1), ((3, 3), 1)}
    with pytest.raises(DomainError):
        ext_boundary(c, margin=0)


def test_events():
    field = PinnedField(2, SEGMENT)
    vertices = [(0, 0), (5, 5)]
    assert not event_E(field, 1, vertices, 2)
    assert event_E(field, 1, vertices, 3)
    assert event_E(field, 5, vertices, 1)
    assert not event_E(field, 1, vertices, 0)
    # the edge cluster of ((2, 0), 1) reaches (2, 1): diameter sqrt(5)
    assert not event_E_prime(field, 1, [((2, 0), 1)], 2)
    assert event_E_prime(field, 1, [((2, 0), 1)], 3)


def test_events_on_fully_open_field_fail():
    field = PinnedField(2, default=1)
    assert not event_E(field, 0, [(0, 0)], 3)
    assert not event_E_prime(field, 0, [((0, 0), 0)], 3)


def test_check_subcritical_level():
    dist = parse_distribution("1:3/5, 2:2/5")
    check_subcritical_level(dist, 1, 2)
    with pytest.raises(HypothesisError):
        check_subcritical_level(dist, 0, 2)


def test_domination_sample_counts_every_anchor():
    dist = parse_distribution("1:3/5, 2:2/5")
    anchors = [(i, 0) for i in range(10)]
    sum_y, sum_x, hits = domination_sample(dist, 1, anchors, seed=3)
    assert sum_y >= 10 and sum_x >= 10
    assert hits == 0
    assert domination_sample(dist, 1, anchors, seed=3) == (sum_y, sum_x, hits)


def test_domination_sample_on_a_closed_field():
    dist = parse_distribution("1:1")
    anchors = [(i, 0) for i in range(4)]
    assert domination_sample(dist, 1, anchors, seed=0) == (4, 4, 0)


def test_domination_rows():
    rows = domination_rows(np.array([1, 2, 3, 4]), np.array([2, 2, 4, 4]), thresholds=[2, 4])
    assert rows[0][:3] == (2, 0.75, 1.0)
    assert rows[1][:3] == (4, 0.25, 0.5)
    assert all(row[3] >= 0 for row in rows)


@pytest.mark.slow
def test_domination_experiment_has_no_violations():
    dist = parse_distribution("1:3/5, 2:2/5")
    anchors = [(i, 0) for i in range(10)]
    report = domination_experiment(dist, 1, anchors, replicates=200)
    assert report.budget_hits == 0
    assert not report.violations


def test_domination_experiment_rejects_supercritical_level():
    dist = parse_distribution("0:1/5, 2:4/5")
    with pytest.raises(HypothesisError):
        domination_experiment(dist, 1, [(0, 0)], replicates=4)


def test_cluster_on_random_field_is_connected():
    dist = parse_distribution("0:3/5, 1:2/5")
    field = CapacityField(dist, seed=2, dimension=2)
    c = cluster(field, 0, (0, 0))
    assert not c.budget_exceeded
    for x in sorted(c.vertices)[:5]:
        assert cluster(field, 0, x).vertices == c.vertices


@pytest.mark.slow
def test_domination_at_open_probability_three_tenths():
    dist = parse_distribution("1:7/10, 2:3/10")
    anchors = [(i, 0) for i in range(10)]
    report = domination_experiment(dist, 1, anchors, replicates=2000)
    assert report.budget_hits == 0
    assert not report.violations
