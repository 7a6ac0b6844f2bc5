from fractions import Fraction

import pytest

from fpp_flows.common import DomainError, ProblemTooLargeError
from fpp_flows.distributions import INF, CapacityField, PinnedField, parse_distribution
from fpp_flows.lattice import (
    CylinderSpec,
    Direction,
    FlowProblem,
    Hyperrect,
    build_problem,
)
from fpp_flows.maxflow import (
    UnionFind,
    brute_force_min_cut,
    cut_capacity,
    efficient,
    is_cutset,
    max_flow,
    validate_stream,
)

SMALL_SHAPES = [
    ((0, 1), 1, 1, "symmetric"),
    ((0, 1), 2, 1, "symmetric"),
    ((0, 1), 3, 1, "symmetric"),
    ((0, 1), 2, 2, "directed"),
    ((1, 1), 1, 1, "symmetric"),
    ((1, 1), 2, 1, "directed"),
]
LAWS = ["0:1/4, 1:1/4, 2:1/2", "1/2:1/3, 1:1/3, 3:1/3", "0:1/2, 1:1/4, inf:1/4"]


def small_problem(w, p, h, kind) -> FlowProblem:
    A = Hyperrect.canonical(Direction(w), p)
    return build_problem(CylinderSpec.from_height(A, h, kind), "top-bottom")


def test_union_find():
    uf = UnionFind(range(5))
    uf.union(0, 1)
    uf.union(3, 4)
    uf.union(1, 4)
    assert uf.find(0) == uf.find(3)
    assert uf.find(2) == 2
    assert sorted(len(c) for c in uf.components().values()) == [1, 4]


def test_parallel_paths():
    # two disjoint source-sink paths with capacities (1, 5) and (5, 1)
    pins = {
        ((0, 0), 0): 1,
        ((1, 0), 0): 5,
        ((0, 1), 0): 5,
        ((1, 1), 0): 1,
    }
    problem = FlowProblem.from_edges(pins, [(0, 0), (0, 1)], [(2, 0), (2, 1)])
    field = PinnedField(2, pins)
    result = max_flow(problem, field)
    assert result.value == 2
    assert result.cardinality == 2
    assert result.cutset == {((0, 0), 0), ((1, 1), 0)}
    assert validate_stream(result, problem, field)


def test_infinite_bridge_gives_infinite_flow():
    vertices = [(0, 0), (1, 0), (2, 0)]
    problem = FlowProblem.on_vertices(vertices, [(0, 0)], [(2, 0)])
    field = PinnedField(2, {((0, 0), 0): "inf", ((1, 0), 0): "inf"})
    result = max_flow(problem, field)
    assert result.value == INF
    assert result.is_infinite
    assert brute_force_min_cut(problem, field).value == INF


def test_infinite_edges_are_contracted():
    vertices = [(0, 0), (1, 0), (2, 0), (3, 0)]
    problem = FlowProblem.on_vertices(vertices, [(0, 0)], [(3, 0)])
    field = PinnedField(2, {((0, 0), 0): 3, ((1, 0), 0): "inf", ((2, 0), 0): 2})
    result = max_flow(problem, field)
    assert result.value == 2
    assert result.cutset == {((2, 0), 0)}
    assert validate_stream(result, problem, field)


def test_point_mass_cylinder():
    A = Hyperrect.canonical(Direction.axis(2), 4)
    problem = build_problem(CylinderSpec.from_height(A, 2), "top-bottom")
    field = CapacityField(parse_distribution("3/2:1"), seed=0, dimension=2)
    result = max_flow(problem, field)
    assert result.value == Fraction(15, 2)
    assert result.cardinality == 5
    assert is_cutset(result.cutset, problem)
    assert efficient(result.cutset, problem)
    assert validate_stream(result, problem, field)


@pytest.mark.parametrize("shape", SMALL_SHAPES)
@pytest.mark.parametrize("law", LAWS)
def test_matches_exhaustive_oracle(shape, law: str):
    problem = small_problem(*shape)
    for seed in range(5):
        field = CapacityField(parse_distribution(law), seed=seed, dimension=2)
        expected = brute_force_min_cut(problem, field)
        result = max_flow(problem, field)
        assert result.value == expected.value
        if not expected.is_infinite:
            assert result.cutset == expected.cutset
            assert cut_capacity(result.cutset, field) == result.value
            assert is_cutset(result.cutset, problem)
            assert validate_stream(result, problem, field)


def test_zero_capacity_cut_still_counts_edges():
    problem = small_problem((0, 1), 2, 1, "symmetric")
    field = CapacityField(parse_distribution("0:1"), seed=0, dimension=2)
    result = max_flow(problem, field)
    assert result.value == 0
    assert result.cardinality == 3
    assert result.cutset == brute_force_min_cut(problem, field).cutset


def test_oracle_refuses_large_problems():
    A = Hyperrect.canonical(Direction.axis(2), 4)
    problem = build_problem(CylinderSpec.from_height(A, 2), "top-bottom")
    field = CapacityField(parse_distribution("1:1"), seed=0, dimension=2)
    with pytest.raises(ProblemTooLargeError):
        brute_force_min_cut(problem, field)
    scattered = [(0, 0), (1, 0)] + [(3 * i, 5) for i in range(21)]
    sparse = FlowProblem.on_vertices(scattered, [(0, 0)], [(1, 0)])
    assert len(sparse.edges) == 1
    with pytest.raises(ProblemTooLargeError, match="free vertices"):
        brute_force_min_cut(sparse, field)


def test_efficient_requires_a_cutset():
    vertices = [(0, 0), (1, 0), (2, 0)]
    problem = FlowProblem.on_vertices(vertices, [(0, 0)], [(2, 0)])
    assert efficient({((0, 0), 0)}, problem)
    assert not efficient({((0, 0), 0), ((1, 0), 0)}, problem)
    with pytest.raises(DomainError):
        efficient(set(), problem)


@pytest.mark.slow
def test_oracle_agrees_on_a_thousand_seeds():
    problems = [small_problem(*shape) for shape in SMALL_SHAPES]
    laws = [parse_distribution(law) for law in LAWS]
    for seed in range(1000):
        problem = problems[seed % len(problems)]
        law = laws[(seed // len(problems)) % len(laws)]
        field = CapacityField(law, seed=seed, dimension=2)
        expected = brute_force_min_cut(problem, field)
        result = max_flow(problem, field)
        assert result.value == expected.value
        if not expected.is_infinite:
            assert result.cutset == expected.cutset
