from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from tqdm import tqdm

from fpp_flows.common import (
    DEFAULT_CLUSTER_BUDGET,
    STATISTICAL_SLACK,
    ClusterBudgetError,
    DomainError,
    HypothesisError,
    as_fraction,
    derive_seed,
    get_logger,
    p_c_for,
)
from fpp_flows.distributions import CapacityField, Distribution, Field, Value
from fpp_flows.lattice import Edge, Point, endpoints, incident_edges, neighbors

logger = get_logger(__name__)

Region = Optional[Callable[[Point], bool]]
DIAMETER_CHUNK = 512


@dataclass(frozen=True)
class Cluster:
    anchor: Union[Point, Edge]
    level: Value
    vertices: FrozenSet[Point]
    region: Region = field(default=None, compare=False)
    budget_exceeded: bool = False

    @property
    def size(self) -> int:
        return len(self.vertices)

    def __contains__(self, x) -> bool:
        return x in self.vertices


@dataclass(frozen=True)
class Diameter:
    squared: int
    lower_bound_only: bool = False

    @property
    def value(self) -> float:
        return math.sqrt(self.squared)

    def below(self, h) -> bool:
        """Exact test of diam < h; never true for a lower bound."""
        if self.lower_bound_only:
            return False
        h = as_fraction(h)
        return h > 0 and self.squared < h * h


def is_open(field: Field, edge: Edge, K: Value) -> bool:
    return field.capacity(edge) > K


def _explore(
    field: Field, K: Value, starts: Iterable[Point], region: Region, budget: int
) -> Tuple[Set[Point], bool]:
    seen = set(starts)
    queue = deque(sorted(seen))
    while queue:
        x = queue.popleft()
        for edge in incident_edges(x):
            a, b = endpoints(edge)
            y = b if a == x else a
            if y in seen or (region is not None and not region(y)):
                continue
            if not is_open(field, edge, K):
                continue
            if len(seen) >= budget:
                return seen, True
            seen.add(y)
            queue.append(y)
    return seen, False


def cluster(
    field: Field,
    K: Value,
    anchor: Sequence[int],
    region: Region = None,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> Cluster:
    """Vertices joined to the anchor inside the region by edges of capacity > K."""
    anchor = tuple(anchor)
    if region is not None and not region(anchor):
        raise DomainError(f"Anchor {anchor} lies outside the exploration region.")
    vertices, exceeded = _explore(field, K, [anchor], region, budget)
    if exceeded:
        logger.warning("Cluster of %s at level %s exceeded budget %d", anchor, K, budget)
    return Cluster(anchor, K, frozenset(vertices), region, exceeded)


def edge_cluster(
    field: Field,
    K: Value,
    f: Edge,
    region: Region = None,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> Cluster:
    x, y = endpoints(f)
    cx = cluster(field, K, x, region, budget)
    if y in cx.vertices:
        return Cluster(f, K, cx.vertices, region, cx.budget_exceeded)
    cy = cluster(field, K, y, region, budget)
    return Cluster(
        f, K, cx.vertices | cy.vertices, region, cx.budget_exceeded or cy.budget_exceeded
    )


def squared_diameter(vertices: Iterable[Point]) -> int:
    points = np.asarray(sorted(vertices), dtype=np.int64)
    if len(points) < 2:
        return 0
    best = 0
    for start in range(0, len(points), DIAMETER_CHUNK):
        block = points[start : start + DIAMETER_CHUNK]
        diff = block[:, None, :] - points[None, :, :]
        best = max(best, int((diff * diff).sum(axis=-1).max()))
    return best


def diam(c: Cluster) -> Diameter:
    return Diameter(squared_diameter(c.vertices), lower_bound_only=c.budget_exceeded)


def _outer_fill(c: Cluster, margin: int) -> Tuple[Set[Point], List[range]]:
    points = np.asarray(sorted(c.vertices), dtype=np.int64)
    lo, hi = points.min(axis=0) - margin, points.max(axis=0) + margin
    ranges = [range(int(a), int(b) + 1) for a, b in zip(lo, hi)]

    def inside(x: Point) -> bool:
        return all(r.start <= a < r.stop for a, r in zip(x, ranges))

    shell = [
        x
        for x in itertools.product(*ranges)
        if any(a in (r.start, r.stop - 1) for a, r in zip(x, ranges))
    ]
    reached = set(shell)
    queue = deque(shell)
    while queue:
        x = queue.popleft()
        for y in neighbors(x):
            if y not in reached and y not in c.vertices and inside(y):
                reached.add(y)
                queue.append(y)
    return reached, ranges


def ext_boundary(c: Cluster, margin: int = 2) -> Set[Edge]:
    """Edges from the cluster to vertices joined to infinity outside it.

    Infinity is the outer shell of the cluster's bounding box widened by `margin`.
    """
    if c.budget_exceeded:
        raise ClusterBudgetError("Exterior boundary needs a complete cluster.")
    if margin < 1:
        raise DomainError("The outer shell needs a margin of at least 1.")
    reached, _ = _outer_fill(c, margin)
    result = set()
    for x in c.vertices:
        for edge in incident_edges(x):
            a, b = endpoints(edge)
            if (b if a == x else a) in reached:
                result.add(edge)
    return result


def interior(c: Cluster, margin: int = 2) -> FrozenSet[Point]:
    """The cluster together with the holes it encloses."""
    if c.budget_exceeded:
        raise ClusterBudgetError("Interior needs a complete cluster.")
    reached, ranges = _outer_fill(c, margin)
    return frozenset(x for x in itertools.product(*ranges) if x not in reached)


def _event_budget(h: Fraction, dimension: int) -> int:
    return (2 * math.ceil(h) + 1) ** dimension


def event_E(field: Field, K: Value, vertices: Iterable[Point], h) -> bool:
    """Whether every vertex's level-K cluster has diameter < h."""
    vertices = sorted(set(tuple(x) for x in vertices))
    if not vertices:
        return True
    h = as_fraction(h)
    if h <= 0:
        return False
    budget = _event_budget(h, len(vertices[0]))
    checked: Set[Point] = set()
    for x in vertices:
        if x in checked:
            continue
        c = cluster(field, K, x, budget=budget)
        if not diam(c).below(h):
            return False
        checked |= c.vertices
    return True


def event_E_prime(field: Field, K: Value, edges: Iterable[Edge], h) -> bool:
    """Whether every edge's level-K edge cluster has diameter < h."""
    edges = sorted(set(edges))
    if not edges:
        return True
    h = as_fraction(h)
    if h <= 0:
        return False
    budget = _event_budget(h, len(edges[0][0]))
    clusters: Dict[Point, Cluster] = {}

    def vertex_cluster(x: Point) -> Cluster:
        if x not in clusters:
            c = cluster(field, K, x, budget=budget)
            for y in c.vertices if not c.budget_exceeded else [x]:
                clusters[y] = c
        return clusters[x]

    for f in edges:
        x, y = endpoints(f)
        cx, cy = vertex_cluster(x), vertex_cluster(y)
        if cx.budget_exceeded or cy.budget_exceeded:
            return False
        if not Diameter(squared_diameter(cx.vertices | cy.vertices)).below(h):
            return False
    return True


@dataclass
class DominationReport:
    level: Value
    anchors: List[Point]
    sums_y: np.ndarray
    sums_x: np.ndarray
    rows: List[Tuple[int, float, float, float]]
    budget_hits: int = 0

    @property
    def violations(self) -> List[Tuple[int, float, float, float]]:
        return [row for row in self.rows if row[1] > row[2] + row[3]]


def check_subcritical_level(distribution: Distribution, K: Value, dimension: int, p_c=None) -> None:
    threshold = p_c_for(dimension, p_c)
    open_probability = distribution.survival_above(K)
    if open_probability >= threshold:
        raise HypothesisError(
            f"Level {K} is not subcritical: P(t > K) = {open_probability} >= p_c = {threshold}."
        )


def domination_sample(
    distribution: Distribution,
    K: Value,
    anchors: Sequence[Point],
    seed: int,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> Tuple[int, int, int]:
    """(sum of Y_i, sum of X_i, budget hits) for one replicate seed."""
    dimension = len(anchors[0])
    shared = CapacityField(distribution, seed, dimension)
    covered: Set[Point] = set()
    sum_y = sum_x = hits = 0
    for i, x in enumerate(anchors):
        if x not in covered:
            c = cluster(shared, K, x, budget=budget)
            hits += c.budget_exceeded
            sum_y += c.size
            covered |= c.vertices
        independent = CapacityField(distribution, derive_seed(seed, i + 1), dimension)
        c = cluster(independent, K, x, budget=budget)
        hits += c.budget_exceeded
        sum_x += c.size
    return sum_y, sum_x, hits


def domination_rows(
    sums_y: np.ndarray, sums_x: np.ndarray, thresholds: Optional[Sequence[int]] = None
) -> List[Tuple[int, float, float, float]]:
    """(a, freq of sum Y >= a, freq of sum X >= a, binomial band) per threshold."""
    n = len(sums_y)
    if thresholds is None:
        thresholds = range(1, int(max(sums_y.max(), sums_x.max())) + 2)
    rows = []
    for a in thresholds:
        freq_y = float(np.mean(sums_y >= a))
        freq_x = float(np.mean(sums_x >= a))
        variance = freq_y * (1 - freq_y) / n + freq_x * (1 - freq_x) / n
        rows.append((int(a), freq_y, freq_x, STATISTICAL_SLACK * math.sqrt(variance)))
    return rows


def domination_experiment(
    distribution: Distribution,
    K: Value,
    anchors: Sequence[Sequence[int]],
    replicates: int,
    seed_base: int = 0,
    p_c=None,
    thresholds: Optional[Sequence[int]] = None,
    budget: int = DEFAULT_CLUSTER_BUDGET,
    verbose: bool = False,
) -> DominationReport:
    """Compare tails of sequentially explored cluster sizes against independent copies.

    Y_i is the size of the cluster of x_i, or 0 when x_i already lies in an
    earlier cluster of the same field. X_i is the size of the cluster of x_i
    in an independent field.
    """
    anchors = [tuple(x) for x in anchors]
    if not anchors:
        raise DomainError("Domination experiment needs at least one anchor.")
    if replicates < 1:
        raise DomainError(f"Replicates must be positive, got {replicates}.")
    check_subcritical_level(distribution, K, len(anchors[0]), p_c)

    sums_y = np.zeros(replicates, dtype=np.int64)
    sums_x = np.zeros(replicates, dtype=np.int64)
    budget_hits = 0
    for r in tqdm(range(replicates), desc="Domination", disable=not verbose):
        sums_y[r], sums_x[r], hits = domination_sample(
            distribution, K, anchors, seed_base + r, budget
        )
        budget_hits += hits

    rows = domination_rows(sums_y, sums_x, thresholds)
    report = DominationReport(K, anchors, sums_y, sums_x, rows, budget_hits)
    if report.violations:
        logger.warning("Domination bands violated at %d thresholds", len(report.violations))
    return report
