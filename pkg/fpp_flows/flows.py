from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx

from fpp_flows.common import (
    DEFAULT_CLUSTER_BUDGET,
    ClusterBudgetError,
    CylinderKinds,
    DomainError,
    Terminals,
    get_logger,
    p_c_for,
)
from fpp_flows.distributions import Field, Value, dominates, total
from fpp_flows.lattice import (
    CylinderSpec,
    Edge,
    FlowProblem,
    Hyperrect,
    Point,
    boxes,
    boxes_containing,
    build_problem,
    endpoints,
    slab_bottom,
    top_bottom,
    validate_tiling,
)
from fpp_flows.maxflow import CutResult, cut_capacity, max_flow
from fpp_flows.percolation import cluster, edge_cluster, ext_boundary

logger = get_logger(__name__)


def solve(spec: CylinderSpec, terminals: str, field: Field) -> CutResult:
    return max_flow(build_problem(spec, terminals), field)


def phi(A: Hyperrect, h, field: Field) -> CutResult:
    """Maximal flow from the top to the bottom of the symmetric cylinder."""
    spec = CylinderSpec.from_height(A, h, CylinderKinds.symmetric.value)
    return solve(spec, Terminals.top_bottom.value, field)


def tau(A: Hyperrect, h, field: Field) -> CutResult:
    """Maximal flow from the upper half of the cylinder boundary to the lower half."""
    if h <= 0:
        raise DomainError(f"Height must be positive, got {h}.")
    spec = CylinderSpec.from_height(A, h, CylinderKinds.symmetric.value)
    return solve(spec, Terminals.half_boundaries.value, field)


def phi_directed(A: Hyperrect, h, field: Field) -> CutResult:
    if h < 1:
        raise DomainError(f"Directed cylinders need height >= 1, got {h}.")
    spec = CylinderSpec.from_height(A, h, CylinderKinds.directed.value)
    return solve(spec, Terminals.top_bottom.value, field)


def _ceil_root(value: int, k: int) -> int:
    if value <= 1:
        return value
    r = int(math.exp(math.log(value) / k))
    while r**k < value:
        r += 1
    while r > 0 and (r - 1) ** k >= value:
        r -= 1
    return r


def slab_threshold_level(A: Hyperrect) -> int:
    """ceil(t0 * |w|) with t0 = area(A) ** (1 / (2(d - 1))), computed exactly."""
    d = A.dimension
    value = A.area2 * A.direction.norm2 ** (2 * (d - 1))
    return max(1, _ceil_root(value, 4 * (d - 1)))


@dataclass(frozen=True)
class SlabHeight:
    level: Optional[int]
    threshold_level: int
    unbounded: bool = False

    @property
    def was_threshold(self) -> bool:
        return self.level == self.threshold_level


@dataclass(frozen=True)
class SlabFlowSample:
    hyperrect: Hyperrect
    level: int
    height: float
    flow_value: Value
    height_was_threshold: bool
    cut: CutResult
    margin: int = 0


def _check_subcritical(field: Field, K0: Value, p_c) -> None:
    distribution = getattr(field, "distribution", None)
    if distribution is None:
        return
    try:
        threshold = p_c_for(field.dimension, p_c)
    except DomainError:
        logger.debug("No p_c for dimension %d, skipping the K0 check", field.dimension)
        return
    if distribution.survival_above(K0) >= threshold:
        logger.warning(
            "P(t_F > K0) = %s is not below p_c = %s; slab heights may be large",
            distribution.survival_above(K0),
            threshold,
        )


def slab_height(
    A: Hyperrect,
    field_F: Field,
    K0: Value,
    p_c=None,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> SlabHeight:
    """Smallest slab level, at least the threshold, that no F-path above K0 from V(A) reaches."""
    _check_subcritical(field_F, K0, p_c)
    threshold = slab_threshold_level(A)
    reach = threshold
    for x in sorted(slab_bottom(A)):
        region = lambda y, x=x: y == x or A.level(y) >= 0
        c = cluster(field_F, K0, x, region=region, budget=budget)
        if c.budget_exceeded:
            return SlabHeight(None, threshold, unbounded=True)
        levels = [A.level(y) for y in c.vertices if A.level(y) >= 0]
        if levels:
            reach = max(reach, max(levels) + A.direction.max_step)
    return SlabHeight(reach, threshold)


def tilde_phi(
    A: Hyperrect,
    field_G: Field,
    field_F: Field,
    K0: Value,
    margin: Optional[int] = None,
    p_c=None,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> SlabFlowSample:
    """Alternative maximal flow from V(A) to the top of the slab of height H(F, K0).

    The slab is cut laterally at `margin` primitive lattice steps around A
    (default H + 2) and its lateral shell joins the sinks.
    """
    if getattr(field_G, "seed", None) != getattr(field_F, "seed", None):
        raise DomainError("Fields G and F must share the seed.")
    G_dist = getattr(field_G, "distribution", None)
    F_dist = getattr(field_F, "distribution", None)
    if G_dist is not None and F_dist is not None and not dominates(F_dist, G_dist):
        raise DomainError("Field F must dominate field G.")

    height = slab_height(A, field_F, K0, p_c=p_c, budget=budget)
    if height.unbounded:
        raise ClusterBudgetError("Slab height is unbounded within the cluster budget.")
    level = height.level
    margin = level + 2 if margin is None else margin
    spec = CylinderSpec(A, level, CylinderKinds.slab.value, margin)
    cut = solve(spec, Terminals.slab.value, field_G)
    return SlabFlowSample(
        A, level, level / A.direction.norm, cut.value, height.was_threshold, cut, margin
    )


@dataclass(frozen=True)
class SplitReport:
    lhs: Value
    tiles: Tuple[Value, ...]

    @property
    def rhs(self) -> Value:
        return total(self.tiles)

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def subadditive_split(
    B: Hyperrect,
    tiles: Sequence[Hyperrect],
    field_G: Field,
    field_F: Field,
    K0: Value,
    margin: Optional[int] = None,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> SplitReport:
    """Slab flow of B against the tiles, all cut laterally at the margin of B.

    Tile slabs are never higher than the slab of B, so with a shared margin
    every tile window lies inside the window of B.
    """
    validate_tiling(B, tiles)
    whole = tilde_phi(B, field_G, field_F, K0, margin=margin, budget=budget)
    parts = tuple(
        tilde_phi(A, field_G, field_F, K0, margin=whole.margin, budget=budget).flow_value
        for A in tiles
    )
    report = SplitReport(whole.flow_value, parts)
    if not report.holds:
        logger.error("Subadditivity violated: %s > %s", report.lhs, report.rhs)
    return report


def _boundary_key(vertices: Iterable[Point]) -> Point:
    return min(vertices)


@dataclass(frozen=True)
class SurgeryResult:
    edges: FrozenSet[Edge]
    heavy: FrozenSet[Edge]
    boundaries: Tuple[FrozenSet[Edge], ...]
    capacity: Value
    bound: Value
    budget_exceeded: bool = False


def cutset_surgery(
    E: Iterable[Edge],
    problem: FlowProblem,
    field_G: Field,
    K: Value,
    K0: Value,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> SurgeryResult:
    """Replace edges with t_G >= K by the exterior boundaries of their level-K0 clusters."""
    if not K > K0:
        raise DomainError(f"Surgery needs K > K0, got K={K}, K0={K0}.")
    E = frozenset(E)
    heavy = frozenset(e for e in E if field_G.capacity(e) >= K)
    boundaries: Dict[Point, FrozenSet[Edge]] = {}
    exceeded = False
    for f in sorted(heavy):
        c = edge_cluster(field_G, K0, f, budget=budget)
        if c.budget_exceeded:
            exceeded = True
            continue
        key = _boundary_key(c.vertices)
        if key not in boundaries:
            boundaries[key] = frozenset(ext_boundary(c))

    edges = set(E - heavy)
    for S in boundaries.values():
        edges |= S & problem.edge_set
    bound = total(min(field_G.capacity(e), K) for e in E) + K0 * sum(
        len(S) for S in boundaries.values()
    )
    return SurgeryResult(
        frozenset(edges),
        heavy,
        tuple(boundaries[k] for k in sorted(boundaries)),
        cut_capacity(edges, field_G),
        bound,
        exceeded,
    )


@dataclass(frozen=True)
class ZeroCutsetResult:
    edges: FrozenSet[Edge]
    capacity: Value
    bound: Value
    crossings: int
    problem: FlowProblem
    budget_exceeded: bool = False


def zero_cutset(
    A: Hyperrect,
    level: int,
    field_G: Field,
    K0: Value,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> ZeroCutsetResult:
    """Cutset of the directed cylinder built from zero-level and K0-level cluster boundaries.

    A bottom vertex whose positive-capacity cluster in the half-space stays
    below `level` contributes that cluster's exterior boundary; otherwise it
    contributes the exterior boundary of its full level-K0 cluster.
    """
    if not A.direction.is_axis:
        raise DomainError("Zero-regime cutsets need an axis direction.")
    spec = CylinderSpec(A, level, CylinderKinds.directed.value)
    problem = build_problem(spec, Terminals.top_bottom.value)
    half_space = lambda y: 0 <= A.level(y) <= level + 2

    boundaries: Dict[Tuple[int, Point], FrozenSet[Edge]] = {}
    bound: Value = 0
    crossings = 0
    exceeded = False
    for x in sorted(v for v in spec.members if A.level(v) == 0):
        zero = cluster(field_G, 0, x, region=half_space, budget=budget)
        if zero.budget_exceeded:
            exceeded = True
            continue
        if max(A.level(y) for y in zero.vertices) < level:
            key = (0, _boundary_key(zero.vertices))
            if key not in boundaries:
                boundaries[key] = frozenset(ext_boundary(zero))
            continue
        crossings += 1
        c = cluster(field_G, K0, x, budget=budget)
        if c.budget_exceeded:
            exceeded = True
            continue
        key = (1, _boundary_key(c.vertices))
        if key not in boundaries:
            boundaries[key] = frozenset(ext_boundary(c))
            bound += K0 * len(boundaries[key])

    edges: Set[Edge] = set()
    for S in boundaries.values():
        edges |= S & problem.edge_set
    return ZeroCutsetResult(
        frozenset(edges), cut_capacity(edges, field_G), bound, crossings, problem, exceeded
    )


@dataclass(frozen=True)
class FinitudeResult:
    edges: FrozenSet[Edge]
    capacity: Value
    bound: Value
    problem: FlowProblem
    budget_exceeded: bool = False


def finitude_cutset(
    A: Hyperrect,
    level: int,
    field_G: Field,
    K0: Value,
    budget: int = DEFAULT_CLUSTER_BUDGET,
) -> FinitudeResult:
    """Union of distinct level-K0 cluster boundaries of the cylinder bottom."""
    spec = CylinderSpec(A, level, CylinderKinds.symmetric.value)
    problem = build_problem(spec, Terminals.top_bottom.value)
    boundaries: Dict[Point, FrozenSet[Edge]] = {}
    exceeded = False
    for z in sorted(problem.sinks):
        c = cluster(field_G, K0, z, budget=budget)
        if c.budget_exceeded:
            exceeded = True
            continue
        key = _boundary_key(c.vertices)
        if key not in boundaries:
            boundaries[key] = frozenset(ext_boundary(c)) & problem.edge_set
    edges = frozenset().union(*boundaries.values()) if boundaries else frozenset()
    return FinitudeResult(edges, cut_capacity(edges, field_G), K0 * len(edges), problem, exceeded)


def annulus_problem(L: int, i: Sequence[int]) -> FlowProblem:
    inner, outer = boxes(L, i)
    region = [x for x in outer.points() if inner.sup_distance(x) >= inner.half]
    sources = [x for x in region if inner.sup_distance(x) == inner.half]
    sinks = [x for x in region if outer.sup_distance(x) == outer.half]
    return FlowProblem.on_vertices(region, sources, sinks)


def annulus_flow(L: int, i: Sequence[int], field: Field) -> CutResult:
    """Maximal flow across the annulus between the box of index i and its enlargement."""
    return max_flow(annulus_problem(L, i), field)


@dataclass(frozen=True)
class AnnulusReport:
    lhs: Value
    indices: Tuple[Point, ...]
    annuli: Tuple[Value, ...]

    @property
    def rhs(self) -> Value:
        return total(self.annuli)

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def crossing_boxes(spec: CylinderSpec, L: int) -> List[Point]:
    """Boxes holding the cylinder vertices every top-bottom path has to visit."""
    A = spec.hyperrect
    band = range(0, A.direction.max_step)
    indices: Set[Point] = set()
    for x in spec.members:
        if A.level(x) in band:
            indices.update(boxes_containing(x, L))
    return sorted(indices)


def annulus_decomposition(A: Hyperrect, h, L: int, field: Field) -> AnnulusReport:
    spec = CylinderSpec.from_height(A, h, CylinderKinds.symmetric.value)
    if spec.level < A.direction.max_step:
        raise DomainError("Cylinder is too low for the box decomposition.")
    top, bottom = top_bottom(spec)
    indices = crossing_boxes(spec, L)
    for i in indices:
        _, outer = boxes(L, i)
        if any(x in outer for x in top) and any(x in outer for x in bottom):
            raise DomainError(f"Enlarged box {i} meets both faces of the cylinder.")
    lhs = solve(spec, Terminals.top_bottom.value, field).value
    annuli = tuple(annulus_flow(L, i, field).value for i in indices)
    return AnnulusReport(lhs, tuple(indices), annuli)


@dataclass(frozen=True)
class AnimalCoarsening:
    L: int
    boxes: FrozenSet[Point]
    edge_count: int

    @property
    def size(self) -> int:
        return len(self.boxes)

    @property
    def ratio(self) -> float:
        return self.size * self.L / self.edge_count if self.edge_count else 0.0

    def is_connected(self) -> bool:
        if not self.boxes:
            return True
        graph = nx.Graph()
        graph.add_nodes_from(self.boxes)
        for i in self.boxes:
            for k in range(len(i)):
                j = i[:k] + (i[k] + 1,) + i[k + 1 :]
                if j in self.boxes:
                    graph.add_edge(i, j)
        return nx.is_connected(graph)


def animal(E: Iterable[Edge], L: int) -> AnimalCoarsening:
    """Indices of the boxes of side L that meet an edge of E."""
    if L < 2 or L % 2:
        raise DomainError(f"Box side must be an even integer >= 2, got {L}.")
    E = set(E)
    indices: Set[Point] = set()
    for edge in E:
        for x in endpoints(edge):
            indices.update(boxes_containing(x, L))
    return AnimalCoarsening(L, frozenset(indices), len(E))
