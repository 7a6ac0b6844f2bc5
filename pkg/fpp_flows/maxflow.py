from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Dict, FrozenSet, Hashable, Iterable, List, Optional, Set, Tuple

import networkx as nx
from networkx.algorithms.flow import dinitz

from fpp_flows.common import (
    CapacityOverflowError,
    DomainError,
    ProblemTooLargeError,
    get_logger,
)
from fpp_flows.distributions import INF, Field, Value, is_infinite, total
from fpp_flows.lattice import Edge, FlowProblem, Point, endpoints

logger = get_logger(__name__)

LEXICOGRAPHIC_LIMIT = 2**127
BRUTE_FORCE_MAX_EDGES = 20
BRUTE_FORCE_MAX_FREE_VERTICES = 20


class UnionFind:
    """Union-find over hashable items, with path compression."""

    def __init__(self, items: Iterable[Hashable] = ()):
        self.parents: Dict[Hashable, Hashable] = {x: x for x in items}

    def find(self, x: Hashable) -> Hashable:
        root = self.parents.setdefault(x, x)
        while root != self.parents[root]:
            root = self.parents[root]
        while x != root:
            self.parents[x], x = root, self.parents[x]
        return root

    def union(self, a: Hashable, b: Hashable) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parents[rb] = ra

    def components(self) -> Dict[Hashable, List[Hashable]]:
        groups: Dict[Hashable, List[Hashable]] = {}
        for x in self.parents:
            groups.setdefault(self.find(x), []).append(x)
        return groups


@dataclass(frozen=True)
class CutResult:
    value: Value
    cutset: FrozenSet[Edge] = frozenset()
    stream: Optional[Dict[Edge, Fraction]] = field(default=None, compare=False)

    @property
    def cardinality(self) -> int:
        return len(self.cutset)

    @property
    def is_infinite(self) -> bool:
        return is_infinite(self.value)


class _Contraction:
    """Problem graph with infinite-capacity edges contracted and terminals merged."""

    def __init__(self, problem: FlowProblem, capacities: Dict[Edge, Value]):
        self.problem = problem
        self.capacities = capacities
        self.components = UnionFind(sorted(problem.vertices))
        for edge in problem.edges:
            if is_infinite(capacities[edge]):
                self.components.union(*endpoints(edge))

        source_roots = {self.components.find(x) for x in problem.sources}
        sink_roots = {self.components.find(x) for x in problem.sinks}
        self.connected = bool(source_roots & sink_roots)
        self.node_of: Dict[Point, Hashable] = {}
        for x in problem.vertices:
            root = self.components.find(x)
            if root in source_roots:
                self.node_of[x] = "s"
            elif root in sink_roots:
                self.node_of[x] = "t"
            else:
                self.node_of[x] = ("c", root)

        self.finite_edges = [
            e for e in problem.edges if not is_infinite(capacities[e])
        ]
        denominators = (Fraction(capacities[e]).denominator for e in self.finite_edges)
        self.quantum = reduce(lambda a, b: a * b // math.gcd(a, b), denominators, 1)
        self.ticks = {e: int(capacities[e] * self.quantum) for e in self.finite_edges}

    def arcs(self) -> Iterable[Tuple[Edge, Hashable, Hashable]]:
        for edge in self.finite_edges:
            x, y = endpoints(edge)
            a, b = self.node_of[x], self.node_of[y]
            if a != b:
                yield edge, a, b

    def graph(self, weight) -> nx.DiGraph:
        G = nx.DiGraph()
        G.add_nodes_from(["s", "t"])
        for edge, a, b in self.arcs():
            c = weight(edge)
            for u, v in ((a, b), (b, a)):
                if G.has_edge(u, v):
                    G[u][v]["capacity"] += c
                else:
                    G.add_edge(u, v, capacity=c)
        return G


def capacities_of(problem: FlowProblem, field: Field) -> Dict[Edge, Value]:
    return {edge: field.capacity(edge) for edge in problem.edges}


def max_flow(problem: FlowProblem, field: Field, with_stream: bool = True) -> CutResult:
    """Exact maximal flow and its minimal-cardinality minimal cutset.

    Among minimal cutsets the one returned has the fewest edges and, among
    those, the largest source side of the residual partition.
    """
    contraction = _Contraction(problem, capacities_of(problem, field))
    if contraction.connected:
        return CutResult(INF)

    M = len(contraction.finite_edges)
    max_tick = max(contraction.ticks.values(), default=0)
    if (max_tick * (M + 1) + 1) * M >= LEXICOGRAPHIC_LIMIT:
        raise CapacityOverflowError(
            f"Lexicographic capacities overflow 128 bits (quantum {contraction.quantum}, "
            f"{M} edges, max capacity {max_tick} ticks)."
        )

    G = contraction.graph(lambda e: contraction.ticks[e] * (M + 1) + 1)
    lex_value, (source_side, _) = nx.minimum_cut(G, "s", "t", flow_func=dinitz)
    cutset = frozenset(
        edge
        for edge, a, b in contraction.arcs()
        if (a in source_side) != (b in source_side)
    )
    value = Fraction(lex_value // (M + 1), contraction.quantum)
    if lex_value % (M + 1) != len(cutset):
        raise RuntimeError("Cut cardinality does not match the lexicographic cut value.")

    logger.debug("max flow %s over %d edges, cut of %d", value, M, len(cutset))
    stream = _stream(contraction) if with_stream else None
    return CutResult(value, cutset, stream)


def _stream(contraction: _Contraction) -> Dict[Edge, Fraction]:
    G = contraction.graph(lambda e: contraction.ticks[e])
    _, flow = nx.maximum_flow(G, "s", "t", flow_func=dinitz)

    remaining: Dict[Tuple[Hashable, Hashable], int] = {}
    ticks: Dict[Edge, int] = {}
    for edge, a, b in contraction.arcs():
        if (a, b) not in remaining:
            net = flow[a].get(b, 0) - flow[b].get(a, 0)
            remaining[(a, b)], remaining[(b, a)] = net, -net
        r = remaining[(a, b)]
        amount = min(abs(r), contraction.ticks[edge])
        signed = amount if r > 0 else -amount
        ticks[edge] = signed
        remaining[(a, b)] -= signed
        remaining[(b, a)] += signed

    _route_contracted(contraction, ticks)
    Q = contraction.quantum
    return {edge: Fraction(t, Q) for edge, t in ticks.items() if t != 0}


def _route_contracted(contraction: _Contraction, ticks: Dict[Edge, int]) -> None:
    """Balance every vertex of a contracted component along a spanning tree."""
    problem = contraction.problem
    excess: Dict[Point, int] = {}
    for edge, t in ticks.items():
        x, y = endpoints(edge)
        excess[y] = excess.get(y, 0) + t
        excess[x] = excess.get(x, 0) - t

    terminals = problem.sources | problem.sinks
    infinite_adjacency: Dict[Point, List[Tuple[Point, Edge]]] = {}
    for edge in problem.edges:
        if is_infinite(contraction.capacities[edge]):
            x, y = endpoints(edge)
            infinite_adjacency.setdefault(x, []).append((y, edge))
            infinite_adjacency.setdefault(y, []).append((x, edge))

    for members in contraction.components.components().values():
        if len(members) < 2:
            continue
        rooted = sorted(v for v in members if v in terminals)
        root = rooted[0] if rooted else min(members)
        parent: Dict[Point, Tuple[Point, Edge]] = {}
        order, queue, seen = [], deque([root]), {root}
        while queue:
            v = queue.popleft()
            order.append(v)
            for u, edge in sorted(infinite_adjacency.get(v, [])):
                if u not in seen:
                    seen.add(u)
                    parent[u] = (v, edge)
                    queue.append(u)
        for v in reversed(order[1:]):
            surplus = excess.get(v, 0)
            if surplus == 0:
                continue
            up, edge = parent[v]
            # surplus leaves v toward its parent
            ticks[edge] = ticks.get(edge, 0) + (surplus if edge[0] == v else -surplus)
            excess[up] = excess.get(up, 0) + surplus
            excess[v] = 0


def is_cutset(E: Iterable[Edge], problem: FlowProblem) -> bool:
    removed = set(E)
    seen: Set[Point] = set(problem.sources)
    queue = deque(sorted(problem.sources))
    while queue:
        x = queue.popleft()
        if x in problem.sinks:
            return False
        for y, edge in problem.adjacency[x]:
            if edge not in removed and y not in seen:
                seen.add(y)
                queue.append(y)
    return True


def efficient(E: Iterable[Edge], problem: FlowProblem) -> bool:
    E = set(E)
    if not is_cutset(E, problem):
        raise DomainError("Edge set does not separate sources from sinks.")
    return not any(is_cutset(E - {edge}, problem) for edge in sorted(E))


def validate_stream(result: CutResult, problem: FlowProblem, field: Field) -> bool:
    if result.stream is None or is_infinite(result.value):
        return False
    stream = result.stream
    if not set(stream) <= problem.edge_set:
        return False
    for edge in problem.edges:
        if abs(stream.get(edge, 0)) > field.capacity(edge):
            return False

    net: Dict[Point, Fraction] = {x: Fraction(0) for x in problem.vertices}
    for edge, f in stream.items():
        x, y = endpoints(edge)
        net[x] += f
        net[y] -= f
    if any(net[x] != 0 for x in problem.vertices - problem.sources - problem.sinks):
        return False
    return sum(net[x] for x in problem.sources) == result.value


def cut_capacity(E: Iterable[Edge], field: Field) -> Value:
    return total(field.capacity(edge) for edge in E)


def brute_force_min_cut(problem: FlowProblem, field: Field) -> CutResult:
    """Exhaustive oracle over source sides.

    Every cutset contains the edge boundary of the set reachable from the
    sources without it, so minimizing (capacity, cardinality) over edge
    boundaries of source sides reaches every optimal edge subset. Ties go
    to the largest source side, then to the sorted cutset.

    Raises ProblemTooLargeError above BRUTE_FORCE_MAX_EDGES edges, and also
    above BRUTE_FORCE_MAX_FREE_VERTICES non-terminal vertices, whose subsets
    it enumerates.
    """
    if len(problem.edges) > BRUTE_FORCE_MAX_EDGES:
        raise ProblemTooLargeError(
            f"Oracle handles at most {BRUTE_FORCE_MAX_EDGES} edges, got {len(problem.edges)}."
        )
    free = sorted(problem.vertices - problem.sources - problem.sinks)
    if len(free) > BRUTE_FORCE_MAX_FREE_VERTICES:
        raise ProblemTooLargeError(
            f"Oracle handles at most {BRUTE_FORCE_MAX_FREE_VERTICES} free vertices."
        )

    capacities = capacities_of(problem, field)
    best, best_key = None, None
    for mask in range(2 ** len(free)):
        side = set(problem.sources)
        side.update(v for i, v in enumerate(free) if mask >> i & 1)
        cut = sorted(
            e for e in problem.edges if (endpoints(e)[0] in side) != (endpoints(e)[1] in side)
        )
        key = (total(capacities[e] for e in cut), len(cut), -len(side), cut)
        if best_key is None or key < best_key:
            best, best_key = cut, key

    value = best_key[0]
    if is_infinite(value):
        return CutResult(INF)
    return CutResult(value, frozenset(best), None)

