from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property, reduce
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from fpp_flows.common import (
    CylinderKinds,
    DegenerateGeometryError,
    DomainError,
    Terminals,
    as_fraction,
    check_cylinder_kind,
    check_terminals,
)

Point = Tuple[int, ...]
Edge = Tuple[Point, int]


def dot(x: Sequence[int], y: Sequence[int]) -> int:
    return sum(a * b for a, b in zip(x, y))


def add(x: Sequence[int], y: Sequence[int]) -> Point:
    return tuple(a + b for a, b in zip(x, y))


def sub(x: Sequence[int], y: Sequence[int]) -> Point:
    return tuple(a - b for a, b in zip(x, y))


def step(x: Point, axis: int, sign: int = 1) -> Point:
    return x[:axis] + (x[axis] + sign,) + x[axis + 1 :]


def canonical_edge(x: Sequence[int], y: Sequence[int]) -> Edge:
    x, y = tuple(x), tuple(y)
    diff = sub(y, x)
    axes = [k for k, c in enumerate(diff) if c != 0]
    if len(axes) != 1 or abs(diff[axes[0]]) != 1:
        raise DomainError(f"{x} and {y} are not lattice neighbors.")
    return (x, axes[0]) if diff[axes[0]] == 1 else (y, axes[0])


def endpoints(edge: Edge) -> Tuple[Point, Point]:
    x, axis = edge
    return x, step(x, axis)


def neighbors(x: Point) -> Iterator[Point]:
    for axis in range(len(x)):
        yield step(x, axis, -1)
        yield step(x, axis, 1)


def incident_edges(x: Point) -> List[Edge]:
    return [(step(x, k, -1), k) for k in range(len(x))] + [(x, k) for k in range(len(x))]


def edge_boundary(vertices: Set[Point]) -> Set[Edge]:
    """Edges with exactly one endpoint in the vertex set."""
    result = set()
    for x in vertices:
        for edge in incident_edges(x):
            a, b = endpoints(edge)
            if (a in vertices) != (b in vertices):
                result.add(edge)
    return result


def integer_orthogonal_basis(w: Sequence[int]) -> List[Point]:
    """Pairwise orthogonal primitive integer vectors spanning the complement of w."""
    w = tuple(int(c) for c in w)
    if not any(w):
        raise DomainError("Direction vector must be nonzero.")
    d = len(w)
    pivot = next(k for k, c in enumerate(w) if c != 0)
    kernel = []
    for j in range(d):
        if j == pivot:
            continue
        u = [0] * d
        u[j], u[pivot] = w[pivot], -w[j]
        kernel.append([Fraction(c) for c in u])

    basis: List[Point] = []
    for u in kernel:
        v = list(u)
        for b in basis:
            coef = Fraction(dot(v, b), dot(b, b))
            v = [a - coef * c for a, c in zip(v, b)]
        scale = reduce(lambda a, b: a * b // math.gcd(a, b), (c.denominator for c in v), 1)
        ints = [int(c * scale) for c in v]
        g = reduce(math.gcd, (abs(c) for c in ints))
        ints = [c // g for c in ints]
        if next(c for c in ints if c != 0) < 0:
            ints = [-c for c in ints]
        basis.append(tuple(ints))
    return basis


@dataclass(frozen=True)
class Direction:
    w: Point

    def __post_init__(self):
        w = tuple(int(c) for c in self.w)
        object.__setattr__(self, "w", w)
        if len(w) < 2:
            raise DomainError("Directions live in dimension d >= 2.")
        if not any(w):
            raise DomainError("Direction vector must be nonzero.")
        if reduce(math.gcd, (abs(c) for c in w)) != 1:
            raise DomainError(f"Direction {w} is not primitive.")

    @classmethod
    def of(cls, vector: Sequence[int]) -> Direction:
        vector = tuple(int(c) for c in vector)
        g = reduce(math.gcd, (abs(c) for c in vector))
        if g == 0:
            raise DomainError("Direction vector must be nonzero.")
        return cls(tuple(c // g for c in vector))

    @classmethod
    def axis(cls, dimension: int, k: Optional[int] = None) -> Direction:
        k = dimension - 1 if k is None else k
        return cls(tuple(1 if i == k else 0 for i in range(dimension)))

    @property
    def dimension(self) -> int:
        return len(self.w)

    @property
    def norm2(self) -> int:
        return dot(self.w, self.w)

    @property
    def norm(self) -> float:
        return math.sqrt(self.norm2)

    @property
    def unit(self) -> Tuple[float, ...]:
        return tuple(c / self.norm for c in self.w)

    @property
    def max_step(self) -> int:
        return max(abs(c) for c in self.w)

    @property
    def is_axis(self) -> bool:
        return sorted(abs(c) for c in self.w)[-2] == 0

    def floor_level(self, h) -> int:
        """Largest lattice level N with N <= h * |w|."""
        h = as_fraction(h)
        if h < 0:
            raise DomainError(f"Heights are nonnegative, got {h}.")
        a, b = h.numerator, h.denominator
        return math.isqrt(a * a * self.norm2 // (b * b))

    def ceil_level(self, h) -> int:
        """Smallest lattice level N with N >= h * |w|."""
        h = as_fraction(h)
        level = self.floor_level(h)
        a, b = h.numerator, h.denominator
        return level if level * level * b * b == a * a * self.norm2 else level + 1


@dataclass(frozen=True)
class Hyperrect:
    """o + sum_i mu_i * scale * f_i, mu in [0, 1]^(d-1), normal to direction."""

    direction: Direction
    origin: Point
    basis: Tuple[Point, ...]
    scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(c) for c in self.origin))
        object.__setattr__(self, "basis", tuple(tuple(int(c) for c in f) for f in self.basis))
        d = self.direction.dimension
        if len(self.origin) != d or len(self.basis) != d - 1:
            raise DomainError(f"A hyperrectangle in dimension {d} needs d - 1 basis vectors.")
        if not isinstance(self.scale, int) or self.scale < 1:
            raise DomainError(f"Scale must be a positive integer, got {self.scale}.")
        for i, f in enumerate(self.basis):
            if len(f) != d or not any(f):
                raise DomainError(f"Basis vector {f} is degenerate.")
            if dot(f, self.direction.w) != 0:
                raise DomainError(f"Basis vector {f} is not orthogonal to {self.direction.w}.")
            for g in self.basis[i + 1 :]:
                if dot(f, g) != 0:
                    raise DomainError(f"Basis vectors {f} and {g} are not orthogonal.")

    @classmethod
    def canonical(
        cls, direction: Direction, scale: int = 1, origin: Optional[Sequence[int]] = None
    ) -> Hyperrect:
        origin = tuple(origin) if origin is not None else (0,) * direction.dimension
        return cls(direction, origin, tuple(integer_orthogonal_basis(direction.w)), scale)

    @property
    def dimension(self) -> int:
        return self.direction.dimension

    @cached_property
    def basis_norms2(self) -> Tuple[int, ...]:
        return tuple(dot(f, f) for f in self.basis)

    @cached_property
    def unit_steps(self) -> Tuple[int, ...]:
        """Lateral coordinate gained by one primitive step along each basis vector."""
        return tuple(
            n2 // reduce(math.gcd, (abs(c) for c in f))
            for f, n2 in zip(self.basis, self.basis_norms2)
        )

    @cached_property
    def extents(self) -> Tuple[int, ...]:
        """Upper bounds of the lateral coordinates (x - o) . f_i."""
        return tuple(self.scale * n2 for n2 in self.basis_norms2)

    @property
    def area2(self) -> int:
        return math.prod(self.scale * self.scale * n2 for n2 in self.basis_norms2)

    @property
    def area(self) -> float:
        return math.sqrt(self.area2)

    def level(self, x: Sequence[int]) -> int:
        return dot(sub(x, self.origin), self.direction.w)

    def lateral(self, x: Sequence[int]) -> Tuple[int, ...]:
        rel = sub(x, self.origin)
        return tuple(dot(rel, f) for f in self.basis)

    def scaled(self, scale: int) -> Hyperrect:
        return Hyperrect(self.direction, self.origin, self.basis, scale)

    def translated(self, vector: Sequence[int]) -> Hyperrect:
        return Hyperrect(self.direction, add(self.origin, vector), self.basis, self.scale)

    def split(self, counts: Sequence[int]) -> List[Hyperrect]:
        if len(counts) != len(self.basis):
            raise DomainError("One split count per basis vector is required.")
        if any(c < 1 or self.scale % c for c in counts):
            raise DomainError(f"Split counts {tuple(counts)} must divide the scale {self.scale}.")
        sides = [tuple(c * (self.scale // n) for c in f) for f, n in zip(self.basis, counts)]
        tiles = []
        for offsets in itertools.product(*(range(n) for n in counts)):
            origin = self.origin
            for j, side in zip(offsets, sides):
                origin = add(origin, tuple(j * c for c in side))
            tiles.append(Hyperrect(self.direction, origin, tuple(sides), 1))
        return tiles

    def box_in_frame(self, tile: Hyperrect) -> Tuple[Tuple[Fraction, Fraction], ...]:
        """The tile as a box of normalized coordinates mu in this hyperrectangle's frame."""
        if tile.direction != self.direction or self.level(tile.origin) != 0:
            raise DomainError("Tile does not lie in the hyperplane of the hyperrectangle.")
        box = []
        for f, g, extent in zip(self.basis, tile.basis, self.extents):
            side = tuple(tile.scale * c for c in g)
            ratio = Fraction(dot(side, f), dot(f, f))
            if ratio <= 0 or tuple(ratio * c for c in f) != side:
                raise DomainError("Tile sides must be positive multiples of the basis.")
            start = Fraction(dot(sub(tile.origin, self.origin), f), extent)
            box.append((start, start + ratio * dot(f, f) / extent))
        return tuple(box)


def validate_tiling(whole: Hyperrect, tiles: Sequence[Hyperrect]) -> None:
    if not tiles:
        raise DomainError("A tiling needs at least one tile.")
    boxes = [whole.box_in_frame(tile) for tile in tiles]
    for box in boxes:
        if any(lo < 0 or hi > 1 for lo, hi in box):
            raise DomainError("Tile sticks out of the hyperrectangle.")
    for a, b in itertools.combinations(boxes, 2):
        if all(max(lo1, lo2) < min(hi1, hi2) for (lo1, hi1), (lo2, hi2) in zip(a, b)):
            raise DomainError("Tiles overlap.")
    volume = sum(math.prod((hi - lo for lo, hi in box), start=Fraction(1)) for box in boxes)
    if volume != 1:
        raise DomainError("Tiles do not cover the hyperrectangle.")


def _bounding_box(
    hyperrect: Hyperrect, levels: Tuple[int, int], lateral: Sequence[Tuple[int, int]]
) -> List[range]:
    w, n2 = hyperrect.direction.w, hyperrect.direction.norm2
    lows = [math.inf] * hyperrect.dimension
    highs = [-math.inf] * hyperrect.dimension
    for s in levels:
        for corner in itertools.product(*lateral):
            point = [Fraction(o) + Fraction(s * c, n2) for o, c in zip(hyperrect.origin, w)]
            for lam, f, fn2 in zip(corner, hyperrect.basis, hyperrect.basis_norms2):
                point = [p + Fraction(lam * c, fn2) for p, c in zip(point, f)]
            for k, c in enumerate(point):
                lows[k] = min(lows[k], math.floor(c))
                highs[k] = max(highs[k], math.ceil(c))
    return [range(lo, hi + 1) for lo, hi in zip(lows, highs)]


def scan(
    hyperrect: Hyperrect, levels: Tuple[int, int], lateral: Sequence[Tuple[int, int]]
) -> List[Point]:
    """Lattice points with level in [levels] and lateral coordinates in [lateral]."""
    ranges = _bounding_box(hyperrect, levels, lateral)
    grids = np.meshgrid(*[np.arange(r.start, r.stop, dtype=np.int64) for r in ranges], indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1)
    rel = points - np.asarray(hyperrect.origin, dtype=np.int64)
    s = rel @ np.asarray(hyperrect.direction.w, dtype=np.int64)
    mask = (s >= levels[0]) & (s <= levels[1])
    if hyperrect.basis:
        lam = rel @ np.asarray(hyperrect.basis, dtype=np.int64).T
        lo = np.asarray([b[0] for b in lateral], dtype=np.int64)
        hi = np.asarray([b[1] for b in lateral], dtype=np.int64)
        mask &= np.all((lam >= lo) & (lam <= hi), axis=1)
    return [tuple(int(c) for c in row) for row in points[mask]]


def crosses_face(
    hyperrect: Hyperrect,
    x: Point,
    y: Point,
    face_level: int,
    lateral: Sequence[Tuple[int, int]],
) -> bool:
    """Whether the closed segment [x, y] meets the closed face at face_level."""
    a = hyperrect.level(x)
    b = hyperrect.level(y) - a
    if b == 0:
        if a != face_level:
            return False
        lo, hi = Fraction(0), Fraction(1)
    else:
        theta = Fraction(face_level - a, b)
        if not 0 <= theta <= 1:
            return False
        lo = hi = theta
    for lx, ly, (low, high) in zip(hyperrect.lateral(x), hyperrect.lateral(y), lateral):
        delta = ly - lx
        if delta == 0:
            if not low <= lx <= high:
                return False
            continue
        t1, t2 = Fraction(low - lx, delta), Fraction(high - lx, delta)
        lo, hi = max(lo, min(t1, t2)), min(hi, max(t1, t2))
        if lo > hi:
            return False
    return True


@dataclass(frozen=True)
class CylinderSpec:
    """A cylinder over a hyperrectangle, measured in lattice levels.

    symmetric: levels in [-level, level]; directed: [0, level]; slab: [0, level]
    with lateral coordinates widened by `margin` primitive lattice steps along each
    basis direction, so the window does not depend on how the basis is scaled.
    """

    hyperrect: Hyperrect
    level: int
    kind: str = CylinderKinds.symmetric.value
    margin: int = 0

    def __post_init__(self):
        check_cylinder_kind(self.kind)
        if not isinstance(self.level, int) or self.level < 0:
            raise DomainError(f"Cylinder level must be a nonnegative integer, got {self.level}.")
        if self.margin < 0:
            raise DomainError(f"Window margin must be nonnegative, got {self.margin}.")

    @classmethod
    def from_height(cls, hyperrect: Hyperrect, h, kind: str = "symmetric", margin: int = 0):
        return cls(hyperrect, hyperrect.direction.floor_level(h), kind, margin)

    @property
    def height(self) -> float:
        return self.level / self.hyperrect.direction.norm

    @property
    def levels(self) -> Tuple[int, int]:
        if self.kind == CylinderKinds.symmetric.value:
            return (-self.level, self.level)
        return (0, self.level)

    @cached_property
    def lateral_bounds(self) -> Tuple[Tuple[int, int], ...]:
        A = self.hyperrect
        return tuple(
            (-self.margin * step, extent + self.margin * step)
            for extent, step in zip(A.extents, A.unit_steps)
        )

    def member(self, x: Sequence[int]) -> bool:
        s = self.hyperrect.level(x)
        if not self.levels[0] <= s <= self.levels[1]:
            return False
        return all(
            lo <= lam <= hi
            for lam, (lo, hi) in zip(self.hyperrect.lateral(x), self.lateral_bounds)
        )

    __contains__ = member

    @cached_property
    def members(self) -> FrozenSet[Point]:
        return frozenset(scan(self.hyperrect, self.levels, self.lateral_bounds))

    def to_record(self) -> Dict:
        A = self.hyperrect
        return {
            "dimension": A.dimension,
            "w": list(A.direction.w),
            "basis": [list(f) for f in A.basis],
            "origin": list(A.origin),
            "p": A.scale,
            "level": self.level,
            "kind": self.kind,
            "margin": self.margin,
        }

    @classmethod
    def from_record(cls, record: Dict) -> CylinderSpec:
        direction = Direction(tuple(record["w"]))
        if len(direction.w) != int(record.get("dimension", len(direction.w))):
            raise DomainError("Record dimension does not match its direction.")
        A = Hyperrect(
            direction,
            tuple(record["origin"]),
            tuple(tuple(f) for f in record["basis"]),
            int(record["p"]),
        )
        kind = record.get("kind", CylinderKinds.symmetric.value)
        margin = int(record.get("margin", 0))
        if "level" in record:
            return cls(A, int(record["level"]), kind, margin)
        return cls.from_height(A, record["h"], kind, margin)


def _face_terminals(spec: CylinderSpec, face_level: int) -> Set[Point]:
    members, A = spec.members, spec.hyperrect
    result = set()
    for x in members:
        for y in neighbors(x):
            if y not in members and crosses_face(A, x, y, face_level, spec.lateral_bounds):
                result.add(x)
                break
    return result


def top_bottom(spec: CylinderSpec) -> Tuple[FrozenSet[Point], FrozenSet[Point]]:
    if spec.kind == CylinderKinds.slab.value:
        raise DomainError("Top and bottom are defined for symmetric and directed cylinders.")
    if spec.level < 1:
        raise DegenerateGeometryError("Cylinder of level 0 has coinciding top and bottom.")
    top = _face_terminals(spec, spec.levels[1])
    bottom = _face_terminals(spec, spec.levels[0])
    if not top or not bottom:
        raise DegenerateGeometryError("Cylinder has an empty top or bottom.")
    if top & bottom:
        raise DegenerateGeometryError("Cylinder top and bottom intersect.")
    return frozenset(top), frozenset(bottom)


def half_boundaries(spec: CylinderSpec) -> Tuple[FrozenSet[Point], FrozenSet[Point]]:
    if spec.kind != CylinderKinds.symmetric.value:
        raise DomainError("Half boundaries are defined for symmetric cylinders.")
    if spec.level < 1:
        raise DegenerateGeometryError("Cylinder of level 0 has no upper or lower half.")
    members, A = spec.members, spec.hyperrect
    upper, lower = set(), set()
    for x in members:
        s = A.level(x)
        if s == 0 or all(y in members for y in neighbors(x)):
            continue
        (upper if s > 0 else lower).add(x)
    if not upper or not lower:
        raise DegenerateGeometryError("Cylinder has an empty half boundary.")
    return frozenset(upper), frozenset(lower)


def slab_bottom(A: Hyperrect) -> FrozenSet[Point]:
    """V(A): vertices below the hyperplane joined to the slab by an edge meeting A."""
    bounds = tuple((0, extent) for extent in A.extents)
    wide = tuple(
        (lo - max(abs(c) for c in f), hi + max(abs(c) for c in f))
        for (lo, hi), f in zip(bounds, A.basis)
    )
    result = set()
    for x in scan(A, (-A.direction.max_step, -1), wide):
        for y in neighbors(x):
            if A.level(y) >= 0 and crosses_face(A, x, y, 0, bounds):
                result.add(x)
                break
    if not result:
        raise DegenerateGeometryError("Hyperrectangle has an empty discretization V(A).")
    return frozenset(result)


def slab_sets(
    A: Hyperrect, level: int, margin: int = 0
) -> Tuple[FrozenSet[Point], FrozenSet[Point]]:
    """(V(A), W(A, level)) with W restricted to the lateral window of the given margin."""
    if level < 1:
        raise DomainError(f"Slab level must be at least 1, got {level}.")
    spec = CylinderSpec(A, level, CylinderKinds.slab.value, margin)
    low = max(0, level - A.direction.max_step + 1)
    top = frozenset(
        x
        for x in scan(A, (low, level), spec.lateral_bounds)
        if any(A.level(y) > level for y in neighbors(x))
    )
    return slab_bottom(A), top


def lateral_shell(spec: CylinderSpec) -> FrozenSet[Point]:
    """Window vertices of a slab with a neighbor whose lateral coordinates leave the window."""
    A, bounds = spec.hyperrect, spec.lateral_bounds
    result = set()
    for x in spec.members:
        for y in neighbors(x):
            if any(not lo <= lam <= hi for lam, (lo, hi) in zip(A.lateral(y), bounds)):
                result.add(x)
                break
    return frozenset(result)


@dataclass(frozen=True)
class FlowProblem:
    vertices: FrozenSet[Point]
    edges: Tuple[Edge, ...]
    sources: FrozenSet[Point]
    sinks: FrozenSet[Point]

    def __post_init__(self):
        if not self.vertices:
            raise DegenerateGeometryError("Flow problem has no vertices.")
        if not self.sources or not self.sinks:
            raise DegenerateGeometryError("Flow problem needs sources and sinks.")
        if self.sources & self.sinks:
            raise DegenerateGeometryError("Sources and sinks intersect.")
        if not (self.sources | self.sinks) <= self.vertices:
            raise DomainError("Terminals must be member vertices.")

    @classmethod
    def from_edges(
        cls, edges: Iterable[Edge], sources: Iterable[Point], sinks: Iterable[Point]
    ) -> FlowProblem:
        edges = tuple(sorted(set(edges)))
        sources, sinks = frozenset(sources), frozenset(sinks)
        vertices = set(sources | sinks)
        for edge in edges:
            vertices.update(endpoints(edge))
        return cls(frozenset(vertices), edges, sources, sinks)

    @classmethod
    def on_vertices(
        cls, vertices: Iterable[Point], sources: Iterable[Point], sinks: Iterable[Point]
    ) -> FlowProblem:
        vertices = frozenset(vertices)
        edges = sorted(
            (x, k)
            for x in vertices
            for k in range(len(x))
            if step(x, k) in vertices
        )
        return cls(vertices, tuple(edges), frozenset(sources), frozenset(sinks))

    @cached_property
    def edge_set(self) -> FrozenSet[Edge]:
        return frozenset(self.edges)

    @cached_property
    def adjacency(self) -> Dict[Point, List[Tuple[Point, Edge]]]:
        result: Dict[Point, List[Tuple[Point, Edge]]] = {x: [] for x in self.vertices}
        for edge in self.edges:
            a, b = endpoints(edge)
            result[a].append((b, edge))
            result[b].append((a, edge))
        return result


def build_problem(spec: CylinderSpec, terminals: str = "top-bottom") -> FlowProblem:
    check_terminals(terminals)
    kind = spec.kind
    if terminals == Terminals.top_bottom.value and kind != CylinderKinds.slab.value:
        sources, sinks = top_bottom(spec)
        return FlowProblem.on_vertices(spec.members, sources, sinks)
    if terminals == Terminals.half_boundaries.value and kind == CylinderKinds.symmetric.value:
        sources, sinks = half_boundaries(spec)
        return FlowProblem.on_vertices(spec.members, sources, sinks)
    if terminals == Terminals.slab.value and kind == CylinderKinds.slab.value:
        bottom, top = slab_sets(spec.hyperrect, spec.level, spec.margin)
        sinks = top | lateral_shell(spec)
        return FlowProblem.on_vertices(spec.members | bottom, bottom, sinks)
    raise DomainError(f"Terminals '{terminals}' are not compatible with a {kind} cylinder.")


@dataclass(frozen=True)
class LBox:
    """L * index + [-L/2, L/2]^d, or the enlarged [-3L/2, 3L/2]^d."""

    L: int
    index: Point
    enlarged: bool = False

    @property
    def half(self) -> int:
        return 3 * self.L // 2 if self.enlarged else self.L // 2

    @property
    def center(self) -> Point:
        return tuple(self.L * i for i in self.index)

    def contains(self, x: Sequence[int]) -> bool:
        return all(abs(a - c) <= self.half for a, c in zip(x, self.center))

    __contains__ = contains

    def sup_distance(self, x: Sequence[int]) -> int:
        return max(abs(a - c) for a, c in zip(x, self.center))

    def points(self) -> Iterator[Point]:
        return itertools.product(*(range(c - self.half, c + self.half + 1) for c in self.center))


def boxes(L: int, i: Sequence[int]) -> Tuple[LBox, LBox]:
    if L < 2 or L % 2:
        raise DomainError(f"Box side must be an even integer >= 2, got {L}.")
    index = tuple(int(c) for c in i)
    return LBox(L, index), LBox(L, index, enlarged=True)


def box_of(x: Sequence[int], L: int) -> Point:
    # smallest index whose closed box contains each coordinate
    return tuple(-((L // 2 - c) // L) for c in x)


def boxes_containing(x: Sequence[int], L: int) -> List[Point]:
    options = []
    for c, i in zip(x, box_of(x, L)):
        options.append((i, i + 1) if c == L * i + L // 2 else (i,))
    return list(itertools.product(*options))
