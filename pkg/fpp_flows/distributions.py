from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import (
    Callable,
    Dict,
    Iterable,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from fpp_flows.common import DEFAULT_QUANTUM, DomainError, as_fraction

INF = math.inf
RAW_SCALE = 2**64
MAX_KEYED_DIMENSION = 7
COORDINATE_BITS = 32

Value = Union[Fraction, float]
Point = Tuple[int, ...]
Edge = Tuple[Point, int]


def is_infinite(value: Value) -> bool:
    return isinstance(value, float) and math.isinf(value)


def parse_value(value: Union[str, int, float, Fraction]) -> Value:
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "∞"):
        return INF
    if isinstance(value, float) and math.isinf(value) and value > 0:
        return INF
    result = as_fraction(value)
    if result < 0:
        raise DomainError(f"Capacities are nonnegative, got {result}.")
    return result


def format_value(value: Value) -> str:
    return "inf" if is_infinite(value) else str(value)


def total(values: Iterable[Value]) -> Value:
    """Sum of extended values; any infinite term makes the sum infinite."""
    result: Value = Fraction(0)
    for value in values:
        if is_infinite(value):
            return INF
        result += value
    return result


def _on_grid(value: Fraction, quantum: int) -> bool:
    return (value * quantum).denominator == 1


def _quantize_up(value: Union[float, Fraction], quantum: int) -> Value:
    if isinstance(value, float):
        if math.isinf(value):
            return INF
        value = Fraction(value)
    return Fraction(math.ceil(value * quantum), quantum)


@dataclass(frozen=True)
class Distribution:
    """A capacity law on [0, +inf] as sorted atoms (value, mass).

    Every law is a finite set of atoms on the 1/quantum grid; there is no
    separate continuous part. A continuous law enters through a quantile
    function or table cut into cells, and each cell value is rounded up to
    the next multiple of 1/quantum.
    """

    atoms: Tuple[Tuple[Value, Fraction], ...]
    quantum: int = DEFAULT_QUANTUM

    def __post_init__(self):
        if not isinstance(self.quantum, int) or self.quantum <= 0:
            raise DomainError(f"Quantum must be a positive integer, got {self.quantum}.")
        if not self.atoms:
            raise DomainError("A distribution needs at least one atom.")
        previous: Optional[Value] = None
        for value, mass in self.atoms:
            if mass <= 0:
                raise DomainError(f"Atom masses must be positive, got {mass}.")
            if not is_infinite(value):
                if value < 0:
                    raise DomainError(f"Capacities are nonnegative, got {value}.")
                if not _on_grid(value, self.quantum):
                    raise DomainError(
                        f"Value {value} is not a multiple of 1/{self.quantum}."
                    )
            if previous is not None and not previous < value:
                raise DomainError("Atoms must be sorted by strictly increasing value.")
            previous = value
        mass_sum = sum(mass for _, mass in self.atoms)
        if mass_sum != 1:
            raise DomainError(f"Total mass must be exactly 1, got {mass_sum}.")

    @classmethod
    def from_atoms(
        cls,
        atoms: Union[Mapping, Iterable[Tuple]],
        quantum: int = DEFAULT_QUANTUM,
    ) -> Distribution:
        pairs = atoms.items() if isinstance(atoms, Mapping) else atoms
        merged: Dict[Value, Fraction] = {}
        for value, mass in pairs:
            value, mass = parse_value(value), as_fraction(mass)
            if mass < 0:
                raise DomainError(f"Atom masses must be nonnegative, got {mass}.")
            if mass > 0:
                merged[value] = merged.get(value, Fraction(0)) + mass
        return cls(atoms=tuple(sorted(merged.items())), quantum=quantum)

    @classmethod
    def point_mass(cls, value, quantum: int = DEFAULT_QUANTUM) -> Distribution:
        return cls.from_atoms([(value, 1)], quantum=quantum)

    @classmethod
    def from_quantile_function(
        cls,
        fn: Callable[[Fraction], Union[float, Fraction]],
        mass=1,
        resolution: int = 1024,
        atoms: Iterable[Tuple] = (),
        quantum: int = DEFAULT_QUANTUM,
    ) -> Distribution:
        # cell k of the continuous part takes fn at its midpoint, rounded up to 1/Q
        mass = as_fraction(mass)
        cells = [
            (_quantize_up(fn(Fraction(2 * k - 1, 2 * resolution)), quantum), mass / resolution)
            for k in range(1, resolution + 1)
        ]
        values = [value for value, _ in cells]
        if any(b < a for a, b in zip(values, values[1:])):
            raise DomainError("Quantile function must be nondecreasing.")
        return cls.from_atoms(list(atoms) + cells, quantum=quantum)

    @classmethod
    def from_table(
        cls,
        rows: Sequence[Tuple],
        mass=1,
        atoms: Iterable[Tuple] = (),
        quantum: int = DEFAULT_QUANTUM,
    ) -> Distribution:
        mass = as_fraction(mass)
        cells = []
        previous_u, previous_value = Fraction(0), None
        for u, value in rows:
            u, value = as_fraction(u), parse_value(value)
            if not previous_u < u <= 1:
                raise DomainError("Table probabilities must increase strictly within (0, 1].")
            if previous_value is not None and value < previous_value:
                raise DomainError("Quantile table values must be nondecreasing.")
            value = value if is_infinite(value) else _quantize_up(value, quantum)
            cells.append((value, mass * (u - previous_u)))
            previous_u, previous_value = u, value
        if previous_u != 1:
            raise DomainError("The last table probability must be 1.")
        return cls.from_atoms(list(atoms) + cells, quantum=quantum)

    @cached_property
    def _cumulative(self) -> Tuple[Fraction, ...]:
        running, result = Fraction(0), []
        for _, mass in self.atoms:
            running += mass
            result.append(running)
        return tuple(result)

    @cached_property
    def _raw_thresholds(self) -> Tuple[int, ...]:
        # raw <= T_i  <=>  (raw + 1/2) / 2^64 <= cumulative_i
        return tuple(
            math.floor(c * RAW_SCALE - Fraction(1, 2)) for c in self._cumulative
        )

    @property
    def values(self) -> Tuple[Value, ...]:
        return tuple(value for value, _ in self.atoms)

    @property
    def mass_at_infinity(self) -> Fraction:
        value, mass = self.atoms[-1]
        return mass if is_infinite(value) else Fraction(0)

    @property
    def max_finite(self) -> Optional[Fraction]:
        finite = [value for value in self.values if not is_infinite(value)]
        return finite[-1] if finite else None

    def quantile(self, u) -> Value:
        u = as_fraction(u)
        if not 0 < u < 1:
            raise DomainError(f"Quantile level must lie in (0, 1), got {u}.")
        return self.atoms[bisect_left(self._cumulative, u)][0]

    def quantile_raw(self, raw: int) -> Value:
        return self.atoms[bisect_left(self._raw_thresholds, raw)][0]

    def cdf(self, t) -> Fraction:
        """P(X <= t)."""
        t = parse_value(t)
        return sum((mass for value, mass in self.atoms if value <= t), Fraction(0))

    def survival(self, t) -> Fraction:
        """G([t, +inf])."""
        t = parse_value(t)
        return sum((mass for value, mass in self.atoms if value >= t), Fraction(0))

    def survival_above(self, t) -> Fraction:
        """G(]t, +inf])."""
        return 1 - self.cdf(t)

    def mean(self) -> Value:
        return total(value * mass for value, mass in self.atoms)

    def truncate(self, K) -> Distribution:
        K = parse_value(K)
        if is_infinite(K) or K <= 0:
            raise DomainError(f"Truncation level must be positive and finite, got {K}.")
        if not _on_grid(K, self.quantum):
            raise DomainError(f"Truncation level {K} is not a multiple of 1/{self.quantum}.")
        atoms = [(value, mass) for value, mass in self.atoms if value < K]
        atoms.append((K, self.survival(K)))
        return Distribution.from_atoms(atoms, quantum=self.quantum)

    def shift(self, eps) -> Distribution:
        eps = parse_value(eps)
        if is_infinite(eps) or eps <= 0:
            raise DomainError(f"Shift must be positive and finite, got {eps}.")
        if not _on_grid(eps, self.quantum):
            raise DomainError(f"Shift {eps} is not representable at quantum {self.quantum}.")
        atoms = [
            (value if is_infinite(value) else value + eps, mass)
            for value, mass in self.atoms
        ]
        return Distribution(atoms=tuple(atoms), quantum=self.quantum)

    def literal(self) -> str:
        return ", ".join(f"{format_value(v)}:{m}" for v, m in self.atoms)


def quantile(dist: Distribution, u) -> Value:
    return dist.quantile(u)


def truncate(dist: Distribution, K) -> Distribution:
    return dist.truncate(K)


def shift(dist: Distribution, eps) -> Distribution:
    return dist.shift(eps)


def _finite_grid(*dists: Distribution) -> Tuple[Fraction, ...]:
    points = set()
    for dist in dists:
        points.update(v for v in dist.values if not is_infinite(v))
    return tuple(sorted(points))


def _from_cdf(points: Sequence[Fraction], cdf: Sequence[Fraction], quantum: int):
    atoms, previous = [], Fraction(0)
    for t, F in zip(points, cdf):
        atoms.append((t, F - previous))
        previous = F
    atoms.append((INF, 1 - previous))
    return Distribution.from_atoms(atoms, quantum=quantum)


def envelopes(d1: Distribution, d2: Distribution) -> Tuple[Distribution, Distribution]:
    """Lower law with survival min(G1, G2) and upper law with max(G1, G2)."""
    if d1.quantum != d2.quantum:
        raise DomainError(f"Quantum mismatch: {d1.quantum} vs {d2.quantum}.")
    points = _finite_grid(d1, d2)
    F1 = [d1.cdf(t) for t in points]
    F2 = [d2.cdf(t) for t in points]
    lower = _from_cdf(points, [max(a, b) for a, b in zip(F1, F2)], d1.quantum)
    upper = _from_cdf(points, [min(a, b) for a, b in zip(F1, F2)], d1.quantum)
    return lower, upper


def dominates(h: Distribution, g: Distribution) -> bool:
    """True iff g is stochastically dominated by h."""
    return all(g.cdf(t) >= h.cdf(t) for t in _finite_grid(g, h))


def heavy_tail(resolution: int = 4096, quantum: int = DEFAULT_QUANTUM) -> Distribution:
    # survival t^{-1/2} on [1, inf): quantile 1 / (1 - u)^2, infinite mean
    return Distribution.from_quantile_function(
        lambda u: 1 / (1 - u) ** 2, resolution=resolution, quantum=quantum
    )


PRESETS: Dict[str, Callable[..., Distribution]] = {"heavy_tail": heavy_tail}


def parse_distribution(
    literal: str,
    table: Optional[Sequence[Tuple]] = None,
    table_mass=None,
    quantum: int = DEFAULT_QUANTUM,
) -> Distribution:
    """Parse "0:1/4, 1:3/4, inf:0" style literals, or a preset name.

    When a quantile table is given it forms the continuous part, whose mass
    defaults to whatever the atoms leave over.
    """
    literal = literal.strip()
    if literal in PRESETS:
        return PRESETS[literal](quantum=quantum)
    atoms = []
    for chunk in filter(None, (c.strip() for c in literal.split(","))):
        try:
            value, mass = chunk.split(":")
        except ValueError:
            raise DomainError(f"Malformed atom '{chunk}', expected 'value:mass'.")
        atoms.append((parse_value(value.strip()), as_fraction(mass.strip())))
    if table is None:
        return Distribution.from_atoms(atoms, quantum=quantum)
    if table_mass is None:
        table_mass = 1 - sum((m for _, m in atoms), Fraction(0))
    return Distribution.from_table(table, mass=table_mass, atoms=atoms, quantum=quantum)


def _counter(edge: Edge) -> int:
    point, axis = edge
    counter = axis << (COORDINATE_BITS * len(point))
    half = 1 << (COORDINATE_BITS - 1)
    for i, c in enumerate(point):
        if not -half <= c < half:
            raise DomainError(f"Edge coordinate {c} outside the keyed range.")
        counter |= (c + half) << (COORDINATE_BITS * i)
    return counter


@lru_cache(maxsize=2**20)
def edge_uniform_raw(seed: int, edge: Edge) -> int:
    bit_generator = np.random.Philox(key=seed, counter=_counter(edge))
    return int(bit_generator.random_raw())


@dataclass(frozen=True)
class CapacityField:
    distribution: Distribution
    seed: int
    dimension: int
    offset: Optional[Point] = None

    def __post_init__(self):
        if not 2 <= self.dimension <= MAX_KEYED_DIMENSION:
            raise DomainError(
                f"Dimension must lie in [2, {MAX_KEYED_DIMENSION}], got {self.dimension}."
            )
        if not 0 <= self.seed < 2**64:
            raise DomainError(f"Seed must be a 64-bit unsigned integer, got {self.seed}.")
        if self.offset is not None and len(self.offset) != self.dimension:
            raise DomainError("Offset dimension does not match the field.")

    def _key(self, edge: Edge) -> Edge:
        point, axis = edge
        if len(point) != self.dimension or not 0 <= axis < self.dimension:
            raise DomainError(f"Edge {edge} is not a canonical edge in dimension {self.dimension}.")
        if self.offset is None:
            return (tuple(point), axis)
        return (tuple(c + o for c, o in zip(point, self.offset)), axis)

    def uniform_raw(self, edge: Edge) -> int:
        return edge_uniform_raw(self.seed, self._key(edge))

    def uniform(self, edge: Edge) -> Fraction:
        return Fraction(2 * self.uniform_raw(edge) + 1, 2 * RAW_SCALE)

    def capacity(self, edge: Edge) -> Value:
        return self.distribution.quantile_raw(self.uniform_raw(edge))

    def with_distribution(self, distribution: Distribution) -> CapacityField:
        return CapacityField(distribution, self.seed, self.dimension, self.offset)

    def translated(self, offset: Sequence[int]) -> CapacityField:
        base = self.offset or (0,) * self.dimension
        shifted = tuple(a + int(b) for a, b in zip(base, offset))
        return CapacityField(self.distribution, self.seed, self.dimension, shifted)


@dataclass(frozen=True, eq=False)
class PinnedField:
    """Explicit capacities on chosen edges over a fallback field or constant."""

    dimension: int
    pins: Mapping[Edge, Value] = field(default_factory=dict)
    fallback: Optional[Union[CapacityField, PinnedField]] = None
    default: Value = Fraction(0)

    def __post_init__(self):
        pins = {(tuple(p), a): parse_value(v) for (p, a), v in self.pins.items()}
        object.__setattr__(self, "pins", pins)
        object.__setattr__(self, "default", parse_value(self.default))

    def capacity(self, edge: Edge) -> Value:
        try:
            return self.pins[edge]
        except KeyError:
            pass
        if self.fallback is not None:
            return self.fallback.capacity(edge)
        return self.default


Field = Union[CapacityField, PinnedField]
