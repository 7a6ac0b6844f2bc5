from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

from fpp_flows.common import (
    DEFAULT_CLUSTER_BUDGET,
    DEFAULT_QUANTUM,
    ConfigError,
    DomainError,
    check_experiment,
    p_c_for,
)
from fpp_flows.distributions import Distribution, Value, parse_distribution, parse_value
from fpp_flows.lattice import Direction
from fpp_flows.utils.fileio import load_yaml, read_table

MAX_REPLICATES = 64
MIN_REPLICATES = 16


def default_height(p: int) -> int:
    """ceil(sqrt(p))."""
    return math.isqrt(p - 1) + 1 if p > 0 else 0


def default_replicates(schedule: List[int]) -> List[int]:
    if len(schedule) == 1:
        return [MAX_REPLICATES]
    span = MAX_REPLICATES - MIN_REPLICATES
    last = len(schedule) - 1
    return [round(MAX_REPLICATES - span * i / last) for i in range(len(schedule))]


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "estimate_nu"
    dimension: int = 2
    p_c: Optional[str] = None
    seed: int = 0
    workers: int = 1
    distribution: str = "1:1"
    table: Optional[str] = None
    table_mass: Optional[str] = None
    distribution_F: Optional[str] = None
    quantum: int = DEFAULT_QUANTUM
    directions: List[List[int]] = field(default_factory=list)
    schedule: List[int] = field(default_factory=lambda: [4, 8, 16, 32])
    heights: Optional[List[int]] = None
    replicates: Optional[List[int]] = None
    truncations: List[str] = field(default_factory=lambda: ["1", "2", "4"])
    shifts: List[int] = field(default_factory=lambda: [2, 4, 8, 16])
    K: str = "2"
    K0: str = "1"
    L: int = 4
    tiles: List[int] = field(default_factory=lambda: [2])
    anchors: Optional[List[List[int]]] = None
    budget: int = DEFAULT_CLUSTER_BUDGET
    verbose: bool = False

    def __post_init__(self):
        try:
            check_experiment(self.experiment)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.dimension < 2:
            raise ConfigError(f"Dimension must be at least 2, got {self.dimension}.")
        if self.workers < 1:
            raise ConfigError(f"Workers must be positive, got {self.workers}.")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"Seed must be an unsigned 64-bit integer, got {self.seed}.")
        if not self.schedule or any(p < 1 for p in self.schedule):
            raise ConfigError("Schedule must be a nonempty list of positive scales.")
        if list(self.schedule) != sorted(set(self.schedule)):
            raise ConfigError("Schedule must be strictly increasing.")
        if self.heights is not None and len(self.heights) != len(self.schedule):
            raise ConfigError("Heights need one entry per scale.")
        if self.replicates is not None:
            if len(self.replicates) != len(self.schedule):
                raise ConfigError("Replicates need one entry per scale.")
            if any(n < 2 for n in self.replicates):
                raise ConfigError("At least two replicates per scale are required.")
        if self.L < 2 or self.L % 2:
            raise ConfigError(f"Box side L must be an even integer >= 2, got {self.L}.")
        for vector in self.directions:
            if len(vector) != self.dimension:
                raise ConfigError(f"Direction {vector} does not live in dimension {self.dimension}.")

    @classmethod
    def from_dict(cls, data: Dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}.")
        data = {k: str(v) if k in ("p_c", "K", "K0", "table_mass") and v is not None else v
                for k, v in data.items()}
        for key in ("distribution", "distribution_F"):
            if data.get(key) is not None and not isinstance(data[key], str):
                raise ConfigError(f"{key} must be a quoted string literal, got {data[key]!r}.")
        if "truncations" in data:
            data["truncations"] = [str(k) for k in data["truncations"]]
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"Malformed config: {e}") from e

    @classmethod
    def load(cls, path: str) -> ExperimentConfig:
        return cls.from_dict(load_yaml(path))

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def replace(self, **overrides) -> ExperimentConfig:
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **overrides)

    def _parse(self, literal: str) -> Distribution:
        table = read_table(self.table) if self.table else None
        try:
            return parse_distribution(literal, table, self.table_mass, self.quantum)
        except DomainError as e:
            raise ConfigError(f"Bad distribution '{literal}': {e}") from e

    def law(self) -> Distribution:
        return self._parse(self.distribution)

    def law_F(self) -> Distribution:
        return self._parse(self.distribution_F) if self.distribution_F else self.law()

    def critical(self) -> Fraction:
        try:
            return p_c_for(self.dimension, self.p_c)
        except DomainError as e:
            raise ConfigError(str(e)) from e

    def direction_list(self) -> List[Direction]:
        vectors = self.directions or [[1 if k == self.dimension - 1 else 0 for k in range(self.dimension)]]
        try:
            return [Direction.of(v) for v in vectors]
        except DomainError as e:
            raise ConfigError(str(e)) from e

    def height_for(self, p: int) -> int:
        if self.heights is None:
            return default_height(p)
        return int(self.heights[self.schedule.index(p)])

    def replicates_for(self, p: int) -> int:
        counts = self.replicates or default_replicates(list(self.schedule))
        return int(counts[self.schedule.index(p)])

    def level(self, name: str) -> Value:
        try:
            return parse_value(getattr(self, name))
        except DomainError as e:
            raise ConfigError(f"Bad level {name}: {e}") from e

    def truncation_levels(self) -> List[Value]:
        levels = [parse_value(k) for k in self.truncations]
        if levels != sorted(levels) or len(set(levels)) != len(levels):
            raise ConfigError("Truncation levels must be strictly increasing.")
        return levels
