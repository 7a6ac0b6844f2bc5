from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from multiprocessing import Pool
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm
from tqdm import tqdm

from fpp_flows.common import (
    EVENT_RATE_FLOOR,
    INFINITE_SAMPLE_LIMIT,
    NULL_CEILING,
    POSITIVE_FLOOR,
    STATISTICAL_SLACK,
    CapacityOverflowError,
    ClusterBudgetError,
    ConfigError,
    CylinderKinds,
    DomainError,
    ExperimentAbortedError,
    Experiments,
    Functionals,
    HypothesisError,
    Terminals,
    as_fraction,
    get_logger,
    p_c_for,
)
from fpp_flows.config import ExperimentConfig, default_height
from fpp_flows.distributions import (
    CapacityField,
    Distribution,
    Value,
    dominates,
    envelopes,
    format_value,
    is_infinite,
    parse_value,
    shift,
)
from fpp_flows.flows import (
    animal,
    annulus_decomposition,
    cutset_surgery,
    phi,
    solve,
    subadditive_split,
    tilde_phi,
    zero_cutset,
)
from fpp_flows.lattice import CylinderSpec, Direction, Hyperrect, build_problem
from fpp_flows.maxflow import efficient, is_cutset
from fpp_flows.percolation import (
    check_subcritical_level,
    domination_rows,
    domination_sample,
    event_E,
    event_E_prime,
)
from fpp_flows.utils.fileio import write_csv, write_jsonl, write_manifest

logger = get_logger(__name__)

Z_975 = float(norm.ppf(0.975))
MILD_TOLERANCE = 1e-9
EDGE_SAMPLE = 10**4
EDGE_BOX = 1000
SERIES_FIELDS = ["p", "mean", "stddev", "n", "halfwidth", "infiniteCount", "normalization"]


@dataclass
class Welford:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def var(self) -> float:
        if self.n < 2:
            return 0.0
        return self.m2 / (self.n - 1)


def halfwidth(stddev: float, n: int) -> float:
    if n < 2:
        return math.inf
    return Z_975 * stddev / math.sqrt(n)


def combined(*halfwidths: float) -> float:
    return math.sqrt(sum(hw * hw for hw in halfwidths))


@dataclass(frozen=True)
class SeriesRow:
    p: int
    mean: float
    stddev: float
    n: int
    halfwidth: float
    infinite_count: int
    normalization: float

    def as_dict(self) -> Dict:
        return {
            "p": self.p,
            "mean": self.mean,
            "stddev": self.stddev,
            "n": self.n,
            "halfwidth": self.halfwidth,
            "infiniteCount": self.infinite_count,
            "normalization": self.normalization,
        }


@dataclass
class EstimateSeries:
    functional: str
    label: str
    rows: List[SeriesRow] = field(default_factory=list)

    @property
    def schedule(self) -> List[int]:
        return [row.p for row in self.rows]

    @property
    def means(self) -> List[float]:
        return [row.mean for row in self.rows]

    def row(self, p: int) -> SeriesRow:
        for row in self.rows:
            if row.p == p:
                return row
        raise KeyError(p)

    def add(self, p: int, values: Sequence[Value], normalization: float) -> SeriesRow:
        """Aggregate one scale; infinite samples are counted and left out of the mean."""
        infinite = sum(1 for v in values if is_infinite(v))
        if infinite:
            logger.warning(
                "%s %s p=%d: %d of %d samples infinite, excluded",
                self.functional, self.label, p, infinite, len(values),
            )
        if infinite > INFINITE_SAMPLE_LIMIT * len(values):
            raise ExperimentAbortedError(
                f"{self.functional} {self.label} p={p}: {infinite} of {len(values)} samples are infinite."
            )
        stats = Welford()
        for v in values:
            if not is_infinite(v):
                stats.push(float(v) / normalization)
        stddev = math.sqrt(stats.var)
        row = SeriesRow(
            p, stats.mean, stddev, stats.n, halfwidth(stddev, stats.n), infinite, normalization
        )
        self.rows.append(row)
        return row


def check_mild(schedule: Sequence[int], heights: Sequence[float]) -> None:
    """h(p)/log p nondecreasing and h(p)/p nonincreasing along the schedule."""
    pairs = [(p, h) for p, h in zip(schedule, heights) if p >= 2]
    for (p1, h1), (p2, h2) in zip(pairs, pairs[1:]):
        log_ratio1, log_ratio2 = h1 / math.log(p1), h2 / math.log(p2)
        if log_ratio2 < log_ratio1 * (1 - MILD_TOLERANCE):
            raise DomainError(f"Height schedule is not mild: h/log p drops between p={p1} and p={p2}.")
        if h2 / p2 > h1 / p1 * (1 + MILD_TOLERANCE):
            raise DomainError(f"Height schedule is not mild: h/p grows between p={p1} and p={p2}.")


def check_infinity_mass(distribution: Distribution, dimension: int, p_c=None) -> None:
    threshold = p_c_for(dimension, p_c)
    if distribution.mass_at_infinity >= threshold:
        raise HypothesisError(
            f"G({{inf}}) = {distribution.mass_at_infinity} is not below p_c = {threshold}."
        )


def direction_label(direction: Direction) -> str:
    return "(" + ",".join(map(str, direction.w)) + ")"


def phi_value(distribution: Distribution, direction: Direction, p: int, h, seed: int):
    A = Hyperrect.canonical(direction, p)
    field_G = CapacityField(distribution, seed, direction.dimension)
    return phi(A, h, field_G), A.area


def estimate_nu(
    distribution: Distribution,
    direction: Direction,
    schedule: Sequence[int],
    heights: Optional[Sequence[int]] = None,
    replicates: Optional[Sequence[int]] = None,
    seed_base: int = 0,
    p_c=None,
    verbose: bool = False,
) -> EstimateSeries:
    """Rescaled maximal flows phi(pA, h(p)) / area(pA) per scale over seeds seed_base + r."""
    heights = list(heights) if heights is not None else [default_height(p) for p in schedule]
    replicates = list(replicates) if replicates is not None else [16] * len(schedule)
    check_mild(schedule, heights)
    check_infinity_mass(distribution, direction.dimension, p_c)
    series = EstimateSeries(Functionals.phi.value, direction_label(direction))
    for p, h, n in zip(schedule, heights, replicates):
        if n < 2:
            raise DomainError("At least two replicates per scale are required.")
        values, area = [], Hyperrect.canonical(direction, p).area
        for r in tqdm(range(n), desc=f"phi p={p}", disable=not verbose):
            values.append(phi_value(distribution, direction, p, h, seed_base + r)[0].value)
        series.add(p, values, area)
    return series


def decreasing(series: EstimateSeries) -> bool:
    """Each mean drops below the previous one; means already at zero may stay there."""
    return all(
        b.mean < a.mean or a.mean == b.mean == 0 for a, b in zip(series.rows, series.rows[1:])
    )


def _capacity_unit(distribution: Distribution) -> Fraction:
    positive = [v for v in distribution.values if not is_infinite(v) and v > 0]
    return positive[0] if positive else Fraction(0)


def positivity_check(series: EstimateSeries, distribution: Distribution, p_c) -> Optional[str]:
    """Side with nu > 0 when G({0}) < 1 - p_c, otherwise means falling toward zero.

    Returns a failure message, or None when the series agrees.
    """
    unit = _capacity_unit(distribution)
    final = series.rows[-1]
    if distribution.cdf(0) < 1 - as_fraction(p_c):
        floor = float(POSITIVE_FLOOR * unit)
        if not final.mean > floor:
            return f"{series.label}: mean {final.mean:.4g} at p={final.p} is not above {floor:.4g}"
        return None
    if not decreasing(series):
        return f"{series.label}: means {series.means} do not decrease although G({{0}}) >= 1 - p_c"
    ceiling = float(NULL_CEILING * unit)
    if unit > 0 and final.mean >= ceiling:
        return f"{series.label}: mean {final.mean:.4g} at p={final.p} is not below {ceiling:.4g}"
    return None


def point_mass_check(
    series: EstimateSeries, distribution: Distribution, direction: Direction
) -> Optional[str]:
    """Point mass c: the gap to c shrinks; axis cylinders give exactly c((p+1)/p)^(d-1)."""
    if len(distribution.atoms) != 1 or is_infinite(distribution.values[0]):
        return None
    c = float(distribution.values[0])
    gaps = [abs(row.mean - c) for row in series.rows]
    if any(b > a for a, b in zip(gaps, gaps[1:])):
        return f"{series.label}: estimates {series.means} do not approach {c}"
    if direction.is_axis:
        for row in series.rows:
            exact = c * ((row.p + 1) / row.p) ** (direction.dimension - 1)
            if not math.isclose(row.mean, exact) and abs(row.mean - exact) > 2 * row.halfwidth:
                return f"{series.label}: mean {row.mean} at p={row.p} is not {exact}"
    return None


@dataclass
class LadderReport:
    levels: List[Value]
    rungs: List[SeriesRow]
    untruncated: SeriesRow
    monotone_violations: int

    @property
    def plateau_gap(self) -> float:
        return abs(self.rungs[-1].mean - self.rungs[-2].mean) if len(self.rungs) > 1 else 0.0

    @property
    def plateau_halfwidth(self) -> float:
        if len(self.rungs) < 2:
            return 0.0
        return combined(self.rungs[-1].halfwidth, self.rungs[-2].halfwidth)


def ladder_values(
    distribution: Distribution, levels: Sequence[Value], direction: Direction, p: int, h, seed: int
) -> Tuple[List[Value], Value, float]:
    A = Hyperrect.canonical(direction, p)
    field_G = CapacityField(distribution, seed, direction.dimension)
    rungs = [phi(A, h, field_G.with_distribution(distribution.truncate(K))).value for K in levels]
    return rungs, phi(A, h, field_G).value, A.area


def chain_holds(values: Sequence[Value]) -> bool:
    return all(a <= b for a, b in zip(values, values[1:]))


def truncation_ladder(
    distribution: Distribution,
    levels: Sequence[Value],
    direction: Direction,
    p: int,
    replicates: int,
    seed_base: int = 0,
    h=None,
    verbose: bool = False,
) -> LadderReport:
    levels = [parse_value(K) for K in levels]
    if levels != sorted(levels):
        raise DomainError("Truncation levels must be increasing.")
    h = default_height(p) if h is None else h
    columns: List[List[Value]] = [[] for _ in levels]
    full, violations, area = [], 0, 1.0
    for r in tqdm(range(replicates), desc="Ladder", disable=not verbose):
        rungs, value, area = ladder_values(distribution, levels, direction, p, h, seed_base + r)
        for column, v in zip(columns, rungs):
            column.append(v)
        full.append(value)
        violations += not chain_holds(rungs + [value])
    rows = [
        EstimateSeries(Functionals.phi.value, f"K={format_value(K)}").add(p, column, area)
        for K, column in zip(levels, columns)
    ]
    untruncated = EstimateSeries(Functionals.phi.value, "untruncated").add(p, full, area)
    return LadderReport(levels, rows, untruncated, violations)


def edge_convergence(
    distribution: Distribution,
    shifts: Sequence[int],
    seed: int,
    dimension: int,
    count: int = EDGE_SAMPLE,
) -> int:
    """Edges whose coupled capacities t_{shift(G, 1/n)} - t_G fail to decrease along n."""
    rng = np.random.default_rng(seed)
    points = rng.integers(-EDGE_BOX, EDGE_BOX + 1, size=(count, dimension))
    axes = rng.integers(0, dimension, size=count)
    field_G = CapacityField(distribution, seed, dimension)
    fields = [field_G.with_distribution(shift(distribution, Fraction(1, n))) for n in sorted(shifts)]
    failures = 0
    for point, axis in zip(points, axes):
        edge = (tuple(int(c) for c in point), int(axis))
        base = field_G.capacity(edge)
        if is_infinite(base):
            continue
        gaps = [f.capacity(edge) - base for f in fields]
        failures += not all(a >= b >= 0 for a, b in zip(gaps, gaps[1:] + [0]))
    return failures


@dataclass
class ContinuityReport:
    limit: SeriesRow
    approximations: Dict[int, SeriesRow]
    coupling_violations: int
    envelope_violations: int
    edge_failures: int

    @property
    def differences(self) -> Dict[int, float]:
        return {n: abs(row.mean - self.limit.mean) for n, row in self.approximations.items()}

    def gap_within_slack(self, n: int) -> bool:
        hw = combined(self.approximations[n].halfwidth, self.limit.halfwidth)
        return self.differences[n] <= STATISTICAL_SLACK * hw

    @property
    def differences_decrease(self) -> bool:
        ordered = [self.differences[n] for n in sorted(self.approximations)]
        return chain_holds(ordered[::-1])


def continuity_values(
    approximations: Dict[int, Distribution],
    limit: Distribution,
    direction: Direction,
    p: int,
    h,
    seed: int,
) -> Tuple[Value, Dict[int, Tuple[Value, Value, Value]], float]:
    """phi under G, and per n the triple (phi under G_n, lower envelope, upper envelope)."""
    A = Hyperrect.canonical(direction, p)
    field_G = CapacityField(limit, seed, direction.dimension)
    base = phi(A, h, field_G).value
    values = {}
    for n, law in sorted(approximations.items()):
        lower, upper = envelopes(law, limit)
        values[n] = tuple(
            phi(A, h, field_G.with_distribution(d)).value for d in (law, lower, upper)
        )
    return base, values, A.area


def continuity_experiment(
    approximations: Dict[int, Distribution],
    limit: Distribution,
    direction: Direction,
    p: int,
    replicates: int,
    seed_base: int = 0,
    h=None,
    verbose: bool = False,
) -> ContinuityReport:
    h = default_height(p) if h is None else h
    base_values: List[Value] = []
    columns: Dict[int, List[Value]] = {n: [] for n in approximations}
    coupling = envelope = 0
    area = 1.0
    for r in tqdm(range(replicates), desc="Continuity", disable=not verbose):
        base, values, area = continuity_values(approximations, limit, direction, p, h, seed_base + r)
        base_values.append(base)
        for n, (approx, lower, upper) in values.items():
            columns[n].append(approx)
            if dominates(approximations[n], limit):
                coupling += approx < base
            envelope += not (lower <= min(approx, base) and upper >= max(approx, base))
    limit_row = EstimateSeries(Functionals.phi.value, "G").add(p, base_values, area)
    rows = {
        n: EstimateSeries(Functionals.phi.value, f"n={n}").add(p, column, area)
        for n, column in sorted(columns.items())
    }
    edge_failures = 0
    if all(approximations[n] == shift(limit, Fraction(1, n)) for n in approximations):
        edge_failures = edge_convergence(limit, sorted(approximations), seed_base, direction.dimension)
    return ContinuityReport(limit_row, rows, coupling, envelope, edge_failures)


def tilde_values(
    law_G: Distribution, law_F: Distribution, K0: Value, direction: Direction, p: int, seed: int, budget: int
):
    A = Hyperrect.canonical(direction, p)
    field_G = CapacityField(law_G, seed, direction.dimension)
    field_F = CapacityField(law_F, seed, direction.dimension)
    sample = tilde_phi(A, field_G, field_F, K0, budget=budget)
    reference = None
    if sample.height_was_threshold:
        # on the threshold event every slab cutset also cuts cyl(A) at that level
        spec = CylinderSpec(A, sample.level, CylinderKinds.symmetric.value)
        reference = solve(spec, Terminals.top_bottom.value, field_G).value
    return sample, reference, A.area


def estimate_nu_tilde(
    law_G: Distribution,
    law_F: Distribution,
    K0: Value,
    direction: Direction,
    schedule: Sequence[int],
    replicates: Sequence[int],
    seed_base: int = 0,
    p_c=None,
    budget: int = 10**6,
    verbose: bool = False,
) -> EstimateSeries:
    if not dominates(law_F, law_G):
        raise HypothesisError("F must stochastically dominate G.")
    check_subcritical_level(law_F, K0, direction.dimension, p_c)
    series = EstimateSeries(Functionals.tilde_phi.value, direction_label(direction))
    for p, n in zip(schedule, replicates):
        values, area = [], 1.0
        for r in tqdm(range(n), desc=f"tilde_phi p={p}", disable=not verbose):
            sample, _, area = tilde_values(law_G, law_F, K0, direction, p, seed_base + r, budget)
            values.append(sample.flow_value)
        series.add(p, values, area)
    return series


def triangle_weights(directions: Sequence[Direction]) -> List[float]:
    """Side lengths of a triangle whose sides are normal to the three directions."""
    if len(directions) != 3:
        raise DomainError("A triangle needs exactly three directions.")
    M = np.array([d.unit for d in directions], dtype=float).T
    for i in range(3):
        for j in range(i + 1, 3):
            if np.linalg.matrix_rank(M[:, [i, j]], tol=1e-9) < 2:
                raise DomainError("Triangle directions must be pairwise non-parallel.")
    if np.linalg.matrix_rank(M, tol=1e-9) != 2:
        raise DomainError("Triangle directions must span a plane.")
    null = np.linalg.svd(M)[2][-1]
    return [float(abs(c)) for c in null / np.abs(null).max()]


def homogeneous(nu: float, vector: Sequence[float]) -> float:
    """nu extended homogeneously: |x| * nu(x / |x|)."""
    return math.sqrt(sum(c * c for c in vector)) * nu


@dataclass
class ConvexityReport:
    estimates: Dict[Direction, SeriesRow]
    weights: List[float]
    triangle: List[Tuple[float, float, float, bool]]
    lipschitz: List[Tuple[str, str, float, float, float, bool]]

    @property
    def passed(self) -> bool:
        return all(row[-1] for row in self.triangle) and all(row[-1] for row in self.lipschitz)


def convexity_from_rows(triangle: Sequence[Direction], rows: Dict[Direction, SeriesRow]) -> ConvexityReport:
    weights = triangle_weights(triangle)
    checks = []
    for i in range(3):
        others = [j for j in range(3) if j != i]
        lhs = weights[i] * rows[triangle[i]].mean
        rhs = sum(weights[j] * rows[triangle[j]].mean for j in others)
        hw = combined(*(weights[j] * rows[triangle[j]].halfwidth for j in range(3)))
        checks.append((lhs, rhs, STATISTICAL_SLACK * hw, lhs <= rhs + STATISTICAL_SLACK * hw))

    axis = Direction.axis(triangle[0].dimension, 0)
    lipschitz = []
    ordered = list(rows)
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            u, v = ordered[a], ordered[b]
            distance = sum(abs(x - y) for x, y in zip(u.unit, v.unit))
            gap = abs(rows[u].mean - rows[v].mean)
            bound = distance * rows[axis].mean
            slack = STATISTICAL_SLACK * combined(
                rows[u].halfwidth, rows[v].halfwidth, distance * rows[axis].halfwidth
            )
            lipschitz.append(
                (direction_label(u), direction_label(v), gap, bound, slack, gap <= bound + slack)
            )
    return ConvexityReport(rows, weights, checks, lipschitz)


def convexity_check(
    distribution: Distribution,
    triangle: Sequence[Direction],
    p: int,
    replicates: int,
    seed_base: int = 0,
    h=None,
    verbose: bool = False,
) -> ConvexityReport:
    """Weak triangle inequality and l1-Lipschitz bound on estimated flow constants."""
    triangle_weights(triangle)
    h = default_height(p) if h is None else h
    directions = list(dict.fromkeys(list(triangle) + [Direction.axis(triangle[0].dimension, 0)]))
    rows = {}
    for direction in tqdm(directions, desc="Convexity", disable=not verbose):
        rows[direction] = estimate_nu(
            distribution, direction, [p], [h], [replicates], seed_base
        ).row(p)
    return convexity_from_rows(triangle, rows)


# Runner: one task per (scale, replicate), records aggregated in task order.


def sample_record(
    config: ExperimentConfig,
    functional: str,
    label: str,
    p: int,
    replicate: int,
    value: Value,
    normalization: float = 1.0,
    cardinality: Optional[int] = None,
    events: Optional[Dict] = None,
) -> Dict:
    return {
        "experiment": config.experiment,
        "functional": functional,
        "label": label,
        "p": p,
        "replicate": replicate,
        "seed": config.seed + replicate,
        "value": format_value(value),
        "rescaled": None if is_infinite(value) else float(value) / normalization,
        "normalization": normalization,
        "cardinality": cardinality,
        "events": events or {},
    }


def _estimate_nu_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law, h, seed = config.law(), config.height_for(p), config.seed + r
    records = []
    for direction in config.direction_list():
        result, area = phi_value(law, direction, p, h, seed)
        records.append(
            sample_record(
                config, Functionals.phi.value, direction_label(direction), p, r, result.value, area, result.cardinality
            )
        )
    return records


def _ladder_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law, levels = config.law(), config.truncation_levels()
    direction = config.direction_list()[0]
    rungs, value, area = ladder_values(law, levels, direction, p, config.height_for(p), config.seed + r)
    monotone = chain_holds(rungs + [value])
    records = [
        sample_record(config, Functionals.phi.value, f"K={format_value(K)}", p, r, v, area, events={"monotone": monotone})
        for K, v in zip(levels, rungs)
    ]
    records.append(sample_record(config, Functionals.phi.value, "untruncated", p, r, value, area, events={"monotone": monotone}))
    return records


def _shift_laws(config: ExperimentConfig) -> Dict[int, Distribution]:
    law = config.law()
    return {n: shift(law, Fraction(1, n)) for n in config.shifts}


def _continuity_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law, laws = config.law(), _shift_laws(config)
    direction = config.direction_list()[0]
    base, values, area = continuity_values(laws, law, direction, p, config.height_for(p), config.seed + r)
    records = [sample_record(config, Functionals.phi.value, "G", p, r, base, area)]
    for n, (approx, lower, upper) in values.items():
        events = {
            "coupled": approx >= base,
            "sandwich": lower <= min(approx, base) and upper >= max(approx, base),
            "lower": format_value(lower),
            "upper": format_value(upper),
        }
        records.append(sample_record(config, Functionals.phi.value, f"n={n}", p, r, approx, area, events=events))
    return records


def _nu_tilde_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law_G, law_F, K0 = config.law(), config.law_F(), config.level("K0")
    records = []
    for direction in config.direction_list():
        label = direction_label(direction)
        sample, reference, area = tilde_values(law_G, law_F, K0, direction, p, config.seed + r, config.budget)
        events = {
            "heightLevel": sample.level,
            "heightWasThreshold": sample.height_was_threshold,
            "dominatesCylinder": None if reference is None else reference <= sample.flow_value,
        }
        records.append(
            sample_record(
                config, Functionals.tilde_phi.value, label, p, r, sample.flow_value, area, sample.cut.cardinality, events
            )
        )
        result, _ = phi_value(law_G, direction, p, config.height_for(p), config.seed + r)
        records.append(sample_record(config, Functionals.phi.value, label, p, r, result.value, area, result.cardinality))
    return records


def _triangle(config: ExperimentConfig) -> List[Direction]:
    directions = config.direction_list()
    if len(directions) != 3:
        raise ConfigError("Convexity needs exactly three directions.")
    return directions


def _convexity_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law = config.law()
    triangle = _triangle(config)
    directions = list(dict.fromkeys(triangle + [Direction.axis(config.dimension, 0)]))
    records = []
    for direction in directions:
        result, area = phi_value(law, direction, p, config.height_for(p), config.seed + r)
        records.append(
            sample_record(config, Functionals.phi.value, direction_label(direction), p, r, result.value, area, result.cardinality)
        )
    return records


def _domination_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    anchors = _anchors(config)
    sum_y, sum_x, hits = domination_sample(
        config.law(), config.level("K"), anchors, config.seed + r, config.budget
    )
    events = {"budgetHits": hits}
    return [
        sample_record(config, "cluster_sum", "Y", p, r, sum_y, events=events),
        sample_record(config, "cluster_sum", "X", p, r, sum_x, events=events),
    ]


def _anchors(config: ExperimentConfig) -> List[Tuple[int, ...]]:
    if config.anchors:
        return [tuple(x) for x in config.anchors]
    return [(i,) + (0,) * (config.dimension - 1) for i in range(10)]


def _tiles(config: ExperimentConfig, B: Hyperrect) -> List[Hyperrect]:
    counts = list(config.tiles)
    if len(counts) == 1:
        counts = counts * (config.dimension - 1)
    try:
        return B.split(counts)
    except DomainError as e:
        raise ConfigError(str(e)) from e


def _subadditivity_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law_G, law_F, K0 = config.law(), config.law_F(), config.level("K0")
    seed, d = config.seed + r, config.dimension
    records = []
    for direction in config.direction_list():
        B = Hyperrect.canonical(direction, p)
        report = subadditive_split(
            B,
            _tiles(config, B),
            CapacityField(law_G, seed, d),
            CapacityField(law_F, seed, d),
            K0,
            budget=config.budget,
        )
        events = {"rhs": format_value(report.rhs), "holds": report.holds}
        records.append(
            sample_record(config, Functionals.tilde_phi.value, direction_label(direction), p, r, report.lhs, B.area, events=events)
        )
    return records


def _surgery_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law, K, K0 = config.law(), config.level("K"), config.level("K0")
    h, seed = config.height_for(p), config.seed + r
    records = []
    for direction in config.direction_list():
        A = Hyperrect.canonical(direction, p)
        spec = CylinderSpec.from_height(A, h, CylinderKinds.symmetric.value)
        problem = build_problem(spec, Terminals.top_bottom.value)
        field_G = CapacityField(law, seed, config.dimension)
        truncated = solve(spec, Terminals.top_bottom.value, field_G.with_distribution(law.truncate(K)))
        surgery = cutset_surgery(truncated.cutset, problem, field_G, K, K0, config.budget)
        added = surgery.edges - truncated.cutset
        events = {
            "event": event_E_prime(field_G, K0, problem.edges, h),
            "isCutset": is_cutset(surgery.edges, problem),
            "boundHolds": surgery.capacity <= surgery.bound,
            "addedBelowK0": all(field_G.capacity(e) <= K0 for e in added),
            "heavy": len(surgery.heavy),
            "budgetExceeded": surgery.budget_exceeded,
        }
        records.append(
            sample_record(
                config, Functionals.phi.value, direction_label(direction), p, r, surgery.capacity, A.area, len(surgery.edges), events
            )
        )
    return records


def _zero_regime_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law, K0 = config.law(), config.level("K0")
    level, seed = config.height_for(p), config.seed + r
    records = []
    for direction in config.direction_list():
        A = Hyperrect.canonical(direction, p)
        field_G = CapacityField(law, seed, config.dimension)
        result = zero_cutset(A, level, field_G, K0, config.budget)
        bottom = [x for x in result.problem.vertices if A.level(x) == 0]
        events = {
            "event": event_E(field_G, K0, bottom, level),
            "isCutset": is_cutset(result.edges, result.problem),
            "boundHolds": result.capacity <= result.bound,
            "crossings": result.crossings,
            "budgetExceeded": result.budget_exceeded,
        }
        records.append(
            sample_record(
                config, Functionals.phi.value, direction_label(direction), p, r, result.capacity, A.area, len(result.edges), events
            )
        )
    return records


def _annulus_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law, h, seed = config.law(), config.height_for(p), config.seed + r
    records = []
    for direction in config.direction_list():
        A = Hyperrect.canonical(direction, p)
        report = annulus_decomposition(A, h, config.L, CapacityField(law, seed, config.dimension))
        events = {"rhs": format_value(report.rhs), "holds": report.holds, "boxes": len(report.indices)}
        records.append(
            sample_record(config, Functionals.phi.value, direction_label(direction), p, r, report.lhs, A.area, events=events)
        )
    return records


def _animal_task(config: ExperimentConfig, p: int, r: int) -> List[Dict]:
    law, h, seed = config.law(), config.height_for(p), config.seed + r
    records = []
    for direction in config.direction_list():
        A = Hyperrect.canonical(direction, p)
        spec = CylinderSpec.from_height(A, h, CylinderKinds.symmetric.value)
        problem = build_problem(spec, Terminals.top_bottom.value)
        result = solve(spec, Terminals.top_bottom.value, CapacityField(law, seed, config.dimension))
        events: Dict = {"efficient": None, "connected": None, "ratio": None, "boxes": 0}
        if not result.is_infinite and result.cutset:
            coarse = animal(result.cutset, config.L)
            events = {
                "efficient": efficient(result.cutset, problem),
                "connected": coarse.is_connected(),
                "ratio": coarse.ratio,
                "boxes": coarse.size,
            }
        records.append(
            sample_record(
                config, Functionals.phi.value, direction_label(direction), p, r, result.value, A.area, result.cardinality, events
            )
        )
    return records


@dataclass
class ExperimentReport:
    experiment: str
    series: List[EstimateSeries] = field(default_factory=list)
    violations: List[Tuple[Dict, str]] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)
    tables: Dict[str, Tuple[List[str], List[Dict]]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations and not self.failures


def _group(records: Iterable[Dict]) -> Dict[Tuple[str, str], Dict[int, List[Dict]]]:
    groups: Dict[Tuple[str, str], Dict[int, List[Dict]]] = {}
    for record in records:
        key = (record["functional"], record["label"])
        groups.setdefault(key, {}).setdefault(record["p"], []).append(record)
    return groups


def series_from_records(records: Sequence[Dict]) -> List[EstimateSeries]:
    result = []
    for (functional, label), by_p in _group(records).items():
        series = EstimateSeries(functional, label)
        for p, group in sorted(by_p.items()):
            series.add(p, [parse_value(g["value"]) for g in group], group[0]["normalization"])
        result.append(series)
    return result


def _flag(report: ExperimentReport, records: Sequence[Dict], key: str, message: str) -> None:
    for record in records:
        if record["events"].get(key) is False:
            report.violations.append((record, message))


def _aggregate_estimate_nu(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment, series_from_records(records))
    law, threshold = config.law(), config.critical()
    by_label = {s.label: s for s in report.series}
    for direction in config.direction_list():
        series = by_label[direction_label(direction)]
        for message in (
            positivity_check(series, law, threshold),
            point_mass_check(series, law, direction),
        ):
            if message:
                report.failures.append(message)
    return report


def _aggregate_ladder(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment, series_from_records(records))
    _flag(report, [r for r in records if r["label"] == "untruncated"], "monotone", "truncation chain broken")
    levels = config.truncation_levels()
    if len(levels) >= 2:
        by_label = {s.label: s for s in report.series}
        last = by_label[f"K={format_value(levels[-1])}"]
        prev = by_label[f"K={format_value(levels[-2])}"]
        rows = []
        for a, b in zip(prev.rows, last.rows):
            gap, hw = abs(b.mean - a.mean), combined(a.halfwidth, b.halfwidth)
            rows.append({"p": a.p, "gap": gap, "halfwidth": hw, "plateau": gap <= 2 * hw})
        report.tables["plateau"] = (["p", "gap", "halfwidth", "plateau"], rows)
        if not rows[-1]["plateau"]:
            report.failures.append(f"plateau gap {rows[-1]['gap']} exceeds 2 combined half-widths")
    return report


def _aggregate_continuity(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment, series_from_records(records))
    _flag(report, records, "coupled", "shifted flow below the limit flow")
    _flag(report, records, "sandwich", "envelope flows do not bracket the pair")
    by_label = {s.label: s for s in report.series}
    limit = by_label["G"]
    rows = []
    for p in limit.schedule:
        for n in sorted(config.shifts):
            approx = by_label[f"n={n}"].row(p)
            gap = abs(approx.mean - limit.row(p).mean)
            hw = combined(approx.halfwidth, limit.row(p).halfwidth)
            rows.append({"p": p, "n": n, "gap": gap, "halfwidth": hw})
    report.tables["differences"] = (["p", "n", "gap", "halfwidth"], rows)
    final = [row for row in rows if row["p"] == limit.schedule[-1]]
    gaps = [row["gap"] for row in final]
    if not chain_holds(gaps[::-1]):
        report.failures.append("differences do not decrease in n")
    if final[-1]["gap"] > STATISTICAL_SLACK * final[-1]["halfwidth"]:
        report.failures.append(f"gap at n={final[-1]['n']} exceeds {STATISTICAL_SLACK} half-widths")
    failures = edge_convergence(config.law(), config.shifts, config.seed, config.dimension)
    if failures:
        report.failures.append(f"{failures} sampled edges do not converge monotonically")
    return report


def _aggregate_nu_tilde(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment, series_from_records(records))
    _flag(report, records, "dominatesCylinder", "slab flow below the cylinder flow on the threshold event")
    by_key = {(s.functional, s.label): s for s in report.series}
    rows = []
    for direction in config.direction_list():
        label = direction_label(direction)
        tilde, plain = by_key[(Functionals.tilde_phi.value, label)], by_key[(Functionals.phi.value, label)]
        for a, b in zip(tilde.rows, plain.rows):
            gap, hw = abs(a.mean - b.mean), combined(a.halfwidth, b.halfwidth)
            rows.append({"label": label, "p": a.p, "gap": gap, "halfwidth": hw})
        if rows[-1]["gap"] > STATISTICAL_SLACK * rows[-1]["halfwidth"]:
            report.failures.append(f"{label}: tilde and plain estimates disagree at p={rows[-1]['p']}")
    report.tables["comparison"] = (["label", "p", "gap", "halfwidth"], rows)
    return report


def _aggregate_convexity(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment, series_from_records(records))
    triangle = _triangle(config)
    by_label = {s.label: s for s in report.series}
    p = config.schedule[-1]
    directions = list(dict.fromkeys(triangle + [Direction.axis(config.dimension, 0)]))
    rows = {d: by_label[direction_label(d)].row(p) for d in directions}
    convexity = convexity_from_rows(triangle, rows)
    report.tables["triangle"] = (
        ["lhs", "rhs", "slack", "holds"],
        [dict(zip(["lhs", "rhs", "slack", "holds"], row)) for row in convexity.triangle],
    )
    report.tables["lipschitz"] = (
        ["u", "v", "gap", "bound", "slack", "holds"],
        [dict(zip(["u", "v", "gap", "bound", "slack", "holds"], row)) for row in convexity.lipschitz],
    )
    report.tables["homogeneous"] = (
        ["direction", "nu", "extension"],
        [
            {"direction": direction_label(d), "nu": rows[d].mean, "extension": homogeneous(rows[d].mean, d.w)}
            for d in directions
        ],
    )
    if not convexity.passed:
        report.failures.append("convexity or Lipschitz inequality fails beyond slack")
    return report


def _aggregate_domination(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment)
    sums_y = np.array([int(r["value"]) for r in records if r["label"] == "Y"], dtype=np.int64)
    sums_x = np.array([int(r["value"]) for r in records if r["label"] == "X"], dtype=np.int64)
    rows = domination_rows(sums_y, sums_x)
    fields = ["a", "freqY", "freqX", "band"]
    report.tables["domination"] = (fields, [dict(zip(fields, row)) for row in rows])
    violated = [row for row in rows if row[1] > row[2] + row[3]]
    if violated:
        report.failures.append(f"tail frequencies of sum Y exceed sum X at a={[row[0] for row in violated]}")
    return report


def _aggregate_exact(key: str, message: str):
    def aggregate(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
        report = ExperimentReport(config.experiment, series_from_records(records))
        _flag(report, records, key, message)
        return report

    return aggregate


def event_rates(records: Sequence[Dict], key: str = "event") -> Dict[int, Fraction]:
    """Per-scale frequency of a boolean sample event."""
    by_p: Dict[int, List[bool]] = {}
    for record in records:
        by_p.setdefault(record["p"], []).append(bool(record["events"][key]))
    return {p: Fraction(sum(flags), len(flags)) for p, flags in sorted(by_p.items())}


def _aggregate_surgery(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment, series_from_records(records))
    _flag(report, records, "boundHolds", "surgery capacity exceeds its bound")
    _flag(report, records, "addedBelowK0", "added boundary edge above K0")
    for record in records:
        if record["events"]["event"] and not record["events"]["isCutset"]:
            report.violations.append((record, "surgery output is not a cutset on the event"))
    rates = event_rates(records)
    report.tables["event"] = (["p", "eventRate"], [{"p": p, "eventRate": float(r)} for p, r in rates.items()])
    if rates:
        p, rate = max(rates.items())
        if rate < EVENT_RATE_FLOOR:
            report.failures.append(
                f"event E' holds on {float(rate):.1%} of samples at p={p}, below {float(EVENT_RATE_FLOOR):.0%}"
            )
    return report


def _aggregate_zero_regime(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment, series_from_records(records))
    _flag(report, records, "boundHolds", "zero cutset capacity exceeds its bound")
    for record in records:
        if record["events"]["event"] and not record["events"]["isCutset"]:
            report.violations.append((record, "zero cutset is not a cutset on the event"))
    for series in report.series:
        if not decreasing(series):
            report.failures.append(f"{series.label}: rescaled capacities {series.means} do not decrease in p")
    return report


def _aggregate_animal(config: ExperimentConfig, records: Sequence[Dict]) -> ExperimentReport:
    report = ExperimentReport(config.experiment, series_from_records(records))
    for record in records:
        if record["events"]["efficient"] and record["events"]["connected"] is False:
            report.violations.append((record, "box animal of an efficient cut is disconnected"))
    ratios = [r["events"]["ratio"] for r in records if r["events"]["ratio"] is not None]
    report.tables["animal"] = (["maxRatio"], [{"maxRatio": max(ratios, default=0.0)}])
    return report


def _scale_tasks(config: ExperimentConfig) -> List[Tuple[int, int]]:
    return [(p, r) for p in config.schedule for r in range(config.replicates_for(p))]


def _replicate_tasks(config: ExperimentConfig) -> List[Tuple[int, int]]:
    p = config.schedule[0]
    return [(p, r) for r in range(config.replicates_for(p))]


def _largest_scale_tasks(config: ExperimentConfig) -> List[Tuple[int, int]]:
    p = config.schedule[-1]
    return [(p, r) for r in range(config.replicates_for(p))]


@dataclass(frozen=True)
class Experiment:
    task: Callable[[ExperimentConfig, int, int], List[Dict]]
    aggregate: Callable[[ExperimentConfig, Sequence[Dict]], ExperimentReport]
    tasks: Callable[[ExperimentConfig], List[Tuple[int, int]]] = _scale_tasks


EXPERIMENTS: Dict[str, Experiment] = {
    Experiments.estimate_nu.value: Experiment(_estimate_nu_task, _aggregate_estimate_nu),
    Experiments.truncation_ladder.value: Experiment(_ladder_task, _aggregate_ladder),
    Experiments.continuity.value: Experiment(_continuity_task, _aggregate_continuity),
    Experiments.nu_tilde.value: Experiment(_nu_tilde_task, _aggregate_nu_tilde),
    Experiments.convexity.value: Experiment(_convexity_task, _aggregate_convexity, _largest_scale_tasks),
    Experiments.domination.value: Experiment(_domination_task, _aggregate_domination, _replicate_tasks),
    Experiments.subadditivity.value: Experiment(
        _subadditivity_task, _aggregate_exact("holds", "subadditivity violated")
    ),
    Experiments.surgery.value: Experiment(_surgery_task, _aggregate_surgery),
    Experiments.zero_regime.value: Experiment(_zero_regime_task, _aggregate_zero_regime),
    Experiments.annulus.value: Experiment(
        _annulus_task, _aggregate_exact("holds", "annulus decomposition violated")
    ),
    Experiments.animal.value: Experiment(_animal_task, _aggregate_animal),
}


def prepare(config: ExperimentConfig) -> None:
    """Standing hypotheses, checked before any sampling."""
    name = config.experiment
    law = config.law()
    threshold = config.critical()
    if name != Experiments.domination.value:
        check_infinity_mass(law, config.dimension, threshold)
    if name == Experiments.estimate_nu.value:
        check_mild(config.schedule, [config.height_for(p) for p in config.schedule])
    if name in (Experiments.nu_tilde.value, Experiments.subadditivity.value):
        if not dominates(config.law_F(), law):
            raise HypothesisError("distribution_F must stochastically dominate distribution.")
        check_subcritical_level(config.law_F(), config.level("K0"), config.dimension, threshold)
    if name == Experiments.surgery.value:
        if not config.level("K") > config.level("K0"):
            raise ConfigError("Surgery needs K > K0.")
        check_subcritical_level(law, config.level("K0"), config.dimension, threshold)
    if name == Experiments.zero_regime.value:
        if not all(d.is_axis for d in config.direction_list()):
            raise ConfigError("The zero regime runs on axis directions only.")
    if name == Experiments.domination.value:
        check_subcritical_level(law, config.level("K"), config.dimension, threshold)
    if name == Experiments.convexity.value:
        try:
            triangle_weights(_triangle(config))
        except DomainError as e:
            raise ConfigError(str(e)) from e
    if name == Experiments.truncation_ladder.value:
        config.truncation_levels()


def _run_task(args: Tuple[str, ExperimentConfig, int, int]) -> List[Dict]:
    name, config, p, r = args
    return EXPERIMENTS[name].task(config, p, r)


def collect(config: ExperimentConfig) -> List[Dict]:
    experiment = EXPERIMENTS[config.experiment]
    tasks = [(config.experiment, config, p, r) for p, r in experiment.tasks(config)]
    if config.workers > 1:
        with Pool(config.workers) as pool:
            results = list(
                tqdm(pool.imap(_run_task, tasks), total=len(tasks), desc=config.experiment, disable=not config.verbose)
            )
    else:
        results = [
            _run_task(task) for task in tqdm(tasks, desc=config.experiment, disable=not config.verbose)
        ]
    return [record for result in results for record in result]


def replay(config: ExperimentConfig, p: int, seed: int) -> List[Dict]:
    """Recompute the sample records of one (p, seed) task."""
    replicate = seed - config.seed
    if (p, replicate) not in EXPERIMENTS[config.experiment].tasks(config):
        raise ConfigError(f"No task with p={p} and seed={seed} in this config.")
    return EXPERIMENTS[config.experiment].task(config, p, replicate)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9=.]+", "_", text).strip("_")


def write_artifacts(
    out_dir: str, config: ExperimentConfig, records: Sequence[Dict], report: ExperimentReport
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    seeds = sorted({record["seed"] for record in records})
    write_manifest(os.path.join(out_dir, "manifest.json"), config.to_dict(), seeds)
    write_jsonl(os.path.join(out_dir, "samples.jsonl"), records)
    for i, series in enumerate(report.series):
        name = "series.csv" if i == 0 else f"series-{_slug(series.functional + '-' + series.label)}.csv"
        write_csv(os.path.join(out_dir, name), SERIES_FIELDS, (row.as_dict() for row in series.rows))
    for name, (fields, rows) in report.tables.items():
        write_csv(os.path.join(out_dir, f"{name}.csv"), fields, rows)


def run(config: ExperimentConfig, out_dir: str, config_path: Optional[str] = None) -> int:
    """Run the configured experiment; 0 when every check held, 1 otherwise."""
    prepare(config)
    try:
        records = collect(config)
        report = EXPERIMENTS[config.experiment].aggregate(config, records)
    except (ExperimentAbortedError, ClusterBudgetError, CapacityOverflowError) as e:
        logger.error("Experiment aborted: %s", e)
        return 1
    write_artifacts(out_dir, config, records, report)

    source = config_path or os.path.join(out_dir, "manifest.json")
    for record, message in report.violations:
        logger.error(
            "%s (p=%d, seed=%d); replay with: run_experiment.py replay --config %s --p %d --seed %d",
            message, record["p"], record["seed"], source, record["p"], record["seed"],
        )
    for message in report.failures:
        logger.error("Statistical check failed: %s", message)
    return 0 if report.passed else 1
