from __future__ import annotations

import logging
from enum import Enum
from fractions import Fraction
from typing import Union

import numpy as np

Rational = Union[int, Fraction]

DEFAULT_QUANTUM = 2**20
DEFAULT_CLUSTER_BUDGET = 10**6
DEFAULT_P_C = {2: Fraction(1, 2)}
STATISTICAL_SLACK = 3
INFINITE_SAMPLE_LIMIT = Fraction(1, 10)
# in units of the smallest positive capacity
POSITIVE_FLOOR = Fraction(1, 10)
NULL_CEILING = Fraction(1, 20)
EVENT_RATE_FLOOR = Fraction(19, 20)


class FppError(Exception):
    pass


class DomainError(FppError, ValueError):
    pass


class DegenerateGeometryError(DomainError):
    pass


class ProblemTooLargeError(DomainError):
    pass


class HypothesisError(DomainError):
    pass


class CapacityOverflowError(FppError, OverflowError):
    pass


class ClusterBudgetError(FppError):
    pass


class ConfigError(FppError, ValueError):
    pass


class ExperimentAbortedError(FppError):
    pass


class CylinderKinds(Enum):
    symmetric: str = "symmetric"
    directed: str = "directed"
    slab: str = "slab"

    @classmethod
    def list(cls):
        return list(map(lambda c: c.value, cls))


def check_cylinder_kind(name: str) -> None:
    allowed = CylinderKinds.list()
    if name not in allowed:
        raise ValueError(f"Unsupported cylinder kind '{name}'. Allowed: {allowed}.")


class Terminals(Enum):
    top_bottom: str = "top-bottom"
    half_boundaries: str = "half-boundaries"
    slab: str = "slab"

    @classmethod
    def list(cls):
        return list(map(lambda c: c.value, cls))


def check_terminals(name: str) -> None:
    allowed = Terminals.list()
    if name not in allowed:
        raise ValueError(f"Unsupported terminals '{name}'. Allowed: {allowed}.")


class Functionals(Enum):
    phi: str = "phi"
    tau: str = "tau"
    phi_directed: str = "phi_directed"
    tilde_phi: str = "tilde_phi"

    @classmethod
    def list(cls):
        return list(map(lambda c: c.value, cls))


class Experiments(Enum):
    estimate_nu: str = "estimate_nu"
    truncation_ladder: str = "truncation_ladder"
    continuity: str = "continuity"
    nu_tilde: str = "nu_tilde"
    convexity: str = "convexity"
    domination: str = "domination"
    subadditivity: str = "subadditivity"
    surgery: str = "surgery"
    zero_regime: str = "zero_regime"
    annulus: str = "annulus"
    animal: str = "animal"

    @classmethod
    def list(cls):
        return list(map(lambda c: c.value, cls))


def check_experiment(name: str) -> None:
    allowed = Experiments.list()
    if name not in allowed:
        raise ValueError(f"Unsupported experiment '{name}'. Allowed: {allowed}.")


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def as_fraction(value: Union[int, float, str, Fraction]) -> Fraction:
    """Exact rational from ints, Fractions, decimal strings or floats.

    Floats go through their shortest repr, so 0.3 becomes 3/10 rather than the
    binary expansion.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise DomainError(f"Expected a number, got {value!r}.")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not np.isfinite(value):
            raise DomainError(f"Expected a finite number, got {value!r}.")
        return Fraction(repr(value))
    try:
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError) as e:
        raise DomainError(f"Cannot read '{value}' as a rational number.") from e


def p_c_for(dimension: int, p_c: Union[None, str, Fraction] = None) -> Fraction:
    if p_c is not None:
        value = as_fraction(p_c)
        if not 0 < value < 1:
            raise DomainError(f"p_c must lie in (0, 1), got {value}.")
        return value
    try:
        return DEFAULT_P_C[dimension]
    except KeyError:
        raise DomainError(
            f"No default p_c for dimension {dimension}; configure it explicitly."
        )


def derive_seed(base: int, *keys: int) -> int:
    # independent child seed for auxiliary streams (never the replicate seeds)
    sequence = np.random.SeedSequence([int(base) % 2**64, *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])
