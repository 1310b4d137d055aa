"""Differential evolution over box-bounded integer vectors.

Strategy is ``best1bin`` with Latin hypercube initialisation and a relative
tolerance convergence rule.  Random streams are derived from the configured
seed with :class:`numpy.random.SeedSequence`: spawn key ``(0,)`` drives the
initial population and ``(1, k)`` drives generation ``k`` (1-based), so a run
is reproducible on any platform numpy supports.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid optimiser configuration."""


class ObjectiveError(RuntimeError):
    """The objective raised during a run.

    Carries the generation index (0 = initial population) and the partial
    best-energy trace accumulated before the failure.
    """

    def __init__(self, iteration: int, trace: list[float], evaluations: int, cause: BaseException):
        super().__init__(f"objective failed during iteration {iteration}: {cause!r}")
        self.iteration = iteration
        self.trace = list(trace)
        self.evaluations = evaluations
        self.cause = cause


@dataclass(frozen=True)
class Bounds:
    """Inclusive integer ``(low, high)`` limits for each dimension."""

    pairs: tuple[tuple[int, int], ...]

    def __init__(self, pairs: Sequence[Sequence[int]]):
        pairs = tuple((int(lo), int(hi)) for lo, hi in pairs)
        if not pairs:
            raise ConfigError("bounds need at least one dimension")
        for lo, hi in pairs:
            if lo > hi:
                raise ConfigError(f"low bound {lo} exceeds high bound {hi}")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def for_image(cls, width: int, height: int) -> "Bounds":
        """Bounds of an ``(x, y, r, g, b)`` perturbation vector."""
        return cls([(0, width - 1), (0, height - 1), (0, 255), (0, 255), (0, 255)])

    @property
    def dim(self) -> int:
        return len(self.pairs)

    @property
    def low(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.float64)

    def contains(self, vector) -> bool:
        v = np.asarray(vector)
        return bool(np.all(v >= self.low) and np.all(v <= self.high))


@dataclass(frozen=True)
class DeConfig:
    population_size: int = 200
    mutation_factor: float = 0.5
    recombination: float = 0.7
    max_iterations: int = 100
    tolerance: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if self.population_size < 4:
            raise ConfigError(
                f"population_size must be at least 4 for best1bin, got {self.population_size}"
            )
        if not self.mutation_factor > 0:
            raise ConfigError("mutation_factor must be positive")
        if not 0.0 <= self.recombination <= 1.0:
            raise ConfigError("recombination must lie in [0, 1]")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be non-negative")
        if not self.tolerance >= 0:
            raise ConfigError("tolerance must be non-negative")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed must be an unsigned 64-bit integer")


@dataclass
class DeRunResult:
    best_vector: np.ndarray
    best_energy: float
    iterations_completed: int
    converged_after_initial: bool
    converged: bool
    trace: list[float] = field(default_factory=list)
    evaluations: int = 0
    stopped_early: bool = False


def round_half_away(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def to_integer_vector(values, bounds: Bounds) -> np.ndarray:
    """Round half away from zero, then clamp into ``bounds``."""
    return np.clip(round_half_away(values), bounds.low, bounds.high).astype(np.int64)


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def generation_rng(seed: int, generation: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, generation)))


def lhs_samples(bounds: Bounds, population_size: int, rng: np.random.Generator) -> np.ndarray:
    """Continuous Latin hypercube samples over ``[low, high + 1)`` per dimension.

    Each column holds one uniform draw from every one of ``population_size``
    equal-width strata, in random order.
    """
    n, d = population_size, bounds.dim
    low = bounds.low
    width = (bounds.high + 1.0 - low) / n
    u = rng.random((n, d))
    strata = np.column_stack([rng.permutation(n) for _ in range(d)])
    return low + (strata + u) * width


def lhs_init(bounds: Bounds, population_size: int, rng: np.random.Generator) -> np.ndarray:
    if population_size < 1:
        raise ConfigError("population_size must be positive")
    samples = lhs_samples(bounds, population_size, rng)
    return np.clip(np.floor(samples), bounds.low, bounds.high).astype(np.int64)


def check_convergence(energies, tolerance: float) -> bool:
    """True iff the population std (ddof 0) is at most ``tolerance * |mean|``."""
    e = np.asarray(energies, dtype=np.float64)
    if e.size == 0:
        raise ValueError("energies must be non-empty")
    return bool(np.std(e) <= tolerance * abs(np.mean(e)))


def best1bin_trial(
    population: np.ndarray,
    energies: np.ndarray,
    target_index: int,
    config: DeConfig,
    rng: np.random.Generator,
    bounds: Bounds,
    best_index: Optional[int] = None,
    integral: bool = True,
) -> np.ndarray:
    """Build one trial vector for ``target_index``.

    With ``integral`` the trial is rounded half away from zero and clamped.
    Otherwise it stays real-valued, as the engine stores it: components that
    leave ``[low - 0.5, high + 0.5]`` are redrawn uniformly inside that range,
    which stops the population piling up on the bounds.
    """
    n, d = population.shape
    if n < 4:
        raise ConfigError(f"best1bin needs at least 4 members, population has {n}")
    if best_index is None:
        best_index = int(np.argmin(energies))
    # two distinct members, neither equal to the target
    r1, r2 = rng.choice(n - 1, size=2, replace=False)
    r1 += r1 >= target_index
    r2 += r2 >= target_index
    donor = population[best_index] + config.mutation_factor * (
        population[r1].astype(np.float64) - population[r2]
    )
    cross = rng.random(d) < config.recombination
    cross[rng.integers(d)] = True
    trial = np.where(cross, donor, population[target_index])
    if integral:
        return to_integer_vector(trial, bounds)
    # each integer owns a unit-wide cell, including the ones on the bounds
    low, high = bounds.low - 0.5, bounds.high + 0.5
    out = (trial < low) | (trial > high)
    if out.any():
        fresh = low + rng.random(d) * (high - low)
        trial = np.where(out, fresh, trial)
    return trial


def de_minimize(
    objective: Callable[[np.ndarray], float],
    bounds: Bounds,
    config: DeConfig,
    early_stop: Optional[Callable[[float], bool]] = None,
) -> DeRunResult:
    """Minimise ``objective`` over the integer box.

    Trials replace their target when not worse.  The best member is refreshed
    as soon as a trial beats it, ties going to the lowest index.  Convergence
    is tested after the initial population and after every generation;
    ``early_stop`` is consulted with the best energy after every generation.
    """
    n = config.population_size
    evaluations = 0
    trace: list[float] = []

    def evaluate(vector, iteration):
        nonlocal evaluations
        try:
            value = float(objective(vector))
        except Exception as exc:
            raise ObjectiveError(iteration, trace, evaluations, exc) from exc
        evaluations += 1
        return value

    population = lhs_init(bounds, n, init_rng(config.rng_seed)).astype(np.float64)
    energies = np.array([evaluate(to_integer_vector(v, bounds), 0) for v in population])
    best = int(np.argmin(energies))
    trace.append(float(energies[best]))

    converged = check_convergence(energies, config.tolerance)
    converged_after_initial = converged
    stopped_early = False
    iterations = 0
    if not converged and early_stop is not None and early_stop(trace[-1]):
        stopped_early = True

    while not (converged or stopped_early) and iterations < config.max_iterations:
        iterations += 1
        rng = generation_rng(config.rng_seed, iterations)
        for i in range(n):
            trial = best1bin_trial(
                population, energies, i, config, rng, bounds, best, integral=False
            )
            e = evaluate(to_integer_vector(trial, bounds), iterations)
            if e <= energies[i]:
                population[i] = trial
                energies[i] = e
                if e < energies[best] or (e == energies[best] and i < best):
                    best = i
        trace.append(float(energies[best]))
        converged = check_convergence(energies, config.tolerance)
        if early_stop is not None and early_stop(trace[-1]):
            stopped_early = True
        log.debug("generation %d best %.6g", iterations, trace[-1])

    return DeRunResult(
        best_vector=to_integer_vector(population[best], bounds),
        best_energy=float(energies[best]),
        iterations_completed=iterations,
        converged_after_initial=converged_after_initial,
        converged=converged,
        trace=trace,
        evaluations=evaluations,
        stopped_early=stopped_early,
    )
