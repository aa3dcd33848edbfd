"""Bounded differential evolution over a black-box objective.

The engine is deliberately synchronous and RNG-disciplined: all trial
vectors of a generation are produced first (consuming randomness in slot
order), then evaluated — possibly concurrently — and finally selected per
slot. Runs are therefore bit-identical for a given seed no matter how the
evaluations are scheduled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

__all__ = [
    "DEConfig",
    "DETrace",
    "GenerationRecord",
    "DEResult",
    "de_init",
    "mutate",
    "crossover_binomial",
    "clip_to_bounds",
    "de_run",
]

log = logging.getLogger(__name__)

STRATEGIES = ("rand1bin", "best1bin")


@dataclass(frozen=True)
class DEConfig:
    bounds: tuple
    population: int
    generations: int
    strategy: str = "best1bin"
    mutation: Union[float, tuple] = (0.5, 1.0)  # scalar F, or dither interval
    crossover: float = 0.7
    seed: Optional[int] = None
    tol: Optional[float] = None  # early stop on population-value spread; off by default

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if not bounds:
            raise ValueError("bounds must be nonempty")
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f"invalid bound ({lo}, {hi}): need lo < hi")
        object.__setattr__(self, "bounds", bounds)
        if self.population < 4:
            raise ValueError("population must be at least 4")
        if self.generations < 0:
            raise ValueError("generations must be nonnegative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; use one of {STRATEGIES}")
        f = self.mutation
        interval = (f, f) if np.isscalar(f) else tuple(f)
        if len(interval) != 2 or not (0.0 < interval[0] <= interval[1] <= 2.0):
            raise ValueError(f"mutation must lie within (0, 2], got {f!r}")
        object.__setattr__(self, "mutation", f if np.isscalar(f) else interval)
        if not 0.0 <= self.crossover <= 1.0:
            raise ValueError(f"crossover must lie in [0, 1], got {self.crossover}")

    @property
    def dimensions(self) -> int:
        return len(self.bounds)


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_vector: np.ndarray
    best_value: float
    mean_value: float
    evaluations: int


@dataclass
class DETrace:
    records: list = field(default_factory=list)

    def append(self, record: GenerationRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_csv(self) -> str:
        lines = ["generation,best_loss,mean_loss,evals"]
        for r in self.records:
            lines.append(f"{r.generation},{r.best_value!r},{r.mean_value!r},{r.evaluations}")
        return "\n".join(lines) + "\n"


class DEResult(NamedTuple):
    best_vector: np.ndarray
    best_value: float
    trace: DETrace


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def de_init(bounds, population: int, seed) -> np.ndarray:
    """Uniform population over the box: each coordinate in [lo, hi)."""
    rng = _as_rng(seed)
    bounds = np.asarray(bounds, dtype=np.float64)
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + rng.random((population, len(bounds))) * (hi - lo)


def _distinct_indices(rng, n: int, count: int, exclude) -> list:
    out = []
    while len(out) < count:
        r = int(rng.integers(n))
        if r in exclude or r in out:
            continue
        out.append(r)
    return out


def mutate(
    population: np.ndarray,
    i: int,
    strategy: str,
    f: float,
    rng: np.random.Generator,
    best_index: Optional[int] = None,
) -> np.ndarray:
    """Build a donor vector for slot i from scaled member differences."""
    n = population.shape[0]
    if n < 4:
        raise ValueError("mutation needs a population of at least 4")
    if strategy == "rand1bin":
        r1, r2, r3 = _distinct_indices(rng, n, 3, {i})
        return population[r1] + f * (population[r2] - population[r3])
    if strategy == "best1bin":
        if best_index is None:
            raise ValueError("best1bin requires best_index")
        r1, r2 = _distinct_indices(rng, n, 2, {i, best_index})
        return population[best_index] + f * (population[r1] - population[r2])
    raise ValueError(f"unknown strategy {strategy!r}")


def crossover_binomial(
    target: np.ndarray, donor: np.ndarray, cr: float, rng: np.random.Generator
) -> np.ndarray:
    """Binomial crossover with one forced donor coordinate."""
    if target.shape != donor.shape:
        raise ValueError("target and donor must have the same dimension")
    take = rng.random(target.shape[0]) < cr
    take[int(rng.integers(target.shape[0]))] = True
    return np.where(take, donor, target)


def clip_to_bounds(vector: np.ndarray, bounds) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=np.float64)
    return np.clip(vector, bounds[:, 0], bounds[:, 1])


def _draw_f(rng, mutation) -> float:
    if np.isscalar(mutation):
        return float(mutation)
    lo, hi = mutation
    return float(lo + rng.random() * (hi - lo))


def _evaluate(objective, vectors, eval_map) -> np.ndarray:
    values = np.array([float(v) for v in eval_map(objective, list(vectors))])
    bad = np.isnan(values)
    if bad.any():
        log.warning("objective returned NaN for %d candidate(s); treating as +inf", bad.sum())
        values[bad] = np.inf
    return values


def _builtin_map(func, items):
    return [func(x) for x in items]


def de_run(
    objective: Callable[[np.ndarray], float],
    config: DEConfig,
    eval_map=None,
) -> DEResult:
    """Minimize `objective` over the configured box.

    Runs the initial population plus exactly `generations` update rounds
    (fewer only when the optional spread tolerance triggers). Selection is
    greedy: a trial replaces its slot iff its value is <= the incumbent's.
    `eval_map(func, vectors)` may run the evaluations concurrently as long
    as it returns results in input order.
    """
    if eval_map is None:
        eval_map = _builtin_map
    rng = _as_rng(config.seed)
    bounds = np.asarray(config.bounds, dtype=np.float64)
    np_pop = config.population

    population = de_init(config.bounds, np_pop, rng)
    values = _evaluate(objective, population, eval_map)
    evaluations = np_pop

    trace = DETrace()

    def record(generation: int) -> None:
        best = int(np.argmin(values))
        trace.append(
            GenerationRecord(
                generation=generation,
                best_vector=population[best].copy(),
                best_value=float(values[best]),
                mean_value=float(np.mean(values)),
                evaluations=evaluations,
            )
        )

    record(0)
    for generation in range(1, config.generations + 1):
        best_index = int(np.argmin(values))
        trials = np.empty_like(population)
        for i in range(np_pop):
            f = _draw_f(rng, config.mutation)
            donor = mutate(population, i, config.strategy, f, rng, best_index=best_index)
            trial = crossover_binomial(population[i], donor, config.crossover, rng)
            trials[i] = clip_to_bounds(trial, bounds)
        trial_values = _evaluate(objective, trials, eval_map)
        evaluations += np_pop
        improved = trial_values <= values
        population[improved] = trials[improved]
        values[improved] = trial_values[improved]
        record(generation)
        if config.tol is not None:
            finite = values[np.isfinite(values)]
            if finite.size == np_pop and float(np.std(finite)) <= config.tol:
                break

    best = int(np.argmin(values))
    return DEResult(population[best].copy(), float(values[best]), trace)
