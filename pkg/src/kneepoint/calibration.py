"""Joint search over kernel width and per-unit change points.

A hypothesis is a vector (log10_gamma, rho_1..rho_m): a kernel width plus,
for every training unit, the life fraction at which it leaves the healthy
regime. The prefixes up to the decoded change cycles form the training set
of a one-class SVM; the hypothesis is scored by how well the trained
model's per-cycle labels agree with the labels the hypothesis itself
implies. Differential evolution minimizes that self-consistency loss.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import svm
from .de import DEConfig, DETrace, de_run
from .errors import CalibrationError, ConvergenceError, KneepointError
from .svm import TrainedModel

__all__ = [
    "Hypothesis",
    "CalibrationConfig",
    "CalibrationResult",
    "decode_hypothesis",
    "assemble_training_set",
    "hypothesized_labels",
    "log_loss",
    "fitness",
    "calibrate",
    "result_to_dict",
]

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-7


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class Hypothesis:
    """A candidate point in the (m+1)-dimensional search space."""

    log10_gamma: float
    rho: tuple
    change_cycles: tuple

    @property
    def gamma(self) -> float:
        return 10.0 ** self.log10_gamma


@dataclass(frozen=True)
class CalibrationConfig:
    nu: float = 0.05
    population: int = 105
    generations: int = 10
    log10_gamma_bounds: tuple = (-2.0, 2.0)
    rho_min: float = 0.5
    strategy: str = "best1bin"
    mutation: object = (0.5, 1.0)
    crossover: float = 0.7
    seed: Optional[int] = None
    kkt_tol: float = svm.DEFAULT_KKT_TOL
    smo_max_iter: int = svm.DEFAULT_MAX_ITER
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not 0 < self.nu <= 1:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if self.population < 4:
            raise ValueError("population must be at least 4 for DE mutation")
        lo, hi = self.log10_gamma_bounds
        if not lo < hi:
            raise ValueError(f"invalid log10_gamma_bounds {self.log10_gamma_bounds}")
        if not 0.0 < self.rho_min < 1.0:
            raise ValueError(f"rho_min must lie in (0, 1), got {self.rho_min}")
        if self.eps <= 0 or self.eps >= 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {self.eps}")


@dataclass(frozen=True)
class CalibrationResult:
    best: Hypothesis
    loss: float
    model: TrainedModel
    trace: DETrace
    duration_seconds: float


def decode_hypothesis(vector, lengths: Sequence[int], bounds=None) -> Hypothesis:
    """Map a search vector to (gamma, rho, integer change cycles).

    change_cycles[i] = clamp(round(rho_i * T_i), 1, T_i - 1), so both the
    healthy prefix and the faulty suffix are always nonempty.
    """
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (len(lengths) + 1,):
        raise ValueError(
            f"vector length {vector.shape} does not match m+1 = {len(lengths) + 1}"
        )
    if bounds is not None:
        arr = np.asarray(bounds, dtype=np.float64)
        if np.any(vector < arr[:, 0]) or np.any(vector > arr[:, 1]):
            raise ValueError("vector not within bounds; clip before decoding")
    cycles = tuple(
        int(np.clip(_round_half_up(r * t), 1, t - 1))
        for r, t in zip(vector[1:], lengths)
    )
    return Hypothesis(
        log10_gamma=float(vector[0]),
        rho=tuple(float(r) for r in vector[1:]),
        change_cycles=cycles,
    )


def assemble_training_set(normalized: Sequence[np.ndarray], change_cycles) -> np.ndarray:
    """Stack the hypothesized-healthy prefix rows, unit order then cycle order."""
    if len(normalized) != len(change_cycles):
        raise ValueError("one change cycle per instance required")
    blocks = []
    for X, c in zip(normalized, change_cycles):
        if not 1 <= c <= X.shape[0] - 1:
            raise ValueError(f"change cycle {c} outside [1, {X.shape[0] - 1}]")
        blocks.append(X[:c])
    return np.concatenate(blocks, axis=0)


def hypothesized_labels(cycles: int, change: int) -> np.ndarray:
    """Label vector implied by a change at `change`: 1 through it, 0 after."""
    if not 1 <= change <= cycles - 1:
        raise ValueError(f"change cycle {change} outside [1, {cycles - 1}]")
    labels = np.zeros(cycles, dtype=np.int8)
    labels[:change] = 1
    return labels


def log_loss(y, p, eps: float = DEFAULT_EPS) -> float:
    """Mean binary cross-entropy with probabilities clipped to [eps, 1-eps]."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise ValueError("y and p must be equal-length nonempty vectors")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("labels must be 0 or 1")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    q = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(q) + (1.0 - y) * np.log1p(-q)))


def fitness(vector, normalized: Sequence[np.ndarray], config: CalibrationConfig) -> float:
    """Self-consistency loss of one hypothesis; +inf for infeasible candidates.

    Trains a single pooled model on the hypothesized-healthy prefixes, then
    sums the per-unit mean log loss between hypothesized and predicted
    labels over every observed cycle. Solver failures are logged and mapped
    to +inf so the surrounding search simply discards the candidate.
    """
    lengths = [X.shape[0] for X in normalized]
    hyp = decode_hypothesis(vector, lengths)
    try:
        train = assemble_training_set(normalized, hyp.change_cycles)
        model = svm.train_ocsvm(
            train,
            nu=config.nu,
            gamma=hyp.gamma,
            kkt_tol=config.kkt_tol,
            max_iter=config.smo_max_iter,
        )
    except (ConvergenceError, KneepointError, ValueError) as exc:
        log.warning("hypothesis rejected (gamma=%.4g): %s", hyp.gamma, exc)
        return float("inf")
    scores = svm.decision_values(model, np.concatenate(normalized, axis=0))
    predicted = np.where(scores >= 0.0, 1.0 - config.eps, config.eps)
    total = 0.0
    offset = 0
    for cycles, change in zip(lengths, hyp.change_cycles):
        y = hypothesized_labels(cycles, change)
        total += log_loss(y, predicted[offset: offset + cycles], config.eps)
        offset += cycles
    return total


# --- parallel evaluation plumbing -------------------------------------------

_WORKER_STATE: dict = {}


def _init_worker(normalized, config):
    _WORKER_STATE["args"] = ([np.asarray(X) for X in normalized], config)


def _worker_eval(vector):
    normalized, config = _WORKER_STATE["args"]
    return fitness(vector, normalized, config)


class _MemoizedEvaluator:
    """Evaluate candidate vectors with an exact-match cache.

    Repeated vectors show up once the population starts collapsing; caching
    them is free because fitness is a pure function. Results are identical
    whether evaluation runs serially or on a pool.
    """

    def __init__(self, normalized, config, workers: int = 1):
        self._normalized = normalized
        self._config = config
        self._memo: dict = {}
        self._pool = None
        if workers > 1:
            self._pool = ProcessPoolExecutor(
                max_workers=workers,
                initializer=_init_worker,
                initargs=(normalized, config),
            )

    def eval_map(self, _objective, vectors):
        keys = [np.asarray(v).tobytes() for v in vectors]
        todo = [i for i, k in enumerate(keys) if k not in self._memo]
        if todo:
            batch = [vectors[i] for i in todo]
            if self._pool is not None:
                results = list(self._pool.map(_worker_eval, batch))
            else:
                results = [fitness(v, self._normalized, self._config) for v in batch]
            for i, value in zip(todo, results):
                self._memo[keys[i]] = value
        return [self._memo[k] for k in keys]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def calibrate(normalized: Sequence[np.ndarray], config: CalibrationConfig, workers: int = 1):
    """Run the full search and retrain the model at the winning hypothesis.

    `normalized` holds one T_i x d feature matrix per training unit (already
    masked and z-scored). Deterministic for a given config.seed, including
    under parallel evaluation (workers > 1).
    """
    normalized = [np.ascontiguousarray(X, dtype=np.float64) for X in normalized]
    if not normalized:
        raise ValueError("need at least one training instance")
    for X in normalized:
        if X.ndim != 2 or X.shape[0] < 2:
            raise ValueError("each instance needs at least 2 cycles")
    start = time.perf_counter()
    m = len(normalized)
    bounds = (tuple(config.log10_gamma_bounds),) + ((config.rho_min, 1.0),) * m
    de_config = DEConfig(
        bounds=bounds,
        population=config.population,
        generations=config.generations,
        strategy=config.strategy,
        mutation=config.mutation,
        crossover=config.crossover,
        seed=config.seed,
    )
    evaluator = _MemoizedEvaluator(normalized, config, workers)
    try:
        best_vector, best_value, trace = de_run(
            lambda v: fitness(v, normalized, config),
            de_config,
            eval_map=evaluator.eval_map,
        )
    finally:
        evaluator.close()
    if not np.isfinite(best_value):
        raise CalibrationError(
            f"no feasible hypothesis found in {config.population} x "
            f"{config.generations + 1} evaluations; every candidate was rejected "
            "(check nu against the training-set sizes and the solver tolerances)"
        )
    lengths = [X.shape[0] for X in normalized]
    best = decode_hypothesis(best_vector, lengths)
    model = svm.train_ocsvm(
        assemble_training_set(normalized, best.change_cycles),
        nu=config.nu,
        gamma=best.gamma,
        kkt_tol=config.kkt_tol,
        max_iter=config.smo_max_iter,
    )
    return CalibrationResult(
        best=best,
        loss=float(best_value),
        model=model,
        trace=trace,
        duration_seconds=time.perf_counter() - start,
    )


def _json_number(value: float):
    return float(value) if np.isfinite(value) else None


def result_to_dict(result: CalibrationResult, config: Optional[CalibrationConfig] = None) -> dict:
    """JSON document for a calibration run (wall-clock time excluded on purpose)."""
    doc = {
        "best": {
            "gamma": result.best.gamma,
            "rho": list(result.best.rho),
            "change_cycles": list(result.best.change_cycles),
        },
        "loss": _json_number(result.loss),
        "trace": [
            {
                "generation": r.generation,
                "best_loss": _json_number(r.best_value),
                "mean_loss": _json_number(r.mean_value),
            }
            for r in result.trace
        ],
        "model": svm.model_to_dict(result.model),
        "config_echo": {},
    }
    if config is not None:
        doc["config_echo"] = {
            "nu": config.nu,
            "population": config.population,
            "generations": config.generations,
            "log10_gamma_bounds": list(config.log10_gamma_bounds),
            "rho_min": config.rho_min,
            "strategy": config.strategy,
            "mutation": list(config.mutation) if not np.isscalar(config.mutation) else config.mutation,
            "crossover": config.crossover,
            "seed": config.seed,
            "kkt_tol": config.kkt_tol,
            "eps": config.eps,
        }
    return doc
