import numpy as np
import pytest

from kneepoint.de import (
    DEConfig,
    clip_to_bounds,
    crossover_binomial,
    de_init,
    de_run,
    mutate,
)


def sphere(x):
    return float(np.sum(x * x))


def test_config_validation():
    with pytest.raises(ValueError):
        DEConfig(bounds=((0, 1),), population=3, generations=1)
    with pytest.raises(ValueError):
        DEConfig(bounds=((1, 0),), population=4, generations=1)
    with pytest.raises(ValueError):
        DEConfig(bounds=((0, 1),), population=4, generations=1, crossover=1.5)
    with pytest.raises(ValueError):
        DEConfig(bounds=((0, 1),), population=4, generations=1, mutation=(0.5, 2.5))
    with pytest.raises(ValueError):
        DEConfig(bounds=((0, 1),), population=4, generations=1, strategy="foo1bin")


def test_de_init_range_and_determinism():
    pop = de_init([(0.0, 1.0)], 4, seed=123)
    assert pop.shape == (4, 1)
    assert np.all((pop >= 0.0) & (pop < 1.0))
    assert np.array_equal(pop, de_init([(0.0, 1.0)], 4, seed=123))

    bounds = [(-2.0, 2.0)] + [(0.5, 1.0)] * 20
    pop = de_init(bounds, 105, seed=0)
    assert pop.shape == (105, 21)
    for j, (lo, hi) in enumerate(bounds):
        assert np.all((pop[:, j] >= lo) & (pop[:, j] < hi))


def test_mutate_identical_population_returns_member():
    pop = np.tile([1.0, 2.0], (6, 1))
    rng = np.random.default_rng(0)
    donor = mutate(pop, 0, "rand1bin", 0.8, rng)
    assert np.array_equal(donor, pop[0])
    donor = mutate(pop, 2, "best1bin", 0.8, rng, best_index=1)
    assert np.array_equal(donor, pop[2])


def test_mutate_hand_computed_donor():
    pop = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [4.0, 4.0]])

    class FixedRng:
        def __init__(self, values):
            self._values = list(values)

        def integers(self, _n):
            return self._values.pop(0)

    # rand1 with r1=1, r2=2, r3=3 and F=0.5: donor = x1 + 0.5*(x2 - x3)
    donor = mutate(pop, 0, "rand1bin", 0.5, FixedRng([1, 2, 3]))
    assert np.allclose(donor, [1.0 - 2.0, 0.0 - 1.0])
    # best1 with best=3, r1=1, r2=2: donor = x3 + 0.5*(x1 - x2)
    donor = mutate(pop, 0, "best1bin", 0.5, FixedRng([1, 2]), best_index=3)
    assert np.allclose(donor, [4.5, 3.0])


def test_mutate_requires_four_members():
    pop = np.zeros((3, 2))
    with pytest.raises(ValueError):
        mutate(pop, 0, "rand1bin", 0.5, np.random.default_rng(0))


def test_mutate_skips_target_best_and_duplicate_indices():
    pop = np.arange(10, dtype=float)[:, None]

    class FixedRng:
        def __init__(self, values):
            self._values = list(values)

        def integers(self, _n):
            return self._values.pop(0)

    # draws 4 (target) and 7 (best) must be rejected, then 1; duplicate 1
    # rejected for r2, then 2: donor = x7 + 1.0 * (x1 - x2) = 6
    donor = mutate(pop, 4, "best1bin", 1.0, FixedRng([4, 7, 1, 1, 2]), best_index=7)
    assert donor[0] == 6.0


def test_crossover_extremes():
    rng = np.random.default_rng(0)
    target = np.zeros(8)
    donor = np.ones(8)
    assert np.array_equal(crossover_binomial(target, donor, 1.0, rng), donor)
    trial = crossover_binomial(target, donor, 0.0, np.random.default_rng(1))
    assert trial.sum() == 1.0  # exactly the forced coordinate
    # D=1: always the donor
    assert crossover_binomial(np.zeros(1), np.ones(1), 0.0, rng)[0] == 1.0


def test_clip_to_bounds():
    bounds = [(0.0, 1.0), (-2.0, 2.0)]
    assert np.array_equal(clip_to_bounds(np.array([0.5, 0.0]), bounds), [0.5, 0.0])
    assert np.array_equal(clip_to_bounds(np.array([3.0, -5.0]), bounds), [1.0, -2.0])


def test_de_run_constant_objective_flat_trace():
    cfg = DEConfig(bounds=((0, 1),) * 3, population=8, generations=5, seed=1)
    best, value, trace = de_run(lambda x: 4.25, cfg)
    assert value == 4.25
    assert [r.best_value for r in trace] == [4.25] * 6
    assert [r.mean_value for r in trace] == [4.25] * 6


def test_de_run_evaluation_budget_and_elitism():
    calls = []

    def objective(x):
        calls.append(1)
        return sphere(x)

    cfg = DEConfig(bounds=((-5, 5),) * 4, population=10, generations=7, seed=3)
    best, value, trace = de_run(objective, cfg)
    assert len(calls) == 10 * (7 + 1)
    assert trace.records[-1].evaluations == 80
    bests = [r.best_value for r in trace]
    assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))


def test_de_run_deterministic_and_parallel_identical():
    cfg = DEConfig(bounds=((-5, 5),) * 5, population=20, generations=30, seed=7)
    r1 = de_run(sphere, cfg)
    r2 = de_run(sphere, cfg)
    assert np.array_equal(r1.best_vector, r2.best_vector)
    assert r1.best_value == r2.best_value
    assert r1.trace.to_csv() == r2.trace.to_csv()

    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=4) as pool:
        r3 = de_run(sphere, cfg, eval_map=lambda f, xs: list(pool.map(f, xs)))
    assert r3.trace.to_csv() == r1.trace.to_csv()
    assert np.array_equal(r3.best_vector, r1.best_vector)


def test_de_run_feasibility_of_all_evaluated_vectors():
    bounds = ((-1.0, 1.0), (0.0, 0.5))
    seen = []

    def objective(x):
        seen.append(np.array(x))
        return sphere(x)

    cfg = DEConfig(bounds=bounds, population=6, generations=10, seed=5, mutation=1.9)
    de_run(objective, cfg)
    arr = np.array(seen)
    assert np.all(arr[:, 0] >= -1.0) and np.all(arr[:, 0] <= 1.0)
    assert np.all(arr[:, 1] >= 0.0) and np.all(arr[:, 1] <= 0.5)


def test_de_run_nan_treated_as_inf(caplog):
    def nan_objective(x):
        return float("nan") if x[0] > 0 else sphere(x)

    cfg = DEConfig(bounds=((-1, 1),) * 2, population=6, generations=4, seed=2)
    with caplog.at_level("WARNING", logger="kneepoint.de"):
        best, value, _ = de_run(nan_objective, cfg)
    assert np.isfinite(value)
    assert best[0] <= 0
    assert any("NaN" in rec.message for rec in caplog.records)


def test_de_run_converges_on_sphere():
    cfg = DEConfig(bounds=((-5, 5),) * 5, population=75, generations=132, seed=0)
    _, value, trace = de_run(sphere, cfg)
    assert value < 1e-6
    assert trace.records[-1].evaluations <= 10_000


def test_trace_csv_shape():
    cfg = DEConfig(bounds=((0, 1),) * 2, population=5, generations=3, seed=0)
    _, _, trace = de_run(sphere, cfg)
    lines = trace.to_csv().strip().splitlines()
    assert lines[0] == "generation,best_loss,mean_loss,evals"
    assert len(lines) == 1 + 4  # header + generations 0..3
