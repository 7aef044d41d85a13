import numpy as np
import pytest

from regimelq import (
    Generator,
    TimeGrid,
    compensated_martingales,
    occupancy_reference,
    simulate_chain,
    validate_generator,
)
from regimelq.chain import path_rng
from regimelq.errors import ConfigurationError

TIMES = np.linspace(0.0, 1.0, 11)


def test_validate_passes_consistent_matrix():
    gen = Generator.constant([[-1.0, 1.0], [2.0, -2.0]])
    report = validate_generator(gen, TIMES)
    assert report.passed and not report.violations


def test_validate_rejects_bad_row_sum():
    gen = Generator.constant([[-1.0, 0.5], [1.0, -1.0]])
    report = validate_generator(gen, TIMES)
    assert not report.passed
    assert any("row sums" in v for v in report.violations)


def test_validate_rejects_negative_off_diagonal():
    gen = Generator.constant([[-1.0, 1.0], [-0.5, 0.5]])
    report = validate_generator(gen, TIMES)
    assert not report.passed
    assert any("off-diagonal" in v for v in report.violations)


def test_validate_warns_on_zero_rates():
    gen = Generator.constant([[0.0, 0.0], [0.0, 0.0]])
    report = validate_generator(gen, TIMES)
    assert report.passed
    assert report.warnings


def test_absorbing_chain_never_jumps():
    gen = Generator.constant(np.zeros((2, 2)))
    path = simulate_chain(gen, 0.0, 0, 1.0, seed=1)
    assert path.jump_times.size == 0
    assert np.all(path.regimes_at(TIMES) == 0)


def test_same_seed_gives_identical_path():
    gen = Generator.constant([[-2.0, 2.0], [3.0, -3.0]])
    a = simulate_chain(gen, 0.0, 1, 2.0, seed=99)
    b = simulate_chain(gen, 0.0, 1, 2.0, seed=99)
    assert np.array_equal(a.jump_times, b.jump_times)
    assert np.array_equal(a.jump_targets, b.jump_targets)


def test_occupancy_at_start_is_indicator():
    gen = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])
    probs = occupancy_reference(gen, 0.0, 1, 0.0)
    assert np.allclose(probs, [0.0, 1.0], atol=1e-14)


def test_occupancy_symmetric_two_state():
    gen = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])
    probs = occupancy_reference(gen, 0.0, 0, 0.5)
    expected = 0.5 * (1.0 + np.exp(-1.0))  # eigenvalues 0 and -2
    assert abs(probs[0] - expected) < 1e-4


def test_occupancy_long_run_limit():
    gen = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])
    probs = occupancy_reference(gen, 0.0, 0, 50.0)
    assert np.allclose(probs, [0.5, 0.5], atol=1e-10)


def test_occupancy_rejects_time_dependent():
    gen = Generator.from_table(
        [0.0, 1.0],
        [[[-1.0, 1.0], [1.0, -1.0]], [[-2.0, 2.0], [2.0, -2.0]]],
    )
    with pytest.raises(NotImplementedError):
        occupancy_reference(gen, 0.0, 0, 0.5)


def test_empirical_occupancy_matches_law():
    gen = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])
    count = 20000
    hits = 0
    for p in range(count):
        # one shared family, one stream per path index
        rng = path_rng(314, p)
        t, i = 0.0, 0
        while True:
            t += rng.standard_exponential()  # rate 1 in both regimes
            if t >= 0.5:
                break
            rng.random()
            i = 1 - i
        hits += i == 0
    expected = 0.5 * (1.0 + np.exp(-1.0))
    se = np.sqrt(expected * (1 - expected) / count)
    assert abs(hits / count - expected) <= 3 * se


def test_rate_bound_zero_with_rates_errors():
    gen = Generator.from_table(
        [0.0, 1.0],
        [[[-1.0, 1.0], [1.0, -1.0]], [[-1.0, 1.0], [1.0, -1.0]]],
        rate_bound=0.0,
    )
    with pytest.raises(ConfigurationError):
        simulate_chain(gen, 0.0, 0, 1.0, seed=5)


def test_thinning_handles_time_dependent_rates():
    # ramping rates stay below the bound; empirical jump count is sane
    gen = Generator.from_table(
        [0.0, 1.0],
        [[[-0.5, 0.5], [0.5, -0.5]], [[-2.0, 2.0], [2.0, -2.0]]],
    )
    counts = [
        simulate_chain(gen, 0.0, 0, 1.0, seed=s).jump_times.size
        for s in range(300)
    ]
    mean = np.mean(counts)
    assert 0.4 < mean < 2.5  # integrated rate is 1.25


def test_compensated_zero_rates():
    gen = Generator.constant(np.zeros((2, 2)))
    grid = TimeGrid(0.0, 1.0, 50)
    path = simulate_chain(gen, 0.0, 0, 1.0, seed=2)
    mart = compensated_martingales(path, gen, grid)
    assert not np.any(mart.counts)
    assert not np.any(mart.compensators)
    assert not np.any(mart.compensated)


def test_compensated_structure_single_path():
    gen = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])
    grid = TimeGrid(0.0, 1.0, 100)
    path = simulate_chain(gen, 0.0, 0, 1.0, seed=11)
    mart = compensated_martingales(path, gen, grid)
    assert np.all(np.diff(mart.counts, axis=1) >= 0)
    assert np.all(np.diff(mart.compensators, axis=1) >= -1e-15)
    assert np.allclose(mart.compensated[:, 0], 0.0)
    # jump counts at the horizon match the path record
    for j in range(2):
        assert mart.counts[j, -1] == np.sum(path.jump_targets == j)


def test_martingale_mean_and_jump_count_law():
    # E[N_2(1) | start in regime 1] = (3 - e^{-2}) / 4 for the symmetric chain
    gen = Generator.constant([[-1.0, 1.0], [1.0, -1.0]])
    grid = TimeGrid(0.0, 1.0, 20)
    count = 8000
    n2 = np.empty(count)
    comp_end = np.empty(count)
    for p in range(count):
        path = simulate_chain(gen, 0.0, 0, 1.0, seed=8000 + p)
        mart = compensated_martingales(path, gen, grid)
        n2[p] = mart.counts[1, -1]
        comp_end[p] = mart.compensated[1, -1]
    expected = 0.25 * (3.0 - np.exp(-2.0))
    se = n2.std(ddof=1) / np.sqrt(count)
    assert abs(n2.mean() - expected) <= 3 * se
    se_m = comp_end.std(ddof=1) / np.sqrt(count)
    assert abs(comp_end.mean()) <= 3 * se_m
