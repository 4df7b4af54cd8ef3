import numpy as np
import pytest
from scipy import stats

from activegt.graph import PoolingDesign
from activegt.model import (
    GroundTruth,
    NoiseModel,
    OutcomeRecord,
    generate_ground_truth,
    infected_count,
    outcome_likelihood,
    sample_outcome_vector,
    sample_test_outcome,
)


@pytest.mark.parametrize("p_tp, p_fp", [(0.4, 0.1), (0.9, 0.5), (1.1, 0.0), (0.9, -0.1)])
def test_noise_model_rejects_invalid(p_tp, p_fp):
    with pytest.raises(ValueError):
        NoiseModel(p_tp, p_fp)


@pytest.mark.parametrize("n, rho, k", [(1000, 0.02, 20), (10, 0.0, 0), (200, 0.05, 10), (1000, 0.01, 10)])
def test_ground_truth_count(n, rho, k):
    gt = generate_ground_truth(n, rho, np.random.default_rng(1))
    assert gt.n_infected == k
    assert int(gt.x0.sum()) == k
    assert gt.x0.size == n


def test_infected_count_rounds_half_away_from_zero():
    assert infected_count(10, 0.25) == 3
    assert infected_count(10, 0.24) == 2
    assert infected_count(3, 0.5) == 2


def test_ground_truth_uniform_positions():
    rng = np.random.default_rng(3)
    hits = np.zeros(10)
    for _ in range(4000):
        hits += generate_ground_truth(10, 0.2, rng).x0
    # each position infected with probability 0.2
    chi2 = stats.chisquare(hits, np.full(10, hits.sum() / 10))
    assert chi2.pvalue > 1e-3


@pytest.mark.parametrize(
    "y, t, noise, expected",
    [
        (1, 0, NoiseModel(0.9, 0.05), 0.05),
        (1, 1, NoiseModel(1.0, 0.05), 1.0),
        (0, 1, NoiseModel(0.9, 0.05), 0.1),
        (0, 0, NoiseModel(0.9, 0.05), 0.95),
    ],
)
def test_outcome_likelihood(y, t, noise, expected):
    assert outcome_likelihood(y, t, noise) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("t", [0, 1])
def test_outcome_likelihood_normalized(t):
    noise = NoiseModel(0.83, 0.17)
    assert outcome_likelihood(0, t, noise) + outcome_likelihood(1, t, noise) == pytest.approx(1.0)


def test_sample_deterministic_extremes():
    rng = np.random.default_rng(0)
    gt = GroundTruth(np.array([1, 0, 0, 0]), 1)
    clean = NoiseModel(1.0, 0.0)
    assert all(sample_test_outcome(gt, (1, 2), clean, rng) == 0 for _ in range(200))
    assert all(sample_test_outcome(gt, (0, 3), clean, rng) == 1 for _ in range(200))


def test_sample_positive_rate():
    rng = np.random.default_rng(42)
    gt = GroundTruth(np.array([1, 0]), 1)
    noise = NoiseModel(0.9, 0.05)
    draws = [sample_test_outcome(gt, (0, 1), noise, rng) for _ in range(100_000)]
    assert np.mean(draws) == pytest.approx(0.9, abs=0.01)


def test_sample_depends_only_on_pool_truth():
    noise = NoiseModel(0.7, 0.2)
    a = GroundTruth(np.array([1, 0, 1, 0]), 2)
    b = GroundTruth(np.array([0, 1, 0, 1]), 2)
    ra, rb = np.random.default_rng(9), np.random.default_rng(9)
    # pool {0,1} is positive under both truths
    assert [sample_test_outcome(a, (0, 1), noise, ra) for _ in range(500)] == [
        sample_test_outcome(b, (0, 1), noise, rb) for _ in range(500)
    ]


def test_outcome_vector_edge_cases():
    gt = GroundTruth(np.array([0, 0, 0]), 0)
    noise = NoiseModel(0.9, 0.0)
    rng = np.random.default_rng(0)
    assert sample_outcome_vector(gt, PoolingDesign(3), noise, rng) == OutcomeRecord()
    design = PoolingDesign(3, ((0,), (1, 2), (0, 1, 2)))
    assert sample_outcome_vector(gt, design, noise, rng).y == (0, 0, 0)


def test_outcome_vector_matches_sequential_draws():
    gt = GroundTruth(np.array([1, 0, 0, 1, 0]), 2)
    noise = NoiseModel(0.8, 0.3)
    design = PoolingDesign(5, ((0,), (1, 2), (3, 4), (2,), (1, 4)))
    vec = sample_outcome_vector(gt, design, noise, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    seq = tuple(sample_test_outcome(gt, p, noise, rng) for p in design.pools)
    assert vec.y == seq
    assert sample_outcome_vector(gt, design, noise, np.random.default_rng(5)) == vec


def test_outcome_vector_product_law():
    # two pools, one positive and one negative; joint frequencies follow the product law
    gt = GroundTruth(np.array([1, 0, 0]), 1)
    noise = NoiseModel(0.7, 0.2)
    design = PoolingDesign(3, ((0, 1), (2,)))
    rng = np.random.default_rng(11)
    counts = np.zeros(4)
    n = 20_000
    for _ in range(n):
        y = sample_outcome_vector(gt, design, noise, rng).y
        counts[2 * y[0] + y[1]] += 1
    p1, p2 = 0.7, 0.2
    expected = n * np.array([(1 - p1) * (1 - p2), (1 - p1) * p2, p1 * (1 - p2), p1 * p2])
    assert stats.chisquare(counts, expected).pvalue > 1e-3
