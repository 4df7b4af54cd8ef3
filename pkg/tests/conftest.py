import itertools

import numpy as np
import pytest

from activegt.graph import PoolingDesign
from activegt.model import NoiseModel, OutcomeRecord, outcome_likelihood


def brute_force_posterior(design: PoolingDesign, y, noise: NoiseModel, rho: float):
    """Plain-Python enumeration: returns (marginals, pair matrix, states, weights)."""
    n = design.n_patients
    states, weights = [], []
    for x in itertools.product((0, 1), repeat=n):
        w = 1.0
        for xi in x:
            w *= rho if xi else 1.0 - rho
        for pool, yb in zip(design.pools, y):
            t = int(any(x[i] for i in pool))
            w *= outcome_likelihood(yb, t, noise)
        states.append(x)
        weights.append(w)
    s = np.array(states, dtype=float)
    w = np.array(weights)
    w /= w.sum()
    marg = s.T @ w
    pair = s.T @ (s * w[:, None])
    return marg, pair, s, w


def random_instance(rng, n, m, k, rho=0.2, noise=NoiseModel(0.9, 0.1)):
    pools = tuple(tuple(sorted(rng.choice(n, size=min(k, n), replace=False).tolist())) for _ in range(m))
    design = PoolingDesign(n, pools)
    y = OutcomeRecord(tuple(int(b) for b in rng.integers(0, 2, size=m)))
    return design, y, noise, rho


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
