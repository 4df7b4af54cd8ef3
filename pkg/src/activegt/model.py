"""Ground truth and the noisy test channel."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import PoolingDesign, pool_truth


@dataclass(frozen=True)
class NoiseModel:
    """Bernoulli test channel.

    ``p_tp`` is the probability that a truly positive pool tests positive and
    ``p_fp`` the probability that a truly negative pool tests positive.
    """

    p_tp: float
    p_fp: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_fp < 0.5 <= self.p_tp <= 1.0:
            raise ValueError(
                f"need 0 <= p_fp < 0.5 <= p_tp <= 1, got p_tp={self.p_tp}, p_fp={self.p_fp}"
            )

    def positive_prob(self, t: int) -> float:
        return self.p_tp if t else self.p_fp


@dataclass(frozen=True)
class GroundTruth:
    x0: np.ndarray
    n_infected: int

    def __post_init__(self) -> None:
        x0 = np.asarray(self.x0, dtype=np.int8)
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if int(x0.sum()) != self.n_infected:
            raise ValueError("n_infected does not match x0")

    @property
    def n_patients(self) -> int:
        return int(self.x0.size)


@dataclass(frozen=True)
class OutcomeRecord:
    """Test outcomes aligned one-to-one with the pools of a design."""

    y: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.y)

    def append(self, bit: int) -> "OutcomeRecord":
        return OutcomeRecord(self.y + (int(bit),))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.y, dtype=np.int8)


def infected_count(n: int, rho: float) -> int:
    """``n * rho`` rounded half away from zero."""
    return int(math.floor(n * rho + 0.5))


def generate_ground_truth(n: int, rho: float, rng: np.random.Generator) -> GroundTruth:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    k = infected_count(n, rho)
    x0 = np.zeros(n, dtype=np.int8)
    x0[rng.choice(n, size=k, replace=False)] = 1
    return GroundTruth(x0, k)


def outcome_likelihood(y: int, t: int, noise: NoiseModel) -> float:
    """P(Y = y | T = t) under the test channel."""
    p = noise.positive_prob(t)
    return p * y + (1.0 - p) * (1 - y)


def sample_test_outcome(
    x0: GroundTruth, pool, noise: NoiseModel, rng: np.random.Generator
) -> int:
    t = pool_truth(x0.x0, pool)
    return int(rng.random() < outcome_likelihood(1, t, noise))


def sample_outcome_vector(
    x0: GroundTruth, design: PoolingDesign, noise: NoiseModel, rng: np.random.Generator
) -> OutcomeRecord:
    # one uniform per pool, in pool order; matches repeated sample_test_outcome calls
    truths = np.array([pool_truth(x0.x0, p) for p in design.pools], dtype=np.int8)
    u = rng.random(design.n_pools)
    p_pos = np.where(truths == 1, noise.p_tp, noise.p_fp)
    return OutcomeRecord(tuple(int(v) for v in (u < p_pos)))
