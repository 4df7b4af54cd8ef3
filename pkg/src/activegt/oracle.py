"""Exact posterior quantities by enumerating every infection pattern.

Only usable for small populations; the cost is ``2**n_patients`` times the
number of pools.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .graph import PoolingDesign
from .model import NoiseModel, OutcomeRecord

MAX_PATIENTS = 22
_CHUNK_BITS = 16


class OracleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class ExactPosterior:
    marginals: np.ndarray
    pair_expectations: np.ndarray  # full symmetric matrix of E[X_i X_j]; diagonal = marginals
    normalizer: float  # sum of unnormalized weights, relative to exp(log_scale)
    log_scale: float


def _pool_masks(design: PoolingDesign) -> np.ndarray:
    return np.array(
        [sum(1 << i for i in pool) for pool in design.pools], dtype=np.int64
    )


def _chunks(n: int):
    total = 1 << n
    step = 1 << min(n, _CHUNK_BITS)
    for start in range(0, total, step):
        yield np.arange(start, min(start + step, total), dtype=np.int64)


def _bits(states: np.ndarray, n: int) -> np.ndarray:
    return ((states[:, None] >> np.arange(n, dtype=np.int64)) & 1).astype(np.float64)


def _log_weights(states, n, masks, log_u, log_w, log_rho, log_1mrho):
    count = np.zeros(states.size, dtype=np.int64)
    for i in range(n):
        count += (states >> i) & 1
    lw = count * log_rho + (n - count) * log_1mrho
    for mask, lu, lv in zip(masks, log_u, log_w):
        lw += np.where(states & mask, lu, lv)
    return lw


def _check(design: PoolingDesign, outcomes: OutcomeRecord, max_patients: int) -> None:
    if design.n_patients > max_patients:
        raise OracleSizeError(
            f"{design.n_patients} patients exceeds the enumeration cap of {max_patients}"
        )
    if len(outcomes) != design.n_pools:
        raise ValueError(f"{len(outcomes)} outcomes for {design.n_pools} pools")


def _logs(outcomes: OutcomeRecord, noise: NoiseModel, rho: float):
    y = outcomes.as_array().astype(float)
    u = noise.p_tp * y + (1 - noise.p_tp) * (1 - y)
    w = noise.p_fp * y + (1 - noise.p_fp) * (1 - y)
    with np.errstate(divide="ignore"):
        return np.log(u), np.log(w), np.log(rho), np.log1p(-rho)


def _scan(design, outcomes, noise, rho, max_patients, visit):
    """Two passes over the state space: find the max log weight, then feed
    ``visit(states, weights)`` with weights scaled by it."""
    _check(design, outcomes, max_patients)
    n = design.n_patients
    masks = _pool_masks(design)
    logs = _logs(outcomes, noise, rho)
    top = -np.inf
    for states in _chunks(n):
        top = max(top, float(np.max(_log_weights(states, n, masks, *logs))))
    if not np.isfinite(top):
        raise ValueError("every configuration has zero posterior weight")
    for states in _chunks(n):
        visit(states, np.exp(_log_weights(states, n, masks, *logs) - top))
    return top


def exact_posterior(
    design: PoolingDesign,
    outcomes: OutcomeRecord,
    noise: NoiseModel,
    rho: float,
    max_patients: int = MAX_PATIENTS,
) -> ExactPosterior:
    """Posterior marginals and pair expectations by brute-force summation."""
    n = design.n_patients
    z = 0.0
    second = np.zeros((n, n))

    def visit(states, weights):
        nonlocal z
        b = _bits(states, n)
        z += float(weights.sum())
        second[:] += b.T @ (b * weights[:, None])

    top = _scan(design, outcomes, noise, rho, max_patients, visit)
    second /= z
    return ExactPosterior(np.diag(second).copy(), second, z, top)


def exact_susceptibility(post: ExactPosterior, i: int, j: int) -> float:
    if i == j:
        raise ValueError("i and j must differ")
    return float(post.pair_expectations[i, j] - post.marginals[i] * post.marginals[j])


def exact_susceptibility_matrix(post: ExactPosterior) -> np.ndarray:
    chi = post.pair_expectations - np.outer(post.marginals, post.marginals)
    np.fill_diagonal(chi, 0.0)
    return chi


def exact_pool_negative_prob(
    design: PoolingDesign,
    outcomes: OutcomeRecord,
    noise: NoiseModel,
    rho: float,
    pool: Iterable[int],
    max_patients: int = MAX_PATIENTS,
) -> float:
    """Posterior probability that every member of ``pool`` is uninfected."""
    mask = 0
    for i in pool:
        if not 0 <= int(i) < design.n_patients:
            raise IndexError(f"patient {i} out of range")
        mask |= 1 << int(i)
    z = 0.0
    hit = 0.0

    def visit(states, weights):
        nonlocal z, hit
        z += float(weights.sum())
        hit += float(weights[(states & mask) == 0].sum())

    _scan(design, outcomes, noise, rho, max_patients, visit)
    return hit / z


def exact_map(post: ExactPosterior) -> np.ndarray:
    return (post.marginals > 0.5).astype(np.int8)


def epsilon_metric(chi_exact: np.ndarray, chi_approx: np.ndarray, n: int | None = None) -> float:
    """Mean squared difference of two susceptibilities over pairs i < j.

    Accepts either full ``(n, n)`` matrices (upper triangle used) or flat
    arrays of the ``n(n-1)/2`` pair values.
    """
    a = np.asarray(chi_exact, dtype=float)
    b = np.asarray(chi_approx, dtype=float)
    if a.shape != b.shape:
        raise ValueError("susceptibilities differ in shape")
    if a.ndim == 2:
        n = a.shape[0] if n is None else n
        iu = np.triu_indices(n, k=1)
        a, b = a[iu], b[iu]
    elif n is None:
        n = int(round((1 + np.sqrt(1 + 8 * a.size)) / 2))
    pairs = n * (n - 1) / 2
    if a.size != pairs:
        raise ValueError(f"expected {pairs:.0f} pair values, got {a.size}")
    return float(np.sum((a - b) ** 2) / pairs)
