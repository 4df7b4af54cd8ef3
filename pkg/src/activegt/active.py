"""Choosing the next pool by maximizing the entropy of its predicted outcome.

A candidate pool is scored through ``q``, the posterior probability that all
of its members are uninfected. The predicted outcome is positive with
probability ``p_tp (1 - q) + p_fp q``, which is exactly one half at
``q = q_star(noise)``; picking the candidate with ``q`` closest to that value
is the same as picking the one whose outcome is hardest to predict.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np
from numba import njit

from .graph import pool_key
from .model import NoiseModel


class SpaceKind(str, Enum):
    P1 = "P1"  # singletons
    P2 = "P2"  # singletons and pairs


class TieBreak(str, Enum):
    LOWEST = "lowest-lexicographic"
    RANDOM = "random"


class EmptyCandidateSetError(RuntimeError):
    pass


@dataclass(frozen=True)
class PoolSpace:
    kind: SpaceKind = SpaceKind.P1
    exclusions: frozenset = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SpaceKind(self.kind))
        object.__setattr__(
            self, "exclusions", frozenset(pool_key(p) for p in self.exclusions)
        )

    def excluding(self, pools: Iterable[Iterable[int]]) -> "PoolSpace":
        return PoolSpace(self.kind, self.exclusions | {pool_key(p) for p in pools})

    def exclusion_mask(self, n: int) -> np.ndarray:
        """``(n, n)`` boolean mask in the candidate layout of :func:`candidate_q`."""
        mask = np.zeros((n, n), dtype=np.bool_)
        for pool in self.exclusions:
            if len(pool) == 1:
                mask[pool[0], pool[0]] = True
            elif len(pool) == 2:
                mask[pool[0], pool[1]] = True
        return mask


@dataclass(frozen=True)
class SelectionPolicy:
    use_susceptibility: bool = False
    exclude_tested: bool = True
    tie_break: TieBreak = TieBreak.LOWEST

    def __post_init__(self) -> None:
        object.__setattr__(self, "tie_break", TieBreak(self.tie_break))


def q_star(noise: NoiseModel) -> float:
    """The q at which a test's outcome is a fair coin."""
    return (noise.p_tp - 0.5) / (noise.p_tp - noise.p_fp)


def onebody_pool_negative_prob(marginals, pool) -> float:
    theta = np.asarray(marginals, dtype=float)
    idx = list(pool)
    if not idx:
        raise ValueError("pool is empty")
    return float(np.prod(1.0 - theta[idx]))


def chi_corrected_pool_negative_prob(
    marginals, chi_ij: float, pool, return_clipped: bool = False
):
    """Pair probability of both members being healthy, corrected by their
    susceptibility; clipped into [0, 1]."""
    i, j = pool
    theta = np.asarray(marginals, dtype=float)
    raw = chi_ij + (1.0 - theta[i]) * (1.0 - theta[j])
    q = min(1.0, max(0.0, raw))
    if return_clipped:
        return q, q != raw
    return q


def predictive_probability(q, noise: NoiseModel):
    """Probability that a pool with all-healthy probability ``q`` tests positive."""
    return noise.p_tp * (1.0 - q) + noise.p_fp * q


def binary_entropy(p):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log(p) + (1.0 - p) * np.log1p(-p))
    h = np.where((p <= 0.0) | (p >= 1.0), 0.0, h)
    return h if h.ndim else float(h)


def predictive_entropy(q, noise: NoiseModel):
    return binary_entropy(predictive_probability(q, noise))


def candidate_q(
    marginals,
    space: PoolSpace,
    chi: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """All-healthy probabilities of every candidate, as an ``(n, n)`` matrix.

    Entry ``[i, i]`` is the singleton ``{i}`` and ``[i, j]`` with ``i < j`` the
    pair ``{i, j}``; row-major order over the upper triangle is therefore the
    lexicographic order of pool identities. Ineligible entries are NaN. When
    ``chi`` is given, pair entries use the susceptibility correction; the
    second return value counts corrections that had to be clipped.
    """
    theta = np.asarray(marginals, dtype=float)
    n = theta.size
    healthy = 1.0 - theta
    clipped = 0
    if space.kind is SpaceKind.P1:
        q = np.full((n, n), np.nan)
        np.fill_diagonal(q, healthy)
    else:
        q = np.outer(healthy, healthy)
        if chi is not None:
            q = q + chi
            upper = np.triu(np.ones((n, n), dtype=bool), k=1)
            outside = upper & ((q < 0.0) | (q > 1.0))
            clipped = int(outside.sum())
            q = np.clip(q, 0.0, 1.0)
        q[np.tril_indices(n, k=-1)] = np.nan
        np.fill_diagonal(q, healthy)
    for pool in space.exclusions:
        if len(pool) == 1:
            q[pool[0], pool[0]] = np.nan
        elif len(pool) == 2 and space.kind is SpaceKind.P2:
            q[pool[0], pool[1]] = np.nan
    return q, clipped


def _index_to_pool(flat: int, n: int) -> tuple[int, ...]:
    i, j = divmod(int(flat), n)
    return (i,) if i == j else (i, j)


def select_from_q(
    q: np.ndarray,
    noise: NoiseModel,
    tie_break: TieBreak = TieBreak.LOWEST,
    rng: np.random.Generator | None = None,
) -> tuple[int, ...]:
    """Candidate whose ``q`` is closest to :func:`q_star`; NaN entries are skipped."""
    dist = np.abs(q - q_star(noise)).ravel()
    valid = ~np.isnan(dist)
    if not valid.any():
        raise EmptyCandidateSetError("every candidate pool is excluded")
    dist[~valid] = np.inf
    best = dist.min()
    if TieBreak(tie_break) is TieBreak.LOWEST:
        return _index_to_pool(int(np.argmin(dist)), q.shape[0])
    if rng is None:
        raise ValueError("random tie-breaking needs a random generator")
    ties = np.flatnonzero(dist == best)
    return _index_to_pool(int(ties[rng.integers(ties.size)]), q.shape[0])


@njit(cache=True)
def _candidate_distance(healthy, chi, use_chi, i, j, target):
    if i == j:
        q = healthy[i]
    else:
        q = healthy[i] * healthy[j]
        if use_chi:
            q = q + chi[i, j]
            if q < 0.0:
                q = 0.0
            elif q > 1.0:
                q = 1.0
    return abs(q - target)


@njit(cache=True)
def _scan(healthy, chi, use_chi, pairs, excluded, target):
    """Best distance, the first candidate reaching it, and the count of
    clipped pair corrections, scanning candidates in lexicographic order."""
    n = healthy.size
    best = np.inf
    bi, bj = -1, -1
    clipped = 0
    for i in range(n):
        hi = healthy[i]
        if not excluded[i, i]:
            d = abs(hi - target)
            if d < best:
                best = d
                bi, bj = i, i
        if not pairs:
            continue
        row = excluded[i]
        for j in range(i + 1, n):
            q = hi * healthy[j]
            if use_chi:
                q = q + chi[i, j]
                if q < 0.0 or q > 1.0:
                    if not row[j]:
                        clipped += 1
                    q = min(1.0, max(0.0, q))
            d = abs(q - target)
            if d < best and not row[j]:
                best = d
                bi, bj = i, j
    return best, bi, bj, clipped


@njit(cache=True)
def _ties(healthy, chi, use_chi, pairs, excluded, target, best):
    n = healthy.size
    out = []
    for i in range(n):
        stop = n if pairs else i + 1
        for j in range(i, stop):
            if not excluded[i, j] and _candidate_distance(healthy, chi, use_chi, i, j, target) == best:
                out.append(i * n + j)
    return out


def scan_candidates(
    marginals,
    space: PoolSpace,
    noise: NoiseModel,
    chi: np.ndarray | None = None,
    tie_break: TieBreak = TieBreak.LOWEST,
    rng: np.random.Generator | None = None,
    excluded: np.ndarray | None = None,
) -> tuple[tuple[int, ...], int]:
    """Streaming version of ``select_from_q(candidate_q(...))``.

    Returns the selected pool and the number of clipped pair corrections.
    ``excluded`` may be passed to reuse a precomputed exclusion mask.
    """
    healthy = 1.0 - np.asarray(marginals, dtype=float)
    n = healthy.size
    if excluded is None:
        excluded = space.exclusion_mask(n)
    use_chi = chi is not None
    chi_arr = np.ascontiguousarray(chi, dtype=float) if use_chi else np.zeros((1, 1))
    pairs = space.kind is SpaceKind.P2
    target = q_star(noise)
    best, i, j, clipped = _scan(healthy, chi_arr, use_chi, pairs, excluded, target)
    if i < 0:
        raise EmptyCandidateSetError("every candidate pool is excluded")
    if TieBreak(tie_break) is TieBreak.RANDOM:
        if rng is None:
            raise ValueError("random tie-breaking needs a random generator")
        ties = _ties(healthy, chi_arr, use_chi, pairs, excluded, target, best)
        i, j = divmod(int(ties[rng.integers(len(ties))]), n)
    return ((i,) if i == j else (i, j)), clipped


def select_next_pool(
    marginals,
    space: PoolSpace,
    noise: NoiseModel,
    policy: SelectionPolicy = SelectionPolicy(),
    chi_provider: Callable[[], np.ndarray] | np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[int, ...]:
    """Pool minimizing ``|q - q_star|`` over the eligible candidates of ``space``.

    ``chi_provider`` supplies the ``(n, n)`` susceptibility matrix (or a
    callable producing it); it is consulted only for P2 with
    ``policy.use_susceptibility``.
    """
    chi = None
    if policy.use_susceptibility and space.kind is SpaceKind.P2:
        if chi_provider is None:
            raise ValueError("susceptibility-corrected selection needs chi_provider")
        chi = chi_provider() if callable(chi_provider) else np.asarray(chi_provider)
    pool, _ = scan_candidates(marginals, space, noise, chi, policy.tie_break, rng)
    return pool
