"""Pooling designs: the patient/pool incidence structure and its random generation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class InvalidPoolError(ValueError):
    """A pool refers to an unknown patient, repeats a patient, or is empty."""


class InfeasibleDesignError(ValueError):
    """The requested degree-constrained design cannot be built."""


def _normalize_pool(pool: Iterable[int], n_patients: int) -> tuple[int, ...]:
    members = [int(i) for i in pool]
    if not members:
        raise InvalidPoolError("pool is empty")
    if len(set(members)) != len(members):
        raise InvalidPoolError(f"pool {members} repeats a patient")
    for i in members:
        if not 0 <= i < n_patients:
            raise InvalidPoolError(f"patient {i} outside [0, {n_patients})")
    return tuple(sorted(members))


def pool_key(pool: Iterable[int]) -> tuple[int, ...]:
    """Order-insensitive identity of a pool."""
    return tuple(sorted(int(i) for i in pool))


@dataclass(frozen=True)
class PoolingDesign:
    """Ordered list of pools over ``n_patients`` patients.

    Each pool is stored as a sorted tuple of patient indices. Instances are
    immutable; :func:`append_pool` returns a new design.
    """

    n_patients: int
    pools: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self) -> None:
        if self.n_patients < 0:
            raise ValueError("n_patients must be non-negative")
        normalized = tuple(_normalize_pool(p, self.n_patients) for p in self.pools)
        object.__setattr__(self, "pools", normalized)

    @classmethod
    def _unchecked(cls, n_patients: int, pools: tuple[tuple[int, ...], ...]) -> "PoolingDesign":
        obj = object.__new__(cls)
        object.__setattr__(obj, "n_patients", n_patients)
        object.__setattr__(obj, "pools", pools)
        return obj

    @property
    def n_pools(self) -> int:
        return len(self.pools)

    def members(self, mu: int) -> tuple[int, ...]:
        """Patients in pool ``mu``."""
        return self.pools[mu]

    @cached_property
    def patient_pools(self) -> tuple[tuple[int, ...], ...]:
        """For every patient, the indices of the pools that contain it."""
        acc: list[list[int]] = [[] for _ in range(self.n_patients)]
        for mu, pool in enumerate(self.pools):
            for i in pool:
                acc[i].append(mu)
        return tuple(tuple(a) for a in acc)

    def pools_of(self, i: int) -> tuple[int, ...]:
        """Pools containing patient ``i``."""
        return self.patient_pools[i]

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Pool-major edge list as ``(edge_pool, edge_patient)`` int arrays."""
        sizes = np.fromiter((len(p) for p in self.pools), dtype=np.int64, count=self.n_pools)
        edge_pool = np.repeat(np.arange(self.n_pools, dtype=np.int64), sizes)
        if self.n_pools:
            edge_patient = np.fromiter(
                (i for p in self.pools for i in p), dtype=np.int64, count=int(sizes.sum())
            )
        else:
            edge_patient = np.zeros(0, dtype=np.int64)
        return edge_pool, edge_patient

    def incidence(self) -> np.ndarray:
        """Dense 0/1 matrix with one row per pool and one column per patient."""
        f = np.zeros((self.n_pools, self.n_patients), dtype=np.int8)
        edge_pool, edge_patient = self.edges
        f[edge_pool, edge_patient] = 1
        return f

    def to_dict(self) -> dict:
        return {"n_patients": self.n_patients, "pools": [list(p) for p in self.pools]}

    @classmethod
    def from_dict(cls, data: dict) -> "PoolingDesign":
        return cls(int(data["n_patients"]), tuple(tuple(p) for p in data["pools"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PoolingDesign":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class InitialDesignSpec:
    """Size parameters of the degree-constrained initial design."""

    n_patients: int
    n_pools: int
    pool_size: int

    def __post_init__(self) -> None:
        if self.n_patients <= 0 or self.n_pools <= 0 or self.pool_size <= 0:
            raise InfeasibleDesignError("n_patients, n_pools and pool_size must be positive")
        if self.pool_size > self.n_patients:
            raise InfeasibleDesignError(
                f"pool_size {self.pool_size} exceeds n_patients {self.n_patients}"
            )
        if (self.pool_size * self.n_pools) % self.n_patients:
            raise InfeasibleDesignError(
                f"patient degree {self.pool_size}*{self.n_pools}/{self.n_patients} is not an integer"
            )

    @property
    def patient_degree(self) -> int:
        return self.pool_size * self.n_pools // self.n_patients


def generate_random_design(
    spec: InitialDesignSpec, rng: np.random.Generator, repair_budget: int | None = None
) -> PoolingDesign:
    """Random design with every pool of size ``pool_size`` and every patient in
    exactly ``patient_degree`` pools.

    Patient stubs are shuffled onto pool slots (configuration model); a patient
    landing twice in one pool is repaired by swapping it with a random slot of
    another pool. Gives up after ``repair_budget`` swap attempts
    (default ``100 * n_pools``), or when no remaining duplicate can be fixed by
    a single swap.
    """
    n, m, k = spec.n_patients, spec.n_pools, spec.pool_size
    budget = 100 * m if repair_budget is None else repair_budget

    stubs = np.repeat(np.arange(n), spec.patient_degree)
    rng.shuffle(stubs)
    slots = [list(map(int, stubs[mu * k : (mu + 1) * k])) for mu in range(m)]
    counts = [dict() for _ in range(m)]
    for mu, pool in enumerate(slots):
        c = counts[mu]
        for i in pool:
            c[i] = c.get(i, 0) + 1

    def has_partner(mu: int, a: int) -> bool:
        return any(
            nu != mu and a not in counts[nu] and any(b not in counts[mu] for b in counts[nu])
            for nu in range(m)
        )

    bad = [(mu, s) for mu in range(m) for s in range(k) if counts[mu][slots[mu][s]] > 1]
    attempts = 0
    deferred = 0
    while bad:
        mu, s = bad.pop()
        a = slots[mu][s]
        if counts[mu][a] <= 1:
            continue
        if not has_partner(mu, a):
            # no single swap fixes this slot yet; other repairs may open one up
            if deferred > len(bad):
                raise InfeasibleDesignError("duplicate-patient repair is stuck")
            bad.insert(0, (mu, s))
            deferred += 1
            continue
        deferred = 0
        while True:
            if attempts >= budget:
                raise InfeasibleDesignError(
                    f"could not repair duplicate patients within {budget} swaps"
                )
            attempts += 1
            nu = int(rng.integers(m))
            t = int(rng.integers(k))
            b = slots[nu][t]
            if nu == mu or b in counts[mu] or a in counts[nu]:
                continue
            slots[mu][s], slots[nu][t] = b, a
            counts[mu][a] -= 1
            counts[mu][b] = 1
            counts[nu][b] -= 1
            if not counts[nu][b]:
                del counts[nu][b]
            counts[nu][a] = 1
            break

    return PoolingDesign(n, tuple(tuple(p) for p in slots))


def append_pool(design: PoolingDesign, pool: Iterable[int]) -> PoolingDesign:
    """New design with ``pool`` added after the existing pools."""
    new = _normalize_pool(pool, design.n_patients)
    return PoolingDesign._unchecked(design.n_patients, design.pools + (new,))


def pool_truth(x: Sequence[int] | np.ndarray, pool: Iterable[int]) -> int:
    """Noiseless pool result: 1 iff some member of ``pool`` is infected."""
    x = np.asarray(x)
    idx = np.fromiter((int(i) for i in pool), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise InvalidPoolError(f"pool {idx.tolist()} outside [0, {x.size})")
    return int(bool(np.any(x[idx])))
