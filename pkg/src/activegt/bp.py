"""Loopy belief propagation for noisy group testing.

Messages live on the edges of the patient/pool graph and are stored as
Bernoulli parameters: ``theta_to_pool[e]`` is the probability that the patient
of edge ``e`` is infected given every test except the pool of ``e``, and
``theta_from_pool[e]`` is the normalized evidence that pool sends back.

Edges are numbered pool-major (see :attr:`PoolingDesign.edges`), so appending
a pool only appends edges; this lets a previous state warm-start a new run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numba import njit

from .graph import PoolingDesign
from .model import NoiseModel, OutcomeRecord


@dataclass(frozen=True)
class BPConfig:
    max_iterations: int = 1000
    tolerance: float = 1e-8
    damping: float = 0.0
    clamp_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if not 0.0 < self.clamp_floor < 0.5:
            raise ValueError("clamp_floor must lie in (0, 0.5)")


@dataclass
class BeliefState:
    theta_to_pool: np.ndarray
    theta_from_pool: np.ndarray
    marginals: np.ndarray
    converged: bool
    iterations_used: int


@njit(cache=True)
def _clip(v, lo, hi):
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


@njit(cache=True)
def _iterate(
    pool_ptr, edge_patient, patient_ptr, patient_edges, u, w, log_prior_odds,
    clamped, m, mt, damping, floor, max_iter, tol,
):
    n_pools = pool_ptr.size - 1
    n_patients = patient_ptr.size - 1
    hi = 1.0 - floor
    kmax = 0
    for mu in range(n_pools):
        kmax = max(kmax, pool_ptr[mu + 1] - pool_ptr[mu])
    prefix = np.empty(kmax + 1)
    dmax = 0
    for i in range(n_patients):
        dmax = max(dmax, patient_ptr[i + 1] - patient_ptr[i])
    evidence = np.empty(dmax)

    iterations = 0
    converged = False
    for it in range(max_iter):
        iterations = it + 1
        delta = 0.0

        # pool -> patient: product over the other members of P(member healthy)
        for mu in range(n_pools):
            a, b = pool_ptr[mu], pool_ptr[mu + 1]
            prefix[0] = 1.0
            for s in range(a, b):
                prefix[s - a + 1] = prefix[s - a] * (1.0 - m[s])
            suffix = 1.0
            for s in range(b - 1, a - 1, -1):
                if clamped[edge_patient[s]]:
                    new = 1.0
                else:
                    healthy = prefix[s - a] * suffix
                    z = u[mu] * (2.0 - healthy) + w[mu] * healthy
                    if z < floor:
                        z = floor
                    new = _clip(u[mu] / z, floor, hi)
                    new = (1.0 - damping) * new + damping * mt[s]
                d = abs(new - mt[s])
                if d > delta:
                    delta = d
                mt[s] = new
                suffix *= 1.0 - m[s]

        # patient -> pool: prior times evidence from the other pools, in log-odds
        for i in range(n_patients):
            a, b = patient_ptr[i], patient_ptr[i + 1]
            if clamped[i]:
                for s in range(a, b):
                    e = patient_edges[s]
                    d = abs(1.0 - m[e])
                    if d > delta:
                        delta = d
                    m[e] = 1.0
                continue
            total = 0.0
            for s in range(a, b):
                e = patient_edges[s]
                evidence[s - a] = math.log(mt[e] / (1.0 - mt[e]))
                total += evidence[s - a]
            for s in range(a, b):
                e = patient_edges[s]
                h = log_prior_odds + total - evidence[s - a]
                new = _clip(1.0 / (1.0 + math.exp(-h)), floor, hi)
                new = (1.0 - damping) * new + damping * m[e]
                d = abs(new - m[e])
                if d > delta:
                    delta = d
                m[e] = new

        if delta < tol:
            converged = True
            break

    marginals = np.empty(n_patients)
    for i in range(n_patients):
        if clamped[i]:
            marginals[i] = 1.0
            continue
        total = log_prior_odds
        for s in range(patient_ptr[i], patient_ptr[i + 1]):
            e = patient_edges[s]
            total += math.log(mt[e]) - math.log(1.0 - mt[e])
        marginals[i] = _clip(1.0 / (1.0 + math.exp(-total)), floor, hi)
    return marginals, iterations, converged


class _Graph:
    """CSR views of a design used by the kernel."""

    def __init__(self, design: PoolingDesign):
        edge_pool, edge_patient = design.edges
        self.n_edges = edge_patient.size
        self.edge_patient = edge_patient
        sizes = np.bincount(edge_pool, minlength=design.n_pools)
        self.pool_ptr = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
        self.patient_edges = np.argsort(edge_patient, kind="stable").astype(np.int64)
        degrees = np.bincount(edge_patient, minlength=design.n_patients)
        self.patient_ptr = np.concatenate(([0], np.cumsum(degrees))).astype(np.int64)


def _channel(outcomes: OutcomeRecord, noise: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    y = outcomes.as_array().astype(float)
    u = noise.p_tp * y + (1.0 - noise.p_tp) * (1.0 - y)
    w = noise.p_fp * y + (1.0 - noise.p_fp) * (1.0 - y)
    return u, w


def run_bp(
    design: PoolingDesign,
    outcomes: OutcomeRecord,
    noise: NoiseModel,
    rho: float,
    config: BPConfig = BPConfig(),
    clamps: Iterable[int] = (),
    init: BeliefState | None = None,
) -> BeliefState:
    """Iterate the BP updates to a fixed point and return messages and marginals.

    Messages start at ``theta_to_pool = rho`` and ``theta_from_pool = 0.5``.
    With ``init``, the messages of its edges (a prefix of this design's edge
    list) are copied in instead. Patients in ``clamps`` are fixed to the
    infected state: all their messages are pinned to 1 and their marginal is 1.
    """
    if len(outcomes) != design.n_pools:
        raise ValueError(f"{len(outcomes)} outcomes for {design.n_pools} pools")
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    g = _Graph(design)
    u, w = _channel(outcomes, noise)

    clamped = np.zeros(design.n_patients, dtype=np.bool_)
    for i in clamps:
        if not 0 <= i < design.n_patients:
            raise IndexError(f"clamped patient {i} out of range")
        clamped[i] = True

    m = np.full(g.n_edges, rho)
    mt = np.full(g.n_edges, 0.5)
    if init is not None:
        k = init.theta_to_pool.size
        if k > g.n_edges:
            raise ValueError("initial state has more edges than the design")
        m[:k] = init.theta_to_pool
        mt[:k] = init.theta_from_pool
    clamped_edges = clamped[g.edge_patient]
    m[clamped_edges] = 1.0
    mt[clamped_edges] = 1.0

    marginals, iterations, converged = _iterate(
        g.pool_ptr, g.edge_patient, g.patient_ptr, g.patient_edges, u, w,
        math.log(rho) - math.log1p(-rho), clamped, m, mt,
        float(config.damping), float(config.clamp_floor),
        int(config.max_iterations), float(config.tolerance),
    )
    return BeliefState(m, mt, marginals, bool(converged), int(iterations))


def map_estimate(state: BeliefState) -> np.ndarray:
    """Declare a patient infected iff its marginal exceeds one half."""
    return (np.asarray(state.marginals) > 0.5).astype(np.int8)


def conditional_marginals(
    design: PoolingDesign,
    outcomes: OutcomeRecord,
    noise: NoiseModel,
    rho: float,
    config: BPConfig,
    i: int,
    init: BeliefState | None = None,
) -> BeliefState:
    """BP state with patient ``i`` clamped infected; marginals are E[X_j | X_i=1]."""
    return run_bp(design, outcomes, noise, rho, config, clamps=(i,), init=init)


def conditional_marginal(design, outcomes, noise, rho, config, i: int, j: int) -> float:
    if i == j:
        raise ValueError("i and j must differ")
    return float(conditional_marginals(design, outcomes, noise, rho, config, i).marginals[j])


def susceptibility(design, outcomes, noise, rho, config, i: int, j: int) -> float:
    """theta_i * (theta_j given X_i=1) - theta_i * theta_j from two BP runs."""
    if i == j:
        raise ValueError("i and j must differ")
    free = run_bp(design, outcomes, noise, rho, config)
    cond = conditional_marginals(design, outcomes, noise, rho, config, i, init=free)
    ti = free.marginals[i]
    return float(ti * cond.marginals[j] - ti * free.marginals[j])


def conditional_matrix(
    design: PoolingDesign,
    outcomes: OutcomeRecord,
    noise: NoiseModel,
    rho: float,
    config: BPConfig,
    free: BeliefState | None = None,
    rows: Iterable[int] | None = None,
) -> tuple[np.ndarray, int]:
    """Row ``i`` holds BP marginals with patient ``i`` clamped.

    Each clamped run is warm-started from the unclamped fixed point ``free``.
    Rows not in ``rows`` are left as NaN. Returns the matrix and the number of
    clamped runs that did not converge.
    """
    if free is None:
        free = run_bp(design, outcomes, noise, rho, config)
    n = design.n_patients
    out = np.full((n, n), np.nan)
    failures = 0
    for i in range(n) if rows is None else rows:
        st = run_bp(design, outcomes, noise, rho, config, clamps=(i,), init=free)
        out[i] = st.marginals
        failures += not st.converged
    return out, failures


def susceptibility_matrix(
    marginals: np.ndarray, conditional: np.ndarray
) -> np.ndarray:
    """chi[i, j] = theta_i * conditional[i, j] - theta_i * theta_j; zero diagonal."""
    theta = np.asarray(marginals)
    chi = theta[:, None] * (conditional - theta[None, :])
    np.fill_diagonal(chi, 0.0)
    return chi
