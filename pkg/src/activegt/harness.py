"""Adaptive group-testing trials, replication and parameter sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .active import (
    PoolSpace,
    SelectionPolicy,
    SpaceKind,
    scan_candidates,
)
from .bp import (
    BeliefState,
    BPConfig,
    conditional_matrix,
    map_estimate,
    run_bp,
    susceptibility_matrix,
)
from .graph import InitialDesignSpec, PoolingDesign, append_pool, generate_random_design
from .model import (
    GroundTruth,
    NoiseModel,
    OutcomeRecord,
    generate_ground_truth,
    sample_outcome_vector,
    sample_test_outcome,
)

log = logging.getLogger(__name__)

CSV_HEADER = (
    "strategy", "N", "M_ini", "M_ada", "N_G", "rho", "p_tp", "p_fp", "replications",
    "mean_tp", "se_tp", "mean_fp", "se_fp", "undefined_tp_count", "bp_failures",
)

# substream slots per replicate; strategies share all of them
_TRUTH, _DESIGN, _INITIAL_Y, _ADAPTIVE_POOLS, _ADAPTIVE_Y = range(5)


class Strategy(str, Enum):
    RANDOM = "random"
    P1 = "active-P1"
    P2 = "active-P2"
    P2_CHI = "active-P2-chi"


@dataclass(frozen=True)
class ExperimentConfig:
    n_patients: int
    m_initial: int
    m_adaptive: int
    pool_size_initial: int
    rho: float
    noise: NoiseModel
    strategy: Strategy = Strategy.P1
    bp: BPConfig = BPConfig()
    policy: SelectionPolicy = SelectionPolicy()
    replications: int = 1
    seed: int = 0
    # random strategy: draw the whole adaptive block as one degree-constrained
    # design when pool_size * m_adaptive / n_patients is integral
    random_block_constrained: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.n_patients <= 0 or self.m_initial <= 0 or self.pool_size_initial <= 0:
            raise ValueError("n_patients, m_initial and pool_size_initial must be positive")
        if self.m_adaptive < 0:
            raise ValueError("m_adaptive must be non-negative")
        if self.replications <= 0:
            raise ValueError("replications must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    @property
    def m_total(self) -> int:
        return self.m_initial + self.m_adaptive

    @property
    def alpha(self) -> float:
        return self.m_total / self.n_patients

    def stream(self, replicate: int, slot: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(replicate, slot))
        return np.random.default_rng(ss)

    def to_dict(self) -> dict:
        d = {
            "n_patients": self.n_patients,
            "m_initial": self.m_initial,
            "m_adaptive": self.m_adaptive,
            "pool_size_initial": self.pool_size_initial,
            "rho": self.rho,
            "p_tp": self.noise.p_tp,
            "p_fp": self.noise.p_fp,
            "strategy": self.strategy.value,
            "bp": asdict(self.bp),
            "policy": {
                "exclude_tested": self.policy.exclude_tested,
                "tie_break": self.policy.tie_break.value,
            },
            "replications": self.replications,
            "seed": self.seed,
            "random_block_constrained": self.random_block_constrained,
        }
        return d


@dataclass
class TrialResult:
    tp_rate: float | None
    fp_rate: float | None
    trajectory: list[tuple[int, float | None, float | None]]
    bp_convergence_failures: int
    realized_infected: int
    initial_outcomes: tuple[int, ...] = ()
    adaptive_pools: list[tuple[int, ...]] = field(default_factory=list)
    chi_clipped: int = 0
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trajectory"] = [list(t) for t in self.trajectory]
        d["adaptive_pools"] = [list(p) for p in self.adaptive_pools]
        d["initial_outcomes"] = list(self.initial_outcomes)
        return d


def compute_tp_fp(x0: GroundTruth | np.ndarray, x_hat) -> tuple[float | None, float | None]:
    """True- and false-positive rates of an estimate; ``None`` when a rate's
    denominator is zero."""
    truth = np.asarray(x0.x0 if isinstance(x0, GroundTruth) else x0, dtype=np.int64)
    est = np.asarray(x_hat, dtype=np.int64)
    if truth.shape != est.shape:
        raise ValueError("x0 and x_hat differ in length")
    pos = int(truth.sum())
    neg = truth.size - pos
    tp = float((truth * est).sum() / pos) if pos else None
    fp = float(((1 - truth) * est).sum() / neg) if neg else None
    return tp, fp


def _infer(design, outcomes, config: ExperimentConfig, init=None) -> BeliefState:
    if config.rho in (0.0, 1.0):
        # degenerate prior: the posterior equals the prior whatever the tests say
        n = design.n_patients
        return BeliefState(
            np.zeros(0), np.zeros(0), np.full(n, config.rho), True, 0
        )
    return run_bp(design, outcomes, config.noise, config.rho, config.bp, init=init)


def _adaptive_random_pools(config: ExperimentConfig, rng: np.random.Generator):
    n, k, m = config.n_patients, config.pool_size_initial, config.m_adaptive
    if config.random_block_constrained and m and (k * m) % n == 0 and k <= n:
        block = generate_random_design(InitialDesignSpec(n, m, k), rng)
        return list(block.pools)
    return [tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False))) for _ in range(m)]


def initial_stage(config: ExperimentConfig, replicate: int):
    """Ground truth, initial design and initial outcomes of one replicate."""
    x0 = generate_ground_truth(config.n_patients, config.rho, config.stream(replicate, _TRUTH))
    spec = InitialDesignSpec(config.n_patients, config.m_initial, config.pool_size_initial)
    design = generate_random_design(spec, config.stream(replicate, _DESIGN))
    y = sample_outcome_vector(x0, design, config.noise, config.stream(replicate, _INITIAL_Y))
    return x0, design, y


def run_trial(config: ExperimentConfig, replicate: int = 0) -> TrialResult:
    """One run of the initial stage followed by ``m_adaptive`` sequential tests.

    All randomness comes from substreams keyed by ``(config.seed, replicate)``;
    the strategy never enters the key, so strategies compared on the same
    replicate see the same patients, initial pools and initial outcomes.
    """
    start = time.perf_counter()
    x0, design, y = initial_stage(config, replicate)
    initial_y = y.y
    state = _infer(design, y, config)
    failures = int(not state.converged)
    trajectory = [(design.n_pools, *compute_tp_fp(x0, map_estimate(state)))]

    pool_rng = config.stream(replicate, _ADAPTIVE_POOLS)
    outcome_rng = config.stream(replicate, _ADAPTIVE_Y)
    strategy = config.strategy
    random_pools = _adaptive_random_pools(config, pool_rng) if strategy is Strategy.RANDOM else None
    kind = SpaceKind.P1 if strategy is Strategy.P1 else SpaceKind.P2
    space = PoolSpace(kind)
    if config.policy.exclude_tested:
        space = space.excluding(p for p in design.pools if len(p) <= 2)
    excluded = space.exclusion_mask(config.n_patients)

    chosen: list[tuple[int, ...]] = []
    chi_clipped = 0
    for step in range(config.m_adaptive):
        if random_pools is not None:
            pool = random_pools[step]
        else:
            chi = None
            if strategy is Strategy.P2_CHI and config.rho not in (0.0, 1.0):
                cond, cond_failures = conditional_matrix(
                    design, y, config.noise, config.rho, config.bp, free=state
                )
                failures += cond_failures
                chi = susceptibility_matrix(state.marginals, cond)
            pool, clipped = scan_candidates(
                state.marginals, space, config.noise, chi,
                config.policy.tie_break, pool_rng, excluded,
            )
            chi_clipped += clipped
        bit = sample_test_outcome(x0, pool, config.noise, outcome_rng)
        design = append_pool(design, pool)
        y = y.append(bit)
        chosen.append(tuple(pool))
        if config.policy.exclude_tested and len(pool) <= 2:
            excluded[pool[0], pool[-1]] = True
        state = _infer(design, y, config)
        failures += not state.converged
        trajectory.append((design.n_pools, *compute_tp_fp(x0, map_estimate(state))))

    tp, fp = trajectory[-1][1], trajectory[-1][2]
    return TrialResult(
        tp, fp, trajectory, failures, x0.n_infected, initial_y, chosen, chi_clipped,
        time.perf_counter() - start,
    )


def _mean_se(values: Sequence[float | None]) -> tuple[float | None, float | None, int]:
    defined = np.array([v for v in values if v is not None], dtype=float)
    undefined = len(values) - defined.size
    if defined.size == 0:
        return None, None, undefined
    mean = float(defined.mean())
    se = float(defined.std(ddof=1) / math.sqrt(defined.size)) if defined.size > 1 else None
    return mean, se, undefined


@dataclass
class SweepRow:
    config: ExperimentConfig
    mean_tp: float | None = None
    se_tp: float | None = None
    mean_fp: float | None = None
    se_fp: float | None = None
    undefined_tp_count: int = 0
    undefined_fp_count: int = 0
    bp_failures: int = 0
    replications: int = 0
    # per adaptive step: (M, mean_tp, se_tp, mean_fp, se_fp)
    trajectory: list[tuple] = field(default_factory=list)
    trials: list[TrialResult] = field(default_factory=list)
    error: str | None = None

    def csv_values(self) -> list:
        c = self.config
        return [
            c.strategy.value, c.n_patients, c.m_initial, c.m_adaptive, c.pool_size_initial,
            c.rho, c.noise.p_tp, c.noise.p_fp, self.replications,
            self.mean_tp, self.se_tp, self.mean_fp, self.se_fp,
            self.undefined_tp_count, self.bp_failures,
        ]

    def to_dict(self, include_trials: bool = False) -> dict:
        d = {
            "config": self.config.to_dict(),
            "alpha": self.config.alpha,
            "mean_tp": self.mean_tp, "se_tp": self.se_tp,
            "mean_fp": self.mean_fp, "se_fp": self.se_fp,
            "undefined_tp_count": self.undefined_tp_count,
            "undefined_fp_count": self.undefined_fp_count,
            "bp_failures": self.bp_failures,
            "replications": self.replications,
            "trajectory": [list(t) for t in self.trajectory],
            "error": self.error,
        }
        if include_trials:
            d["trials"] = [t.to_dict() for t in self.trials]
        return d

    def tp_curve(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Test counts, mean TP and its standard error along the adaptive stage."""
        m = np.array([t[0] for t in self.trajectory])
        tp = np.array([np.nan if t[1] is None else t[1] for t in self.trajectory])
        se = np.array([np.nan if t[2] is None else t[2] for t in self.trajectory])
        return m, tp, se


def aggregate(config: ExperimentConfig, trials: Sequence[TrialResult]) -> SweepRow:
    mean_tp, se_tp, undef_tp = _mean_se([t.tp_rate for t in trials])
    mean_fp, se_fp, undef_fp = _mean_se([t.fp_rate for t in trials])
    steps = len(trials[0].trajectory)
    trajectory = []
    for s in range(steps):
        tp = _mean_se([t.trajectory[s][1] for t in trials])
        fp = _mean_se([t.trajectory[s][2] for t in trials])
        trajectory.append((trials[0].trajectory[s][0], tp[0], tp[1], fp[0], fp[1]))
    return SweepRow(
        config, mean_tp, se_tp, mean_fp, se_fp, undef_tp, undef_fp,
        sum(t.bp_convergence_failures for t in trials), len(trials), trajectory, list(trials),
    )


def _trial_job(args):
    config, r = args
    return run_trial(config, r)


def run_replicated(config: ExperimentConfig, threads: int = 1) -> SweepRow:
    """Run ``config.replications`` paired trials and aggregate them."""
    jobs = [(config, r) for r in range(config.replications)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            trials = list(pool.map(_trial_job, jobs))
    else:
        trials = [_trial_job(j) for j in jobs]
    row = aggregate(config, trials)
    log.info(
        "%s N=%d rho=%g: TP=%s FP=%s bp_failures=%d",
        config.strategy.value, config.n_patients, config.rho,
        row.mean_tp, row.mean_fp, row.bp_failures,
    )
    return row


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow(["nan" if v is None else v for v in row.csv_values()])
        return buf.getvalue()

    def to_json(self, include_trials: bool = False) -> str:
        return json.dumps(
            {"rows": [r.to_dict(include_trials) for r in self.rows]}, indent=1
        )


def sweep(grid: Iterable[ExperimentConfig], threads: int = 1) -> SweepResult:
    """One aggregated row per configuration, in grid order. A configuration
    that raises yields a row carrying the error instead of aborting the sweep."""
    configs = list(grid)
    if not configs:
        raise ValueError("empty grid")
    rows = []
    for config in configs:
        try:
            rows.append(run_replicated(config, threads))
        except Exception as exc:  # recorded per row; the sweep carries on
            log.error("configuration failed: %s", exc)
            rows.append(SweepRow(config, error=f"{type(exc).__name__}: {exc}"))
    return SweepResult(rows)


def with_strategy(config: ExperimentConfig, strategy: Strategy | str) -> ExperimentConfig:
    return replace(config, strategy=Strategy(strategy))


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a configuration from the flat JSON layout used by the CLI."""
    known = {
        "n_patients", "m_initial", "m_adaptive", "pool_size_initial", "rho", "p_tp", "p_fp",
        "strategy", "bp", "policy", "replications", "seed", "random_block_constrained",
    }
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
    missing = {"n_patients", "m_initial", "m_adaptive", "pool_size_initial", "rho", "p_tp", "p_fp"} - set(data)
    if missing:
        raise ValueError(f"missing configuration keys: {sorted(missing)}")
    return ExperimentConfig(
        n_patients=int(data["n_patients"]),
        m_initial=int(data["m_initial"]),
        m_adaptive=int(data["m_adaptive"]),
        pool_size_initial=int(data["pool_size_initial"]),
        rho=float(data["rho"]),
        noise=NoiseModel(float(data["p_tp"]), float(data["p_fp"])),
        strategy=Strategy(data.get("strategy", Strategy.P1.value)),
        bp=BPConfig(**data.get("bp", {})),
        policy=SelectionPolicy(**data.get("policy", {})),
        replications=int(data.get("replications", 1)),
        seed=int(data.get("seed", 0)),
        random_block_constrained=bool(data.get("random_block_constrained", True)),
    )


def expand_grid(data: dict) -> list[dict]:
    """Cartesian product over every top-level key whose value is a list.

    Keys vary in file order, the last key fastest.
    """
    keys = list(data)
    grid: list[dict] = [{}]
    for key in keys:
        value = data[key]
        options = value if isinstance(value, list) else [value]
        if not options:
            raise ValueError(f"empty grid axis {key!r}")
        grid = [{**g, key: v} for g in grid for v in options]
    return grid


@dataclass
class BPValidation:
    max_deviation: float
    mean_deviation: float
    median_deviation: float
    map_agreement: float
    instances: int
    bp_failures: int


def random_pool_design(
    n: int, m: int, pool_size: int, rng: np.random.Generator
) -> PoolingDesign:
    """``m`` pools of ``pool_size`` distinct patients each, drawn independently."""
    pools = [tuple(sorted(rng.choice(n, size=pool_size, replace=False).tolist())) for _ in range(m)]
    return PoolingDesign(n, tuple(pools))


def validate_bp(
    n: int = 12,
    m: int = 8,
    pool_size: int = 4,
    rho: float = 0.1,
    noise: NoiseModel = NoiseModel(0.95, 0.05),
    instances: int = 100,
    seed: int = 0,
    bp: BPConfig = BPConfig(),
    tree: bool = False,
) -> BPValidation:
    """Compare BP marginals with exact enumeration on random small instances.

    With ``tree=True`` pools are disjoint, so the factor graph is a forest;
    ``pool_size`` and ``m`` then act as upper bounds.
    """
    from .oracle import exact_map, exact_posterior

    rng = np.random.default_rng(seed)
    deviations = []
    agree = 0
    failures = 0
    for _ in range(instances):
        x0 = generate_ground_truth(n, rho, rng)
        if tree:
            perm = rng.permutation(n)
            sizes = rng.integers(1, pool_size + 1, size=m)
            pools, start = [], 0
            for s in sizes:
                if start + s > n:
                    break
                pools.append(tuple(sorted(perm[start:start + s].tolist())))
                start += s
            design = PoolingDesign(n, tuple(pools))
        else:
            design = random_pool_design(n, m, pool_size, rng)
        y = sample_outcome_vector(x0, design, noise, rng)
        state = run_bp(design, y, noise, rho, bp)
        failures += not state.converged
        post = exact_posterior(design, y, noise, rho)
        deviations.append(np.abs(state.marginals - post.marginals))
        agree += int((map_estimate(state) == exact_map(post)).sum())
    dev = np.concatenate(deviations)
    return BPValidation(
        float(dev.max()), float(dev.mean()), float(np.median(dev)),
        agree / (instances * n), instances, failures,
    )


@dataclass
class EpsilonResult:
    alpha: float
    p_tp: float
    p_fp: float
    epsilons: list[float]
    bp_failures: int = 0  # free and clamped runs that hit max_iter

    @property
    def mean(self) -> float:
        return float(np.mean(self.epsilons))


def susceptibility_epsilon(
    n: int,
    m: int,
    pool_size: int,
    rho: float,
    noise: NoiseModel,
    realizations: int,
    seed: int = 0,
    bp: BPConfig = BPConfig(),
) -> EpsilonResult:
    """Mean squared gap between BP (clamping) and exact susceptibilities over
    random degree-constrained instances."""
    from .oracle import epsilon_metric, exact_posterior, exact_susceptibility_matrix

    eps = []
    failures = 0
    for r in range(realizations):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
        x0 = generate_ground_truth(n, rho, rng)
        design = generate_random_design(InitialDesignSpec(n, m, pool_size), rng)
        y = sample_outcome_vector(x0, design, noise, rng)
        free = run_bp(design, y, noise, rho, bp)
        cond, cond_failures = conditional_matrix(design, y, noise, rho, bp, free=free)
        failures += cond_failures + (not free.converged)
        chi_bp = susceptibility_matrix(free.marginals, cond)
        chi_exact = exact_susceptibility_matrix(exact_posterior(design, y, noise, rho))
        eps.append(epsilon_metric(chi_exact, chi_bp, n))
    return EpsilonResult(m / n, noise.p_tp, noise.p_fp, eps, failures)
