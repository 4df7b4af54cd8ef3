"""Command-line entry point.

Commands::

    activegt trial --config cfg.json [--out result.csv] [--format csv|json]
    activegt sweep --config grid.json [--out table.csv]
    activegt validate-bp [--instances 100 --n 12 --m 8 --pool-size 4 ...]
    activegt validate-chi [--realizations 20 ...]
    activegt selftest

Configuration files are JSON objects keyed by the ExperimentConfig field
names (with ``p_tp``/``p_fp`` flat and ``bp``/``policy`` as nested objects).
For ``sweep`` every top-level list is a grid axis.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .active import (
    PoolSpace,
    SpaceKind,
    candidate_q,
    predictive_entropy,
    predictive_probability,
    q_star,
    select_next_pool,
)
from .bp import BPConfig
from .graph import InfeasibleDesignError
from .harness import (
    SweepResult,
    config_from_dict,
    expand_grid,
    run_replicated,
    susceptibility_epsilon,
    sweep,
    validate_bp,
)
from .model import NoiseModel
from .oracle import OracleSizeError

THREADS_ENV = "ACTIVEGT_THREADS"

log = logging.getLogger("activegt")


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _load_json(path: str) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def _emit(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _render(result: SweepResult, fmt: str, trials: bool) -> str:
    return result.to_csv() if fmt == "csv" else result.to_json(include_trials=trials) + "\n"


def cmd_trial(args) -> int:
    data = _load_json(args.config)
    if any(isinstance(v, list) for v in data.values()):
        raise ValueError("trial takes a single configuration; use sweep for grids")
    config = config_from_dict(data)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    row = run_replicated(config, args.threads)
    _emit(_render(SweepResult([row]), args.format, args.trials), args.out)
    print(f"bp failures: {row.bp_failures}", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    data = _load_json(args.config)
    configs = [config_from_dict(d) for d in expand_grid(data)]
    if args.seed is not None:
        configs = [replace(c, seed=args.seed) for c in configs]
    result = sweep(configs, args.threads)
    _emit(_render(result, args.format, args.trials), args.out)
    for i, row in enumerate(result.rows):
        note = f"error {row.error}" if row.error else f"bp failures {row.bp_failures}"
        print(f"row {i}: {note}", file=sys.stderr)
    return 1 if any(r.error for r in result.rows) else 0


def cmd_validate_bp(args) -> int:
    res = validate_bp(
        n=args.n, m=args.m, pool_size=args.pool_size, rho=args.rho,
        noise=NoiseModel(args.p_tp, args.p_fp), instances=args.instances,
        seed=args.seed or 0, tree=args.tree, bp=BPConfig(damping=args.damping),
    )
    print(f"instances        {res.instances}")
    print(f"max |dev|        {res.max_deviation:.3e}")
    print(f"mean |dev|       {res.mean_deviation:.3e}")
    print(f"median |dev|     {res.median_deviation:.3e}")
    print(f"MAP agreement    {res.map_agreement:.4f}")
    print(f"BP non-converged {res.bp_failures}")
    return 0


def cmd_validate_chi(args) -> int:
    bp = BPConfig(damping=args.damping)
    print("alpha  p_tp  p_fp  mean_eps   max_eps    bp_failures")
    for alpha in args.alphas:
        m = int(round(alpha * args.n))
        for p_tp, p_fp in zip(args.p_tp, args.p_fp):
            res = susceptibility_epsilon(
                args.n, m, args.pool_size, args.rho, NoiseModel(p_tp, p_fp),
                args.realizations, seed=args.seed or 0, bp=bp,
            )
            print(
                f"{res.alpha:<6g} {p_tp:<5g} {p_fp:<5g} {res.mean:.3e}  "
                f"{max(res.epsilons):.3e}  {res.bp_failures}"
            )
    return 0


def selftest(seed: int = 0, n_noise: int = 1000, n_sets: int = 1000) -> list[tuple[str, bool, str]]:
    """Analytic checks of the selection rule. Returns (name, passed, detail)."""
    rng = np.random.default_rng(seed)
    results = []

    p_fp = rng.uniform(0.0, 0.5, size=n_noise)
    p_tp = rng.uniform(0.5, 1.0, size=n_noise)
    worst = 0.0
    for a, b in zip(p_tp, p_fp):
        noise = NoiseModel(a, b)
        worst = max(worst, abs(predictive_probability(q_star(noise), noise) - 0.5))
    results.append(("fair-coin at q*", worst <= 1e-12, f"max |P(Y=1) - 0.5| = {worst:.2e}"))

    grid = np.linspace(0.0, 1.0, 10001)
    ok = True
    for a, b in zip(p_tp[:100], p_fp[:100]):
        noise = NoiseModel(a, b)
        peak = predictive_entropy(q_star(noise), noise)
        ok &= bool(np.all(predictive_entropy(grid, noise) <= peak + 1e-15))
        ok &= abs(peak - np.log(2)) < 1e-12
    results.append(("entropy peaks at q*", ok, "100 noise models, 10001-point grid"))

    mismatches = 0
    for _ in range(n_sets):
        n = int(rng.integers(2, 9))
        theta = rng.uniform(0.0, 1.0, size=n)
        noise = NoiseModel(rng.uniform(0.5, 1.0), rng.uniform(0.0, 0.5))
        space = PoolSpace(SpaceKind.P2 if rng.random() < 0.5 else SpaceKind.P1)
        chosen = select_next_pool(theta, space, noise)
        q, _ = candidate_q(theta, space)
        ent = np.where(np.isnan(q), -np.inf, predictive_entropy(np.nan_to_num(q), noise))
        i, j = chosen[0], chosen[-1]
        if not np.isclose(ent[i, j], ent.max(), rtol=0, atol=1e-15):
            mismatches += 1
    results.append(("argmin |q-q*| == argmax entropy", mismatches == 0, f"{mismatches} of {n_sets} differ"))
    return results


def cmd_selftest(args) -> int:
    results = selftest(args.seed or 0)
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return 0 if all(p for _, p, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="activegt", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("trial", cmd_trial), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default="-")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--trials", action="store_true", help="include per-trial records in JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=_default_threads())
        p.set_defaults(func=fn)

    p = sub.add_parser("validate-bp")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--pool-size", type=int, default=4)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--p-tp", type=float, default=0.95)
    p.add_argument("--p-fp", type=float, default=0.05)
    p.add_argument("--tree", action="store_true", help="disjoint pools only")
    p.add_argument("--damping", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_validate_bp)

    p = sub.add_parser("validate-chi")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--pool-size", type=int, default=10)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--alphas", type=float, nargs="+", default=[0.5, 1.0])
    p.add_argument("--p-tp", type=float, nargs="+", default=[0.95, 0.9])
    p.add_argument("--p-fp", type=float, nargs="+", default=[0.05, 0.1])
    p.add_argument("--realizations", type=int, default=20)
    p.add_argument("--damping", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_validate_chi)

    p = sub.add_parser("selftest")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_selftest)
    return parser


def parse_and_run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "validate-chi" and len(args.p_tp) != len(args.p_fp):
        parser.error("--p-tp and --p-fp need the same number of values")
    try:
        return args.func(args)
    except (ValueError, InfeasibleDesignError, OracleSizeError, OSError) as exc:
        print(f"activegt {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(parse_and_run())


if __name__ == "__main__":
    main()
