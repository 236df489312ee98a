"""Experiment runner.

Verbs:

* ``resalloc run <config.json>`` — execute the configured runs, one trace
  CSV per (mode, seed) plus an aggregate ``summary.json``;
* ``resalloc sweep <config.json>`` — grid sweep over the step size or the
  contamination fraction, emitting a grid CSV;
* ``resalloc check <trace.csv>`` — recompute a stored trace's summary
  from its rows and verify the recorded bound checks.

Exit codes: 0 all checks passed, 1 configuration or I/O failure, 2 a
bound check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .attacks import apply_attack
from .config import ConfigError, RunConfig, load_config
from .engine import (
    PrimalDualState,
    StepConfig,
    estimate_lipschitz,
    reference_saddle_point,
    run_primal_dual,
)
from .problem import robust_view
from .resilient import resilient_lipschitz, resilient_reference, run_resilient
from .trace import RunTrace, contraction_coefficient, recompute_summary

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BOUND_VIOLATION = 2


def _spawned_seeds(seed: int) -> tuple:
    """Independent child seeds for attack, init, and estimator randomness."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def _initial_state(config: RunConfig, problem, seed: int) -> PrimalDualState:
    if config.init == "zeros":
        theta = np.zeros((problem.n_agents, problem.dim))
    else:
        rng = np.random.default_rng(seed)
        theta = problem.sample_feasible(rng)
    return PrimalDualState(theta, np.zeros(problem.n_constraints))


def _run_one(config: RunConfig, seed: int, mode: str | None = None,
             gamma: float | None = None, alpha: float | None = None,
             shared: dict | None = None) -> RunTrace:
    """One (mode, seed) run; ``shared`` caches per-problem expensive work."""
    mode = mode or config.mode
    alpha = config.alpha if alpha is None else alpha
    problem = config.build_problem()
    attack_seed, init_seed, rule_seed = _spawned_seeds(seed)

    if mode == "baseline":
        l_phi = estimate_lipschitz(problem)
        g = gamma or config.gamma or problem.upsilon / l_phi ** 2
        step = StepConfig(gamma=g, max_iters=config.max_iters,
                          stop_tol=config.stop_tol)
        reference = None
        if shared is not None:
            reference = shared.get("baseline_reference")
        if reference is None:
            reference = reference_saddle_point(problem)
            if shared is not None:
                shared["baseline_reference"] = reference
        init = _initial_state(config, problem, init_seed)
        return run_primal_dual(problem, init, step, reference=reference,
                               meta={"seed": seed, "l_phi": l_phi})

    view = robust_view(problem, alpha)
    plan = config.build_plan(problem.n_agents, attack_seed, alpha=alpha)
    if mode == "attacked_naive":
        rule = config.build_rule(alpha=None)
        from .aggregation import NaiveMean
        rule = NaiveMean()
    else:
        rule = config.build_rule(alpha=alpha)

    cache_key = (alpha, plan.compromised, config.scaling)
    l_phi = reference = None
    if shared is not None and cache_key in shared:
        l_phi, reference = shared[cache_key]
    if l_phi is None:
        scaling = (1.0 - alpha if config.scaling == "declared"
                   else (len(plan.honest) / plan.n_agents
                         if config.scaling == "realized" else config.scaling))
        l_phi = resilient_lipschitz(view, plan.honest, scaling)
    g = gamma or config.gamma or view.upsilon / l_phi ** 2
    step = StepConfig(gamma=g, max_iters=config.max_iters,
                      stop_tol=config.stop_tol)
    init = _initial_state(config, problem, init_seed)
    trace = run_resilient(view, init, plan, rule, step, scaling=config.scaling,
                          dual_cap=config.dual_cap, lipschitz=l_phi,
                          reference=reference, seed=rule_seed, mode=mode,
                          meta_extra={"seed": seed})
    if shared is not None and cache_key not in shared:
        shared[cache_key] = (l_phi, None)
    return trace


def execute(config: RunConfig) -> int:
    """Run every configured (mode, seed) pair and write artifacts.

    Returns the process exit code.
    """
    config.out_dir.mkdir(parents=True, exist_ok=True)
    if config.mode in ("sweep_gamma", "sweep_alpha"):
        return _execute_sweep(config)

    run_summaries = []
    all_ok = True
    shared: dict = {}
    for seed in config.seeds:
        trace = _run_one(config, seed, shared=shared)
        csv_path = config.out_dir / f"{config.mode}_seed{seed}.csv"
        trace.write(csv_path)
        entry = {"seed": seed, "csv": csv_path.name, **trace.summary}
        run_summaries.append(entry)
        ok = trace.summary.get("bound_checks_ok")
        if ok is False:
            all_ok = False
    payload = {
        "mode": config.mode,
        "alpha": config.alpha,
        "runs": run_summaries,
        "all_bound_checks_ok": all_ok,
    }
    with open(config.out_dir / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return EXIT_OK if all_ok else EXIT_BOUND_VIOLATION


def _measured_max_ratio(trace: RunTrace) -> float:
    """Largest per-iteration squared-residual ratio over the transient,
    a diagnostic to set against the analytic contraction factor."""
    r = trace.residual_sq
    window = trace.steady_window()
    hi = max(window.start, 2)
    num, den = r[1:hi], r[:hi - 1]
    valid = den > 1e-18
    if not np.any(valid):
        return float("nan")
    return float(np.max(num[valid] / den[valid]))


def _execute_sweep(config: RunConfig) -> int:
    parameter = "gamma" if config.mode == "sweep_gamma" else "alpha"
    problem = config.build_problem()

    if config.sweep_values is not None:
        values = list(config.sweep_values)
    elif parameter == "gamma":
        # default grid inside the stable range of the configured problem
        alpha = config.alpha
        view = robust_view(problem, alpha)
        plan = config.build_plan(problem.n_agents, _spawned_seeds(config.seeds[0])[0],
                                 alpha=alpha)
        scaling = 1.0 - alpha if config.scaling == "declared" else config.scaling
        l_phi = resilient_lipschitz(view, plan.honest,
                                    scaling if isinstance(scaling, float) else 1.0 - alpha)
        hi = problem.upsilon / (2.0 * l_phi ** 2)
        values = list(np.linspace(hi / 16.0, 0.98 * hi, 12))
    else:
        values = [0.1, 0.2, 0.3]

    grid_rows = []
    all_ok = True
    for value in values:
        steadies, ratios, checks = [], [], []
        shared: dict = {}
        l_phi_used = None
        for seed in config.seeds:
            if parameter == "gamma":
                trace = _run_one(config, seed, mode="resilient", gamma=value,
                                 shared=shared)
            else:
                trace = _run_one(config, seed, mode="resilient", alpha=value,
                                 shared=shared)
            steadies.append(trace.summary["steady_state_residual_sq"])
            ratios.append(_measured_max_ratio(trace))
            if trace.summary.get("recursion_all_ok") is False:
                checks.append(False)
            l_phi_used = trace.meta["l_phi"]
        if checks:
            all_ok = False
        gamma_for_factor = value if parameter == "gamma" else \
            (config.gamma or problem.upsilon / l_phi_used ** 2)
        factor = contraction_coefficient(problem.upsilon, gamma_for_factor,
                                         l_phi_used)
        grid_rows.append({
            parameter: value,
            "contraction_factor": factor,
            "steady_state_residual_sq": float(np.median(steadies)),
            "measured_max_ratio": float(np.median(ratios)),
            "l_phi": l_phi_used,
        })

    grid_path = config.out_dir / f"sweep_{parameter}.csv"
    with open(grid_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(grid_rows[0].keys()))
        writer.writeheader()
        writer.writerows(grid_rows)
    payload = {"mode": config.mode, "parameter": parameter, "grid": grid_rows,
               "all_bound_checks_ok": all_ok}
    with open(config.out_dir / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return EXIT_OK if all_ok else EXIT_BOUND_VIOLATION


def check_trace(csv_path) -> int:
    """Recompute a stored trace's summary and re-verify its checks."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        print(f"trace {csv_path} does not exist", file=sys.stderr)
        return EXIT_FAILURE
    try:
        trace = RunTrace.read(csv_path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"cannot read trace: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    fresh = recompute_summary(trace)
    stored = trace.summary
    mismatches = []
    for key, value in fresh.items():
        if key not in stored:
            mismatches.append(key)
            continue
        old = stored[key]
        if isinstance(value, float) and isinstance(old, (int, float)):
            if not np.isclose(value, old, rtol=1e-12, atol=1e-15, equal_nan=True):
                mismatches.append(key)
        elif old != value:
            mismatches.append(key)
    if mismatches:
        print(f"stored summary disagrees with rows on: {', '.join(mismatches)}",
              file=sys.stderr)
        return EXIT_FAILURE
    ok = fresh.get("bound_checks_ok")
    for key in sorted(fresh):
        print(f"{key}: {fresh[key]}")
    if ok is False:
        return EXIT_BOUND_VIOLATION
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="resalloc",
        description="attack-resilient primal-dual resource allocation runner",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute the configured runs")
    p_run.add_argument("config", type=Path)
    p_run.add_argument("--seed", type=int, action="append", default=None,
                       help="override the seed list (repeatable)")
    p_run.add_argument("--out-dir", type=Path, default=None)
    p_run.add_argument("--mode", choices=["baseline", "attacked_naive",
                                          "resilient"], default=None)

    p_sweep = sub.add_parser("sweep", help="grid sweep over gamma or alpha")
    p_sweep.add_argument("config", type=Path)
    p_sweep.add_argument("--seed", type=int, action="append", default=None)
    p_sweep.add_argument("--out-dir", type=Path, default=None)
    p_sweep.add_argument("--mode", choices=["sweep_gamma", "sweep_alpha"],
                         default=None)

    p_check = sub.add_parser("check", help="re-verify a stored trace")
    p_check.add_argument("trace", type=Path)

    args = parser.parse_args(argv)
    if args.verb == "check":
        return check_trace(args.trace)

    try:
        config = load_config(args.config)
        if args.seed:
            config.seeds = list(args.seed)
        if args.out_dir is not None:
            config.out_dir = args.out_dir
        if args.mode is not None:
            config.mode = args.mode
        if args.verb == "sweep" and config.mode not in ("sweep_gamma",
                                                        "sweep_alpha"):
            raise ConfigError("sweep requires mode sweep_gamma or sweep_alpha "
                              "(set it in the config or with --mode)")
        if args.verb == "run" and config.mode in ("sweep_gamma", "sweep_alpha"):
            raise ConfigError("run cannot execute sweep modes; use the sweep verb")
        return execute(config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
