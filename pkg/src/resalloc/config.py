"""Run configuration: JSON schema, eager validation, object construction.

A configuration is a single JSON document.  Field-level validation
happens at load time so a bad experiment fails before any run starts,
with the offending field named in the error.  See the repository README
for the full schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import FilterRule, MedianNeighborhood, NaiveMean
from .attacks import (
    AttackPlan,
    CoordinatedShift,
    LargeRandom,
    SignFlip,
    StaleReplay,
)
from .fixtures import FIXTURE_NAMES, build_fixture
from .problem import (
    AllocationProblem,
    Ball,
    Box,
    LogUtility,
    QuadraticUtility,
    affine_constraint,
    quadratic_constraint,
)

__all__ = ["ConfigError", "RunConfig", "load_config"]

MODES = ("baseline", "attacked_naive", "resilient", "sweep_gamma", "sweep_alpha")


class ConfigError(ValueError):
    """A configuration field is missing or out of range."""


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def _get(data: dict, key: str, default=None, required: bool = False):
    if required and key not in data:
        raise ConfigError(f"missing required field {key!r}")
    return data.get(key, default)


@dataclass(eq=False)
class RunConfig:
    """Validated experiment description."""

    mode: str
    seeds: list
    out_dir: Path
    problem_spec: dict
    alpha: float
    attack_spec: dict
    rule_spec: dict
    gamma: float | None
    max_iters: int
    stop_tol: float
    scaling: str
    dual_cap: object
    init: str
    sweep_values: list | None = None
    source: Path | None = None

    # -- construction of concrete objects -----------------------------------

    def build_problem(self) -> AllocationProblem:
        spec = self.problem_spec
        if "fixture" in spec:
            fixture = build_fixture(spec["fixture"], seed=int(spec.get("seed", 0)),
                                    alpha=self.alpha)
            return fixture.problem
        return _problem_from_inline(spec["inline"])

    def build_rule(self, alpha: float | None = None):
        spec = dict(self.rule_spec)
        kind = spec.get("kind", "median_neighborhood")
        a = float(spec.get("alpha", self.alpha if alpha is None else alpha))
        if alpha is not None:
            a = alpha
        if kind == "naive_mean":
            return NaiveMean()
        if kind == "median_neighborhood":
            return MedianNeighborhood(alpha=a)
        if kind == "filter":
            sigma = spec.get("sigma")
            return FilterRule(alpha=a, sigma=None if sigma is None else float(sigma),
                              budget=int(spec.get("budget", 40)))
        raise ConfigError(f"rule.kind must be one of naive_mean, "
                          f"median_neighborhood, filter; got {kind!r}")

    def build_plan(self, n_agents: int, seed: int,
                   alpha: float | None = None) -> AttackPlan:
        spec = self.attack_spec
        a = self.alpha if alpha is None else alpha
        strategy = _strategy_from_spec(spec)
        members = spec.get("members")
        if members is not None:
            return AttackPlan(n_agents=n_agents, alpha=a,
                              compromised=tuple(int(i) for i in members),
                              strategy=strategy, seed=seed)
        count = spec.get("count")
        count = int(round(a * n_agents)) if count is None else int(count)
        return AttackPlan.sampled(n_agents, a, strategy, seed=seed, count=count)


def _strategy_from_spec(spec: dict):
    name = spec.get("strategy", "large_random")
    if name == "large_random":
        return LargeRandom(magnitude=float(_get(spec, "magnitude", required=True)))
    if name == "sign_flip":
        return SignFlip(scale=float(spec.get("scale", 1.0)))
    if name == "coordinated_shift":
        target = _get(spec, "target", required=True)
        return CoordinatedShift(target=np.asarray(target, dtype=float))
    if name == "stale_replay":
        return StaleReplay(delay=int(_get(spec, "delay", required=True)))
    raise ConfigError(
        f"attack.strategy must be one of large_random, sign_flip, "
        f"coordinated_shift, stale_replay; got {name!r}"
    )


def _utility_from_spec(spec: dict, where: str):
    kind = _get(spec, "kind", required=True)
    if kind == "quadratic":
        return QuadraticUtility(
            curvature=float(_get(spec, "curvature", required=True)),
            target=np.asarray(_get(spec, "target", required=True), dtype=float),
            offset=float(spec.get("offset", 0.0)),
        )
    if kind == "log":
        return LogUtility(weight=float(_get(spec, "weight", required=True)),
                          shift=float(spec.get("shift", 1.0)))
    raise ConfigError(f"{where}.utility.kind must be quadratic or log, got {kind!r}")


def _set_from_spec(spec: dict, where: str):
    kind = _get(spec, "kind", required=True)
    if kind == "box":
        return Box(lower=np.asarray(_get(spec, "lower", required=True), dtype=float),
                   upper=np.asarray(_get(spec, "upper", required=True), dtype=float))
    if kind == "ball":
        return Ball(center=np.asarray(_get(spec, "center", required=True), dtype=float),
                    radius=float(_get(spec, "radius", required=True)))
    raise ConfigError(f"{where}.set.kind must be box or ball, got {kind!r}")


def _problem_from_inline(spec: dict) -> AllocationProblem:
    upsilon = float(_get(spec, "upsilon", required=True))
    diameter = float(_get(spec, "diameter_bound", required=True))
    agents = _get(spec, "agents", required=True)
    _require(isinstance(agents, list) and agents, "problem.inline.agents must be "
             "a non-empty list")
    utilities, sets = [], []
    for i, agent in enumerate(agents):
        where = f"problem.inline.agents[{i}]"
        utilities.append(_utility_from_spec(_get(agent, "utility", required=True), where))
        sets.append(_set_from_spec(_get(agent, "set", required=True), where))
    constraints = []
    for j, cons in enumerate(spec.get("constraints", [])):
        where = f"problem.inline.constraints[{j}]"
        kind = _get(cons, "kind", required=True)
        if kind == "affine":
            constraints.append(affine_constraint(
                np.asarray(_get(cons, "weights", required=True), dtype=float),
                cap=float(_get(cons, "cap", required=True))))
        elif kind == "quadratic":
            center = cons.get("center")
            constraints.append(quadratic_constraint(
                float(_get(cons, "curvature", required=True)),
                np.asarray(_get(cons, "weights", required=True), dtype=float),
                cap=float(_get(cons, "cap", required=True)),
                region_radius=5.0 * diameter,
                center=None if center is None else np.asarray(center, dtype=float)))
        else:
            raise ConfigError(f"{where}.kind must be affine or quadratic, got {kind!r}")
    try:
        return AllocationProblem(utilities=utilities, constraints=constraints,
                                 sets=sets, upsilon=upsilon,
                                 diameter_bound=diameter)
    except ValueError as exc:
        raise ConfigError(f"problem.inline: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse and eagerly validate a JSON run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    mode = _get(data, "mode", "resilient")
    _require(mode in MODES, f"mode must be one of {MODES}, got {mode!r}")

    seeds = _get(data, "seeds", [0])
    _require(isinstance(seeds, list) and len(seeds) >= 1,
             "seeds must be a non-empty list of integers")
    seeds = [int(s) for s in seeds]

    alpha = float(_get(data, "alpha", 0.0))
    _require(0.0 <= alpha < 0.5, "alpha must be < 0.5")

    problem_spec = _get(data, "problem", required=True)
    if "fixture" in problem_spec:
        _require(problem_spec["fixture"] in FIXTURE_NAMES,
                 f"problem.fixture must be one of {FIXTURE_NAMES}")
    elif "inline" in problem_spec:
        _problem_from_inline(problem_spec["inline"])  # validate eagerly
    elif "path" in problem_spec:
        inline_path = Path(problem_spec["path"])
        if not inline_path.is_absolute():
            inline_path = path.parent / inline_path
        _require(inline_path.exists(),
                 f"problem.path {inline_path} does not exist")
        with open(inline_path) as fh:
            problem_spec = {"inline": json.load(fh)}
        _problem_from_inline(problem_spec["inline"])
    else:
        raise ConfigError("problem must give one of fixture, inline, path")

    rule_spec = _get(data, "rule", {"kind": "median_neighborhood"})
    kind = rule_spec.get("kind", "median_neighborhood")
    rule_alpha = float(rule_spec.get("alpha", alpha))
    if kind == "median_neighborhood" and mode in ("resilient", "sweep_gamma"):
        _require(0.0 < rule_alpha < 0.5,
                 "rule.alpha must be in (0, 0.5) for the median rule")
    if kind == "filter":
        _require(0.0 <= rule_alpha < 0.25,
                 "rule.alpha must be < 0.25 for the filter rule "
                 "(its guarantee only covers contamination below one quarter)")

    attack_spec = _get(data, "attack", {"strategy": "large_random",
                                        "magnitude": 100.0})
    if mode != "baseline":
        _strategy_from_spec(attack_spec)  # validate eagerly
        members = attack_spec.get("members")
        if members is not None:
            _require(len(members) <= alpha * _n_agents_hint(problem_spec) + 1e-9,
                     "attack.members exceeds the declared alpha fraction")

    step = _get(data, "step", {})
    gamma = step.get("gamma")
    gamma = None if gamma is None else float(gamma)
    if gamma is not None:
        _require(gamma > 0.0, "step.gamma must be positive")
    max_iters = int(step.get("max_iters", 500))
    _require(max_iters >= 1, "step.max_iters must be at least 1")
    stop_tol = float(step.get("stop_tol", 0.0))
    _require(stop_tol >= 0.0, "step.stop_tol must be nonnegative")

    scaling = _get(data, "scaling", "declared")
    if scaling not in ("declared", "realized"):
        try:
            scaling = float(scaling)
        except (TypeError, ValueError):
            raise ConfigError("scaling must be 'declared', 'realized', or a "
                              "number in (0.5, 1]")
        _require(0.5 < scaling <= 1.0, "scaling must lie in (0.5, 1]")

    dual_cap = _get(data, "dual_cap", "auto")
    if dual_cap not in ("auto", None):
        dual_cap = float(dual_cap)
        _require(dual_cap > 0.0, "dual_cap must be positive")

    init = _get(data, "init", "zeros")
    _require(init in ("zeros", "random"), "init must be zeros or random")

    sweep_values = None
    if mode in ("sweep_gamma", "sweep_alpha"):
        sweep = _get(data, "sweep", {})
        sweep_values = sweep.get("values")
        if sweep_values is not None:
            _require(isinstance(sweep_values, list) and len(sweep_values) >= 2,
                     "sweep.values must list at least two grid points")
            sweep_values = [float(v) for v in sweep_values]
            if mode == "sweep_alpha":
                _require(all(0.0 < v < 0.5 for v in sweep_values),
                         "sweep.values for alpha must lie in (0, 0.5)")

    out_dir = Path(_get(data, "out_dir", "runs"))
    if not out_dir.is_absolute():
        out_dir = path.parent / out_dir

    return RunConfig(
        mode=mode, seeds=seeds, out_dir=out_dir, problem_spec=problem_spec,
        alpha=alpha, attack_spec=attack_spec, rule_spec=rule_spec,
        gamma=gamma, max_iters=max_iters, stop_tol=stop_tol, scaling=scaling,
        dual_cap=dual_cap, init=init, sweep_values=sweep_values, source=path,
    )


def _n_agents_hint(problem_spec: dict) -> int:
    if "fixture" in problem_spec:
        return {"demand_response": 20, "data_network": 10,
                "unit_test_small": 5}[problem_spec["fixture"]]
    return len(problem_spec["inline"]["agents"])
