"""Canonical problem instances used by the CLI and the test harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import (
    AttackPlan,
    AttackStrategy,
    CoordinatedShift,
    LargeRandom,
    SignFlip,
)
from .engine import PrimalDualState, saddle_jacobian
from .problem import (
    AllocationProblem,
    Box,
    LogUtility,
    QuadraticUtility,
    affine_constraint,
    quadratic_constraint,
)

__all__ = ["Fixture", "build_fixture", "random_quadratic_problem", "FIXTURE_NAMES"]

FIXTURE_NAMES = ("demand_response", "data_network", "unit_test_small")


@dataclass(frozen=True, eq=False)
class Fixture:
    """A problem instance, a default attack plan, and an initial state."""

    problem: AllocationProblem
    plan: AttackPlan
    init: PrimalDualState


def _demand_response(seed: int, alpha: float, strategy) -> Fixture:
    """Price-responsive appliances: 20 agents, 2-dimensional setpoints in
    unit boxes, quadratic comfort costs with positively biased targets, a
    linear capacity constraint plus a convex quadratic one.

    Utility curvature is drawn high enough that the saddle map stays
    strongly monotone at the regularization level even with 20 agents
    averaging the quadratic terms down.
    """
    rng = np.random.default_rng([seed, 0xD3])
    n, d = 20, 2
    upsilon = 0.5
    diameter = 3.0
    sets = tuple(Box(lower=-np.ones(d), upper=np.ones(d)) for _ in range(n))
    utilities = tuple(
        QuadraticUtility(
            curvature=float(rng.uniform(5.0, 7.0)),
            target=rng.uniform(0.05, 0.95, size=d),
        )
        for _ in range(n)
    )
    w = np.full(d, 1.0 / np.sqrt(d))
    constraints = (
        affine_constraint(w, cap=1.1, label="capacity"),
        quadratic_constraint(0.1, 0.35 * np.ones(d), cap=3.8,
                             region_radius=5.0 * diameter, label="loss"),
    )
    problem = AllocationProblem(utilities=utilities, constraints=constraints,
                                sets=sets, upsilon=upsilon,
                                diameter_bound=diameter)
    plan = AttackPlan.sampled(n, alpha, strategy or LargeRandom(50.0),
                              seed=seed)
    init = PrimalDualState(np.zeros((n, d)), np.zeros(len(constraints)))
    return Fixture(problem=problem, plan=plan, init=init)


def _data_network(seed: int, alpha: float, strategy) -> Fixture:
    """Rate control: 10 flows, scalar rates in ``[0, 3]``, shifted-log
    disutilities (convex, decreasing on the positive orthant), one linear
    link-capacity constraint."""
    rng = np.random.default_rng([seed, 0xDA])
    n, d = 10, 1
    sets = tuple(Box(lower=np.zeros(d), upper=3.0 * np.ones(d)) for _ in range(n))
    utilities = tuple(
        LogUtility(weight=float(rng.uniform(1.0, 2.0)), shift=1.0)
        for _ in range(n)
    )
    constraints = (affine_constraint(np.ones(d), cap=1.5, label="link"),)
    problem = AllocationProblem(utilities=utilities, constraints=constraints,
                                sets=sets, upsilon=0.5, diameter_bound=3.0)
    plan = AttackPlan.sampled(n, alpha, strategy or SignFlip(1.0), seed=seed)
    init = PrimalDualState(np.zeros((n, d)), np.zeros(1))
    return Fixture(problem=problem, plan=plan, init=init)


def _unit_test_small(seed: int, alpha: float, strategy) -> Fixture:
    """The tiny instance shared across the unit suite: five scalar agents
    whose honest starting values are ``0, 1, 2, 3`` with channel 4
    compromised."""
    n, d = 5, 1
    sets = tuple(Box(lower=-5.0 * np.ones(d), upper=5.0 * np.ones(d))
                 for _ in range(n))
    start = np.array([[0.0], [1.0], [2.0], [3.0], [2.0]])
    utilities = tuple(
        QuadraticUtility(curvature=1.0, target=start[i].copy()) for i in range(n)
    )
    constraints = (affine_constraint(np.ones(d), cap=2.0, label="budget"),)
    problem = AllocationProblem(utilities=utilities, constraints=constraints,
                                sets=sets, upsilon=0.5, diameter_bound=10.0)
    plan = AttackPlan(n_agents=n, alpha=alpha, compromised=(4,),
                      strategy=strategy or CoordinatedShift(np.array([100.0])),
                      seed=seed)
    init = PrimalDualState(start, np.zeros(1))
    return Fixture(problem=problem, plan=plan, init=init)


def build_fixture(name: str, seed: int = 0, alpha: float = 0.2,
                  strategy: AttackStrategy | None = None) -> Fixture:
    """Build one of the named instances, reproducibly in ``seed``."""
    builders = {
        "demand_response": _demand_response,
        "data_network": _data_network,
        "unit_test_small": _unit_test_small,
    }
    if name not in builders:
        raise ValueError(f"unknown fixture {name!r}; choose from {FIXTURE_NAMES}")
    return builders[name](seed, alpha, strategy)


def random_quadratic_problem(seed: int, n_agents: int | None = None,
                             dim: int | None = None,
                             n_constraints: int | None = None,
                             ratio_max: float = 0.12) -> AllocationProblem:
    """Random quadratic-utility instance with affine constraints.

    Used wherever an exactly linearizable saddle map is needed.  Utility
    curvatures are drawn high enough that the map's strong-monotonicity
    modulus is at least the regularization weight, and constraint weights
    are scaled up until ``upsilon / L`` drops below ``ratio_max`` so that
    500-iteration contraction tests stay far from the floating-point
    floor.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 21)) if n_agents is None else n_agents
    d = int(rng.integers(1, 6)) if dim is None else dim
    t = int(rng.integers(1, 4)) if n_constraints is None else n_constraints
    upsilon = float(rng.uniform(0.3, 0.7))

    lowers = -rng.uniform(0.5, 1.5, size=d)
    uppers = rng.uniform(0.5, 1.5, size=d)
    sets = tuple(Box(lower=lowers.copy(), upper=uppers.copy()) for _ in range(n))
    diameter = float(np.linalg.norm(uppers - lowers)) * 1.05

    # (2 b + upsilon) / n >= upsilon keeps the averaged quadratic blocks
    # at least as strongly monotone as the regularizer
    b_floor = 0.5 * (n - 1) * upsilon
    utilities = tuple(
        QuadraticUtility(
            curvature=float(b_floor * rng.uniform(1.05, 1.6) + 0.05),
            target=rng.uniform(0.7 * lowers, 0.7 * uppers),
        )
        for _ in range(n)
    )
    target_mean = np.mean([u.target for u in utilities], axis=0)

    def make(scale: float) -> AllocationProblem:
        constraints = []
        for j in range(t):
            w = weights_raw[j] * scale
            cap = float(w @ target_mean * rng_caps[j])
            constraints.append(affine_constraint(w, cap=cap))
        return AllocationProblem(utilities=utilities, constraints=constraints,
                                 sets=sets, upsilon=upsilon,
                                 diameter_bound=diameter)

    weights_raw = [rng.normal(size=d) for _ in range(t)]
    weights_raw = [w / max(np.linalg.norm(w), 1e-9) for w in weights_raw]
    rng_caps = rng.uniform(0.3, 1.3, size=t)
    scale = 1.0
    problem = make(scale)
    for _ in range(48):
        l_phi = float(np.linalg.norm(saddle_jacobian(problem), ord=2))
        if upsilon / l_phi <= ratio_max:
            break
        scale *= 1.4
        problem = make(scale)
    return problem
