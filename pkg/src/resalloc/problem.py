"""Problem data for coupled resource allocation.

A problem instance consists of ``N`` agents, each holding a parameter
vector ``theta_i`` constrained to a compact convex set, per-agent convex
utilities, and ``T`` convex coupling constraints evaluated at the average
parameter.  A regularization weight ``upsilon`` makes the associated
Lagrangian strongly convex-concave so that projected primal-dual
iterations contract.

The module also provides the conservative robust reformulation used when
up to an ``alpha`` fraction of the uplink channels may be compromised:
each coupling constraint is tightened by a margin that absorbs the worst
case resource usage of the unheard agents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "Box",
    "Ball",
    "FeasibleSet",
    "QuadraticUtility",
    "LogUtility",
    "CustomUtility",
    "Utility",
    "Constraint",
    "affine_constraint",
    "quadratic_constraint",
    "AllocationProblem",
    "RobustProblemView",
    "project",
    "conservative_offset",
    "regularized_lagrangian",
    "robust_view",
]


def _vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    return v


# ---------------------------------------------------------------------------
# feasible sets


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box ``[lower, upper]``; must contain the origin."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _vector(self.lower, "lower")
        hi = _vector(self.upper, "upper")
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same dimension")
        if np.any(lo > hi):
            raise ValueError("box requires lower <= upper in every coordinate")
        if np.any(lo > 0.0) or np.any(hi < 0.0):
            raise ValueError("feasible set must contain the origin")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def project(self, point) -> np.ndarray:
        p = _vector(point, "point")
        if p.shape[0] != self.dim:
            raise ValueError(f"point has dimension {p.shape[0]}, set has {self.dim}")
        return np.clip(p, self.lower, self.upper)

    def contains(self, point, tol: float = 1e-9) -> bool:
        p = _vector(point, "point")
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class Ball:
    """Euclidean ball; the origin must lie inside."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = _vector(self.center, "center")
        r = float(self.radius)
        if not (r > 0.0 and math.isfinite(r)):
            raise ValueError("ball radius must be positive and finite")
        if np.linalg.norm(c) > r:
            raise ValueError("feasible set must contain the origin")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", r)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def project(self, point) -> np.ndarray:
        p = _vector(point, "point")
        if p.shape[0] != self.dim:
            raise ValueError(f"point has dimension {p.shape[0]}, set has {self.dim}")
        offset = p - self.center
        dist = np.linalg.norm(offset)
        if dist <= self.radius:
            return p
        return self.center + offset * (self.radius / dist)

    def contains(self, point, tol: float = 1e-9) -> bool:
        p = _vector(point, "point")
        return bool(np.linalg.norm(p - self.center) <= self.radius + tol)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        # uniform in the ball: gaussian direction, radius ~ u^(1/d)
        direction = rng.standard_normal(self.dim)
        direction /= max(np.linalg.norm(direction), 1e-300)
        r = self.radius * rng.uniform() ** (1.0 / self.dim)
        return self.center + r * direction


FeasibleSet = Union[Box, Ball]


def project(feasible_set: FeasibleSet, point) -> np.ndarray:
    """Euclidean projection of ``point`` onto ``feasible_set``."""
    return feasible_set.project(point)


# ---------------------------------------------------------------------------
# utilities


@dataclass(frozen=True, eq=False)
class QuadraticUtility:
    """``U(theta) = curvature * ||theta - target||^2 - offset``."""

    curvature: float
    target: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        if self.curvature < 0.0:
            raise ValueError("quadratic utility requires curvature >= 0")
        object.__setattr__(self, "target", _vector(self.target, "target"))

    def value(self, theta) -> float:
        d = _vector(theta) - self.target
        return float(self.curvature * d @ d - self.offset)

    def grad(self, theta) -> np.ndarray:
        return 2.0 * self.curvature * (_vector(theta) - self.target)


@dataclass(frozen=True, eq=False)
class LogUtility:
    """``U(theta) = -weight * sum_j log(theta_j + shift)``.

    The positive ``shift`` keeps the utility defined at the origin, which
    every feasible set is required to contain.
    """

    weight: float
    shift: float = 1.0

    def __post_init__(self):
        if self.weight <= 0.0:
            raise ValueError("log utility requires weight > 0")
        if self.shift <= 0.0:
            raise ValueError("log utility requires shift > 0")

    def value(self, theta) -> float:
        t = _vector(theta) + self.shift
        if np.any(t <= 0.0):
            raise ValueError("log utility evaluated outside its domain")
        return float(-self.weight * np.sum(np.log(t)))

    def grad(self, theta) -> np.ndarray:
        t = _vector(theta) + self.shift
        if np.any(t <= 0.0):
            raise ValueError("log utility evaluated outside its domain")
        return -self.weight / t


@dataclass(frozen=True, eq=False)
class CustomUtility:
    """Utility given by explicit value and gradient callables."""

    value_fn: Callable[[np.ndarray], float]
    grad_fn: Callable[[np.ndarray], np.ndarray]

    def value(self, theta) -> float:
        return float(self.value_fn(np.asarray(theta, dtype=float)))

    def grad(self, theta) -> np.ndarray:
        return np.asarray(self.grad_fn(np.asarray(theta, dtype=float)), dtype=float)


Utility = Union[QuadraticUtility, LogUtility, CustomUtility]


# ---------------------------------------------------------------------------
# coupling constraints


@dataclass(frozen=True, eq=False)
class Constraint:
    """Convex scalar constraint ``g(x) <= 0`` on the average parameter.

    ``grad_bound`` is a declared sup-norm bound on the gradient over the
    working region and ``lipschitz`` a declared Lipschitz constant of the
    gradient.  Both are treated as known problem data; they feed the
    conservative robustness margin and the perturbation bounds, so they
    are inputs rather than estimates.

    ``value_fn`` must broadcast over leading axes (input shape
    ``(..., d)``), which the harnesses rely on for vectorized sampling.
    """

    value_fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Callable[[np.ndarray], np.ndarray]
    grad_bound: float
    lipschitz: float
    label: str = ""

    def __post_init__(self):
        if self.grad_bound < 0.0 or self.lipschitz < 0.0:
            raise ValueError("grad_bound and lipschitz must be nonnegative")

    def value(self, x) -> np.ndarray:
        return np.asarray(self.value_fn(np.asarray(x, dtype=float)), dtype=float)

    def grad(self, x) -> np.ndarray:
        return np.asarray(self.grad_fn(np.asarray(x, dtype=float)), dtype=float)


def affine_constraint(weights, cap: float, label: str = "") -> Constraint:
    """``g(x) = weights . x - cap`` with exact constants."""
    w = _vector(weights, "weights")
    return Constraint(
        value_fn=lambda x: x @ w - cap,
        grad_fn=lambda x: w.copy(),
        grad_bound=float(np.linalg.norm(w)),
        lipschitz=0.0,
        label=label or "affine",
    )


def quadratic_constraint(
    curvature: float,
    weights,
    cap: float,
    region_radius: float,
    center=None,
    label: str = "",
) -> Constraint:
    """``g(x) = curvature*||x - center||^2 + weights . x - cap``.

    ``grad_bound`` is declared over the ball ``||x|| <= region_radius``;
    callers pass the radius of the region their iterates live in.
    """
    if curvature <= 0.0:
        raise ValueError("quadratic constraint requires curvature > 0")
    w = _vector(weights, "weights")
    c = np.zeros_like(w) if center is None else _vector(center, "center")
    if c.shape != w.shape:
        raise ValueError("center and weights must have the same dimension")
    bound = 2.0 * curvature * (region_radius + float(np.linalg.norm(c)))
    bound += float(np.linalg.norm(w))
    return Constraint(
        value_fn=lambda x: curvature * np.sum((x - c) ** 2, axis=-1) + x @ w - cap,
        grad_fn=lambda x: 2.0 * curvature * (x - c) + w,
        grad_bound=bound,
        lipschitz=2.0 * curvature,
        label=label or "quadratic",
    )


# ---------------------------------------------------------------------------
# assembled problem


@dataclass(frozen=True, eq=False)
class AllocationProblem:
    """Immutable container for one allocation problem instance."""

    utilities: tuple
    constraints: tuple
    sets: tuple
    upsilon: float
    diameter_bound: float

    def __post_init__(self):
        object.__setattr__(self, "utilities", tuple(self.utilities))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        object.__setattr__(self, "sets", tuple(self.sets))
        if not self.utilities:
            raise ValueError("problem needs at least one agent")
        if len(self.utilities) != len(self.sets):
            raise ValueError("one feasible set per agent is required")
        if self.upsilon <= 0.0:
            raise ValueError("regularization upsilon must be positive")
        dims = {s.dim for s in self.sets}
        if len(dims) != 1:
            raise ValueError("all feasible sets must share one dimension")
        max_diam = max(s.diameter for s in self.sets)
        if self.diameter_bound < max_diam - 1e-12:
            raise ValueError(
                f"diameter_bound {self.diameter_bound} is below the largest "
                f"set diameter {max_diam}"
            )

    @property
    def n_agents(self) -> int:
        return len(self.utilities)

    @property
    def dim(self) -> int:
        return self.sets[0].dim

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    # -- cached fast paths -------------------------------------------------

    @cached_property
    def _quadratic_stack(self):
        if all(isinstance(u, QuadraticUtility) for u in self.utilities):
            curv = np.array([u.curvature for u in self.utilities])
            targets = np.stack([u.target for u in self.utilities])
            return curv, targets
        return None

    @cached_property
    def _log_stack(self):
        if all(isinstance(u, LogUtility) for u in self.utilities):
            weights = np.array([u.weight for u in self.utilities])
            shifts = np.array([u.shift for u in self.utilities])
            return weights, shifts
        return None

    @cached_property
    def _box_stack(self):
        if all(isinstance(s, Box) for s in self.sets):
            lowers = np.stack([s.lower for s in self.sets])
            uppers = np.stack([s.upper for s in self.sets])
            return lowers, uppers
        return None

    # -- vectorized evaluation over agents ----------------------------------

    def _check_theta(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        if t.shape != (self.n_agents, self.dim):
            raise ValueError(
                f"theta must have shape {(self.n_agents, self.dim)}, got {t.shape}"
            )
        return t

    def utility_values(self, theta) -> np.ndarray:
        t = self._check_theta(theta)
        quad = self._quadratic_stack
        if quad is not None:
            curv, targets = quad
            offs = np.array([u.offset for u in self.utilities])
            return curv * np.sum((t - targets) ** 2, axis=1) - offs
        return np.array([u.value(row) for u, row in zip(self.utilities, t)])

    def utility_gradients(self, theta) -> np.ndarray:
        t = self._check_theta(theta)
        quad = self._quadratic_stack
        if quad is not None:
            curv, targets = quad
            return 2.0 * curv[:, None] * (t - targets)
        log = self._log_stack
        if log is not None:
            weights, shifts = log
            return -weights[:, None] / (t + shifts[:, None])
        return np.stack([u.grad(row) for u, row in zip(self.utilities, t)])

    def project_all(self, theta) -> np.ndarray:
        t = self._check_theta(theta)
        boxes = self._box_stack
        if boxes is not None:
            return np.clip(t, boxes[0], boxes[1])
        return np.stack([s.project(row) for s, row in zip(self.sets, t)])

    def constraint_values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.array([float(c.value(x)) for c in self.constraints])

    def constraint_gradients(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.constraints:
            return np.zeros((0, self.dim))
        return np.stack([c.grad(x) for c in self.constraints])

    def sample_feasible(self, rng: np.random.Generator) -> np.ndarray:
        return np.stack([s.sample(rng) for s in self.sets])


def regularized_lagrangian(problem, theta, lam) -> float:
    """Regularized Lagrangian value at ``(theta, lam)``.

    ``(1/N) sum_i U_i(theta_i) + sum_t lam_t g_t(mean theta)
    + (upsilon/2N) sum_i ||theta_i||^2 - (upsilon/2) ||lam||^2``
    """
    t = problem._check_theta(theta)
    l = _vector(lam, "lam")
    if l.shape[0] != problem.n_constraints:
        raise ValueError(
            f"lam must have length {problem.n_constraints}, got {l.shape[0]}"
        )
    if np.any(l < 0.0):
        raise ValueError("dual prices must be nonnegative")
    n = problem.n_agents
    ups = problem.upsilon
    value = float(np.sum(problem.utility_values(t))) / n
    if problem.n_constraints:
        value += float(l @ problem.constraint_values(t.mean(axis=0)))
    value += 0.5 * ups / n * float(np.sum(t * t))
    value -= 0.5 * ups * float(l @ l)
    return value


# ---------------------------------------------------------------------------
# conservative robust reformulation


def conservative_offset(alpha: float, diameter: float, grad_bound: float,
                        lipschitz: float) -> float:
    """Margin added to a coupling constraint to absorb compromised channels.

    ``alpha * (diameter * grad_bound + 0.5 * lipschitz * diameter^2)``
    where ``alpha`` bounds the fraction of compromised channels.  Any
    point satisfying the tightened constraint remains feasible no matter
    which in-set parameters the unheard agents contribute.
    """
    if not (0.0 <= alpha < 0.5):
        raise ValueError("alpha must be in [0, 0.5): robustness requires a "
                         "trusted majority")
    if diameter < 0.0 or grad_bound < 0.0 or lipschitz < 0.0:
        raise ValueError("diameter, grad_bound and lipschitz must be >= 0")
    return alpha * (diameter * grad_bound + 0.5 * lipschitz * diameter ** 2)


@dataclass(frozen=True, eq=False)
class RobustProblemView:
    """A problem with every coupling constraint tightened by its margin.

    Exposes the same evaluation surface as :class:`AllocationProblem`, so
    the primal-dual engines run on either interchangeably.
    """

    base: AllocationProblem
    alpha: float
    offsets: np.ndarray

    def __post_init__(self):
        offs = _vector(self.offsets, "offsets")
        if offs.shape[0] != self.base.n_constraints:
            raise ValueError("one offset per constraint is required")
        if np.any(offs < 0.0):
            raise ValueError("offsets must be nonnegative")
        object.__setattr__(self, "offsets", offs)

    # pass-through surface

    @property
    def utilities(self):
        return self.base.utilities

    @property
    def sets(self):
        return self.base.sets

    @property
    def upsilon(self) -> float:
        return self.base.upsilon

    @property
    def diameter_bound(self) -> float:
        return self.base.diameter_bound

    @property
    def n_agents(self) -> int:
        return self.base.n_agents

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def n_constraints(self) -> int:
        return self.base.n_constraints

    @cached_property
    def constraints(self) -> tuple:
        wrapped = []
        for c, off in zip(self.base.constraints, self.offsets):
            wrapped.append(
                Constraint(
                    value_fn=(lambda x, f=c.value_fn, o=float(off): f(x) + o),
                    grad_fn=c.grad_fn,
                    grad_bound=c.grad_bound,
                    lipschitz=c.lipschitz,
                    label=(c.label + "+margin") if c.label else "margin",
                )
            )
        return tuple(wrapped)

    def utility_values(self, theta) -> np.ndarray:
        return self.base.utility_values(theta)

    def utility_gradients(self, theta) -> np.ndarray:
        return self.base.utility_gradients(theta)

    def project_all(self, theta) -> np.ndarray:
        return self.base.project_all(theta)

    def constraint_values(self, x) -> np.ndarray:
        return self.base.constraint_values(x) + self.offsets

    def constraint_gradients(self, x) -> np.ndarray:
        return self.base.constraint_gradients(x)

    def sample_feasible(self, rng: np.random.Generator) -> np.ndarray:
        return self.base.sample_feasible(rng)

    def _check_theta(self, theta) -> np.ndarray:
        return self.base._check_theta(theta)


def robust_view(problem: AllocationProblem, alpha: float) -> RobustProblemView:
    """Tighten every constraint by its own conservative margin.

    Margins use each constraint's declared constants, which is at least
    as tight as using shared worst-case constants and still conservative.
    With ``alpha == 0`` the view coincides with the base problem.
    """
    offsets = np.array([
        conservative_offset(alpha, problem.diameter_bound, c.grad_bound,
                            c.lipschitz)
        for c in problem.constraints
    ])
    return RobustProblemView(base=problem, alpha=float(alpha), offsets=offsets)
