"""Attack-resilient primal-dual loop.

Per iteration the coordinator receives the (possibly corrupted) uplink
batch, forms a robust estimate of the trusted mean, and broadcasts a
price signal: the estimate itself plus the price-weighted sum of
tightened-constraint gradients.  Agents take local projected primal
steps; the coordinator takes the projected (and optionally capped) dual
step.  Because the coordinator cannot know the realized honest fraction,
the tightened constraints are evaluated at ``s * estimate`` with
``s = 1 - alpha`` by default; the realized fraction is available for
simulation studies.

Viewed against the exact same loop fed the true trusted mean, the run is
a perturbed primal-dual iteration whose gradient errors are linear in
the estimation error; the run trace records those perturbations so the
contraction recursion and the steady-state neighborhood bound can be
checked on measured quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import MedianNeighborhood, FilterRule
from .attacks import AttackPlan, StaleReplay, apply_attack, contamination_stats
from .engine import NonFiniteIterateError, PrimalDualState, ReferenceSolveError, StepConfig
from .problem import AllocationProblem, RobustProblemView
from .trace import (
    RunTrace,
    recompute_summary,
    recursion_flags,
    steady_state_error_bound,
)

__all__ = [
    "PriceSignal",
    "PerturbationRecord",
    "DualCap",
    "default_dual_cap",
    "resilient_primal_step",
    "resilient_dual_step",
    "perturbation_vectors",
    "perturbation_norm_bounds",
    "resilient_reference",
    "resilient_lipschitz",
    "run_resilient",
    "check_perturbed_contraction",
]


@dataclass(frozen=True, eq=False)
class PriceSignal:
    """Broadcast of one coordinator round: robust mean estimate, the
    price-weighted constraint-gradient sum at the scaled estimate, and
    the current prices (diagnostic)."""

    theta_hat: np.ndarray
    g_hat: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        for name in ("theta_hat", "g_hat", "lam"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"price signal field {name} must be finite")


@dataclass(frozen=True)
class PerturbationRecord:
    """Measured gradient perturbations of one iteration."""

    e_theta_norm: float
    e_lambda_norm: float
    est_error: float

    @property
    def total(self) -> float:
        return self.e_theta_norm ** 2 + self.e_lambda_norm ** 2


@dataclass(frozen=True)
class DualCap:
    """Hard upper bound enforced on every dual price by clipping."""

    lambda_bar: float

    def __post_init__(self):
        if self.lambda_bar <= 0.0:
            raise ValueError("lambda_bar must be positive")


def default_dual_cap(view, scaling: float, honest=None, samples: int = 2048,
                     seed: int = 0) -> DualCap:
    """Natural price ceiling ``max_t sup |g_t| / upsilon`` over sampled
    feasible averages, the level the regularized dual update cannot
    exceed."""
    rng = np.random.default_rng(seed)
    sets = view.sets if honest is None else [view.sets[i] for i in honest]
    best = 0.0
    for _ in range(samples):
        mean = np.stack([s.sample(rng) for s in sets]).mean(axis=0)
        vals = np.abs(view.constraint_values(scaling * mean))
        if vals.size:
            best = max(best, float(vals.max()))
    return DualCap(lambda_bar=max(best / view.upsilon, 1e-12))


# ---------------------------------------------------------------------------
# single steps


def resilient_primal_step(view, i: int, theta_i, price: PriceSignal,
                          gamma: float) -> np.ndarray:
    """Local agent update from the broadcast signal:

    ``theta_i <- P_i(theta_i - (gamma/N) (g_hat + grad U_i(theta_i) + upsilon theta_i))``
    """
    theta_i = np.asarray(theta_i, dtype=float)
    u = view.utilities[i]
    step = price.g_hat + u.grad(theta_i) + view.upsilon * theta_i
    return view.sets[i].project(theta_i - gamma / view.n_agents * step)


def resilient_dual_step(view, lam, theta_hat, gamma: float, scaling: float,
                        cap: DualCap | None = None) -> np.ndarray:
    """Coordinator update of the prices from the scaled estimate:

    ``lam_t <- [lam_t + gamma (gbar_t(s * theta_hat) - upsilon lam_t)]_+``
    then clipped at the cap when one is configured.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam < 0.0):
        raise ValueError("dual prices must be nonnegative")
    vals = view.constraint_values(scaling * np.asarray(theta_hat, dtype=float))
    new = np.maximum(0.0, lam + gamma * (vals - view.upsilon * lam))
    if cap is not None:
        new = np.minimum(new, cap.lambda_bar)
    return new


# ---------------------------------------------------------------------------
# perturbation accounting


def perturbation_vectors(view, theta_hat, theta_bar_h, lam, scaling: float,
                         n_honest: int):
    """Gradient errors of the run against its exact (true-mean) twin.

    Primal blocks (one per trusted agent, all equal):
    ``(1/N) sum_t lam_t (grad gbar_t(s*theta_hat) - grad gbar_t(s*theta_bar_h))``;
    dual component ``t``:
    ``gbar_t(s*theta_hat) - gbar_t(s*theta_bar_h)``.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_bar_h = np.asarray(theta_bar_h, dtype=float)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    g_hat = view.constraint_gradients(scaling * theta_hat)
    g_true = view.constraint_gradients(scaling * theta_bar_h)
    block = (g_hat - g_true).T @ lam / view.n_agents
    e_theta = np.tile(block, (n_honest, 1))
    e_lambda = (view.constraint_values(scaling * theta_hat)
                - view.constraint_values(scaling * theta_bar_h))
    return e_theta, e_lambda


def perturbation_norm_bounds(lambda_bar: float, lipschitz: float,
                             grad_bound: float, n_constraints: int,
                             est_error: float):
    """Linear-in-estimation-error ceilings for the two perturbation norms.

    ``(lambda_bar * lipschitz * T * est_error, grad_bound * T * est_error)``;
    measured norms never exceed these when prices stay below the cap.
    """
    if min(lambda_bar, lipschitz, grad_bound, est_error) < 0.0 or n_constraints < 0:
        raise ValueError("all bound inputs must be nonnegative")
    return (lambda_bar * lipschitz * n_constraints * est_error,
            grad_bound * n_constraints * est_error)


# ---------------------------------------------------------------------------
# the exact (true-mean) twin of the loop


def _honest_slice(view, honest) -> AllocationProblem:
    """Constraint-free problem over the trusted agents, reused for
    vectorized utility gradients and projections."""
    return AllocationProblem(
        utilities=[view.utilities[i] for i in honest],
        constraints=(),
        sets=[view.sets[i] for i in honest],
        upsilon=view.upsilon,
        diameter_bound=view.diameter_bound,
    )


def _exact_step(view, sub: AllocationProblem, theta_h: np.ndarray,
                lam: np.ndarray, gamma: float, scaling: float,
                cap: DualCap | None):
    """One zero-estimation-error iteration over the trusted block."""
    x = scaling * theta_h.mean(axis=0)
    coupling = view.constraint_gradients(x).T @ lam
    grads = sub.utility_gradients(theta_h) + view.upsilon * theta_h + coupling
    new_theta = sub.project_all(theta_h - gamma / view.n_agents * grads)
    new_lam = np.maximum(
        0.0, lam + gamma * (view.constraint_values(x) - view.upsilon * lam))
    if cap is not None:
        new_lam = np.minimum(new_lam, cap.lambda_bar)
    return new_theta, new_lam


def resilient_reference(view, honest, scaling: float,
                        cap: DualCap | None = None,
                        gamma: float | None = None, tol: float = 1e-10,
                        max_iters: int = 2_000_000) -> PrimalDualState:
    """Saddle point of the exact loop restricted to the trusted agents,
    by fixed-point refinement to ``||step|| / gamma <= tol``."""
    sub = _honest_slice(view, honest)
    if gamma is None:
        l_phi = resilient_lipschitz(view, honest, scaling)
        gamma = view.upsilon / l_phi ** 2
    theta = np.zeros((len(honest), view.dim))
    lam = np.zeros(view.n_constraints)
    for _ in range(max_iters):
        new_theta, new_lam = _exact_step(view, sub, theta, lam, gamma,
                                         scaling, cap)
        res = np.sqrt(np.sum((new_theta - theta) ** 2)
                      + np.sum((new_lam - lam) ** 2)) / gamma
        theta, lam = new_theta, new_lam
        if res <= tol:
            return PrimalDualState(theta, lam, iteration=0)
    raise ReferenceSolveError(res, max_iters)


def resilient_lipschitz(view, honest, scaling: float, samples: int = 256,
                        seed: int = 0, safety: float = 2.0) -> float:
    """Sampled Lipschitz bound of the exact loop's saddle map over the
    trusted block, inflated by ``safety``."""
    rng = np.random.default_rng(seed)
    sub = _honest_slice(view, honest)
    ups = view.upsilon
    n = view.n_agents

    lam_scale = 1.0
    if view.n_constraints:
        probe = [np.abs(view.constraint_values(
            scaling * sub.sample_feasible(rng).mean(axis=0)))
            for _ in range(32)]
        lam_scale = max(1e-6, float(np.max(probe)) / ups)

    def phi(theta_h, lam):
        x = scaling * theta_h.mean(axis=0)
        coupling = view.constraint_gradients(x).T @ lam
        g_primal = (sub.utility_gradients(theta_h) + ups * theta_h + coupling) / n
        g_dual = view.constraint_values(x) - ups * lam
        return np.concatenate([g_primal.ravel(), -g_dual])

    best = 0.0
    for _ in range(samples):
        ta, tb = sub.sample_feasible(rng), sub.sample_feasible(rng)
        la = rng.uniform(0.0, lam_scale, view.n_constraints)
        lb = rng.uniform(0.0, lam_scale, view.n_constraints)
        dz = np.sqrt(np.sum((ta - tb) ** 2) + np.sum((la - lb) ** 2))
        if dz < 1e-12:
            continue
        best = max(best, float(np.linalg.norm(phi(ta, la) - phi(tb, lb))) / dz)
    return safety * best


# ---------------------------------------------------------------------------
# the full loop


def _resolve_scaling(view, plan, scaling) -> float:
    if scaling == "declared":
        return 1.0 - view.alpha
    if scaling == "realized":
        return len(plan.honest) / plan.n_agents
    s = float(scaling)
    if not (0.5 < s <= 1.0):
        raise ValueError("scaling must lie in (0.5, 1]")
    return s


def run_resilient(view: RobustProblemView, init: PrimalDualState,
                  plan: AttackPlan, rule, config: StepConfig, *,
                  scaling="declared", dual_cap="auto",
                  lipschitz: float | None = None,
                  reference: PrimalDualState | None = None,
                  seed: int = 0, mode: str = "resilient",
                  meta_extra: dict | None = None) -> RunTrace:
    """Run the resilient loop and record the full per-iteration story.

    Every round: attack the uplinks, estimate the trusted mean with
    ``rule``, broadcast the price signal, step all agents and the
    prices, and log the residual to the exact loop's saddle point
    together with the measured perturbations and contamination stats.

    ``scaling``: ``"declared"`` evaluates tightened constraints at
    ``(1 - alpha) * estimate`` (what an oblivious coordinator can do);
    ``"realized"`` uses the true honest fraction (simulation only).
    ``dual_cap``: ``"auto"`` derives the natural ceiling, ``None``
    disables clipping, a float sets it explicitly.
    """
    if plan.n_agents != view.n_agents:
        raise ValueError("attack plan and problem disagree on the number of agents")
    rule_alpha = getattr(rule, "alpha", None)
    if isinstance(rule, (MedianNeighborhood, FilterRule)) and \
            abs(rule_alpha - view.alpha) > 1e-12:
        raise ValueError(
            f"rule alpha {rule_alpha} must match the view alpha {view.alpha}"
        )
    honest = plan.honest
    if not honest:
        raise ValueError("attack plan leaves no trusted channel")
    s = _resolve_scaling(view, plan, scaling)
    if dual_cap == "auto":
        cap = default_dual_cap(view, s, honest=honest, seed=seed)
    elif dual_cap is None:
        cap = None
    elif isinstance(dual_cap, DualCap):
        cap = dual_cap
    else:
        cap = DualCap(float(dual_cap))
    if lipschitz is None:
        lipschitz = resilient_lipschitz(view, honest, s)
    if reference is None:
        reference = resilient_reference(view, honest, s, cap=cap)

    sub = _honest_slice(view, honest)
    rng = np.random.default_rng(seed)
    honest_idx = np.array(honest)
    n = view.n_agents
    gamma = config.gamma
    keep_history = isinstance(plan.strategy, StaleReplay)
    history: list = []

    theta = view._check_theta(init.theta).copy()
    lam = np.atleast_1d(np.asarray(init.lam, dtype=float)).copy()

    cols = {key: [] for key in
            ("iteration", "residual_sq", "step_norm", "lambda", "gbar",
             "est_error", "e_theta_norm", "e_lambda_norm", "e_total",
             "naive_displacement")}

    for k in range(config.max_iters):
        if not np.all(np.isfinite(theta)):
            raise NonFiniteIterateError(k, "theta")
        if not np.all(np.isfinite(lam)):
            raise NonFiniteIterateError(k, "lambda")

        batch = apply_attack(theta, plan, history=history, iteration=k)
        estimate = rule.estimate(batch.messages, rng=rng)
        theta_hat = estimate.value
        if not np.all(np.isfinite(theta_hat)):
            raise NonFiniteIterateError(k, "estimate")
        theta_bar_h = theta[honest_idx].mean(axis=0)
        est_error = float(np.linalg.norm(theta_hat - theta_bar_h))

        g_hat = view.constraint_gradients(s * theta_hat).T @ lam
        price = PriceSignal(theta_hat=theta_hat, g_hat=g_hat, lam=lam.copy())
        gbar_vals = view.constraint_values(s * theta_hat)

        e_theta, e_lambda = perturbation_vectors(
            view, theta_hat, theta_bar_h, lam, s, len(honest))
        record = PerturbationRecord(
            e_theta_norm=float(np.linalg.norm(e_theta)),
            e_lambda_norm=float(np.linalg.norm(e_lambda)),
            est_error=est_error,
        )
        stats = contamination_stats(batch)

        # all agents update locally, including the ones whose uplink is
        # corrupted (they are honest computers; only their channel lies)
        grads = (view.utility_gradients(theta) + view.upsilon * theta + g_hat)
        new_theta = view.project_all(theta - gamma / n * grads)
        new_lam = np.maximum(0.0, lam + gamma * (gbar_vals - view.upsilon * lam))
        if cap is not None:
            new_lam = np.minimum(new_lam, cap.lambda_bar)

        residual_sq = float(
            np.sum((theta[honest_idx] - reference.theta) ** 2)
            + np.sum((lam - reference.lam) ** 2))
        step_norm = float(np.sqrt(
            np.sum((new_theta[honest_idx] - theta[honest_idx]) ** 2)
            + np.sum((new_lam - lam) ** 2)))

        cols["iteration"].append(k)
        cols["residual_sq"].append(residual_sq)
        cols["step_norm"].append(step_norm)
        cols["lambda"].append(lam.copy())
        cols["gbar"].append(gbar_vals)
        cols["est_error"].append(est_error)
        cols["e_theta_norm"].append(record.e_theta_norm)
        cols["e_lambda_norm"].append(record.e_lambda_norm)
        cols["e_total"].append(record.total)
        cols["naive_displacement"].append(stats.naive_displacement)

        if keep_history:
            history.append(theta)
        theta, lam = new_theta, new_lam
        if config.stop_tol > 0.0 and step_norm <= config.stop_tol:
            break

    t = view.n_constraints
    rows = len(cols["iteration"])
    residual_sq = np.array(cols["residual_sq"])
    e_total = np.array(cols["e_total"])
    flags = recursion_flags(residual_sq, e_total, view.upsilon, gamma, lipschitz)
    meta = {
        "mode": mode,
        "gamma": gamma,
        "upsilon": view.upsilon,
        "l_phi": lipschitz,
        "alpha": view.alpha,
        "scaling": s,
        "seed": seed,
        "rule": getattr(rule, "name", type(rule).__name__),
        "lambda_bar": None if cap is None else cap.lambda_bar,
        "grad_bound_max": max((c.grad_bound for c in view.constraints), default=0.0),
        "lipschitz_max": max((c.lipschitz for c in view.constraints), default=0.0),
        "n_constraints": t,
        "n_agents": n,
        "n_honest": len(honest),
    }
    if meta_extra:
        meta.update(meta_extra)
    trace = RunTrace(
        kind="resilient",
        iteration=np.array(cols["iteration"], dtype=int),
        residual_sq=residual_sq,
        lambdas=np.array(cols["lambda"]).reshape(rows, t),
        gbar=np.array(cols["gbar"]).reshape(rows, t),
        step_norm=np.array(cols["step_norm"]),
        est_error=np.array(cols["est_error"]),
        e_theta_norm=np.array(cols["e_theta_norm"]),
        e_lambda_norm=np.array(cols["e_lambda_norm"]),
        e_total=e_total,
        recursion_ok=flags,
        naive_displacement=np.array(cols["naive_displacement"]),
        meta=meta,
        final_state=PrimalDualState(theta, lam, rows),
    )
    trace.summary = recompute_summary(trace)
    return trace


def check_perturbed_contraction(trace: RunTrace, upsilon: float, gamma: float,
                                l_phi: float, tol: float = 1e-9):
    """Re-verify the per-iteration contraction recursion on a finished
    trace and evaluate the steady-state neighborhood bound.

    Returns ``(flags, limit_bound)``; the bound is ``None`` when
    ``gamma >= upsilon / (2 l_phi^2)`` (contraction lost).
    """
    flags = recursion_flags(trace.residual_sq, trace.e_total, upsilon, gamma,
                            l_phi, tol=tol)
    e_bar = float(np.max(trace.e_total)) if trace.n_rows else 0.0
    return flags, steady_state_error_bound(upsilon, gamma, l_phi, e_bar)
