"""Robust mean estimators for contaminated message batches.

The coordinator never learns which channels are compromised, so instead
of the naive average it can run one of two defenses:

* the median-neighborhood rule: per coordinate, average the messages
  closest to the coordinate-wise median.  Its error against the trusted
  mean is bounded by an explicit function of the contamination fraction
  and the honest spread (:func:`median_neighborhood_error_bound`);

* an iterative filter: repeatedly solve a small saddle problem that
  scores how poorly each point is reconstructed as a capped mixture of
  the others in the worst quadratic direction, down-weight and drop the
  offenders, then read the estimate off a low-rank split of the final
  mixing matrix.

A brute-force tightest-cluster oracle is included for scoring the
estimators in tests at small ``N``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Estimate",
    "naive_mean",
    "coordinate_median",
    "median_neighborhood_mean",
    "median_neighborhood_error_bound",
    "capped_simplex_project",
    "SaddleResult",
    "saddle_solve",
    "FilterBudgetError",
    "filter_mean",
    "bruteforce_trusted_mean",
    "NaiveMean",
    "MedianNeighborhood",
    "FilterRule",
]


def _as_points(batch) -> np.ndarray:
    """Accept an uplink batch or a raw ``(N, d)`` array of messages."""
    messages = getattr(batch, "messages", batch)
    pts = np.asarray(messages, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"expected (N, d) messages, got shape {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class Estimate:
    """A robust mean estimate plus estimator-specific diagnostics."""

    value: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def naive_mean(batch) -> Estimate:
    """Plain average of all received messages; no defense."""
    pts = _as_points(batch)
    return Estimate(value=pts.mean(axis=0))


def coordinate_median(batch) -> np.ndarray:
    """Per-coordinate median; even counts average the two middle values."""
    return np.median(_as_points(batch), axis=0)


def median_neighborhood_mean(batch, alpha: float) -> Estimate:
    """Average of the ``round((1-alpha) N)`` messages nearest the median,
    independently per coordinate.

    Ties in distance to the median keep the lower message index, which
    makes the estimator deterministic.  Diagnostics record the realized
    selection radius per coordinate.
    """
    if not (0.0 < alpha < 0.5):
        raise ValueError("alpha must be in (0, 0.5)")
    pts = _as_points(batch)
    n, d = pts.shape
    m = min(n, max(1, int(round((1.0 - alpha) * n))))
    med = np.median(pts, axis=0)
    dist = np.abs(pts - med)
    # stable sort keeps the lower index first among equal distances
    order = np.argsort(dist, axis=0, kind="stable")[:m]
    chosen = np.take_along_axis(pts, order, axis=0)
    radius = np.take_along_axis(dist, order, axis=0).max(axis=0)
    return Estimate(
        value=chosen.mean(axis=0),
        diagnostics={"radius": radius, "selected": order, "m": m},
    )


def median_neighborhood_error_bound(alpha: float, spread: float, dim: int) -> float:
    """Worst-case error of the median-neighborhood rule.

    Valid whenever every honest message lies within ``spread`` of the
    trusted mean in the max norm and at most an ``alpha`` fraction of
    channels are compromised:

    ``alpha/(1-alpha) * (2 + sqrt((1-alpha)^2 / (1-2 alpha))) * spread * sqrt(dim)``
    """
    if not (0.0 <= alpha < 0.5):
        raise ValueError("alpha must be in [0, 0.5): the bound diverges at 1/2")
    if spread < 0.0:
        raise ValueError("spread must be nonnegative")
    factor = 2.0 + math.sqrt((1.0 - alpha) ** 2 / (1.0 - 2.0 * alpha))
    return alpha / (1.0 - alpha) * factor * spread * math.sqrt(dim)


# ---------------------------------------------------------------------------
# capped-simplex projection (shared by the filter's inner solver)


def _project_columns(values: np.ndarray, cap: float, total: float = 1.0,
                     max_iters: int = 96, shift_tol: float = 1e-14) -> np.ndarray:
    """Project each column of ``values`` onto ``{0 <= x <= cap, sum x = total}``.

    Bisection on the common shift; entries pushed to ``-inf`` act as
    excluded coordinates (they project to zero).
    """
    v = np.asarray(values, dtype=float)
    n, m = v.shape
    cap_eff = min(cap, total)
    finite = np.isfinite(v)
    n_valid = finite.sum(axis=0)
    if np.any(cap_eff * n_valid < total - 1e-12):
        raise ValueError(
            f"cap {cap} cannot reach the required total over the available entries"
        )
    v_masked = np.where(finite, v, -np.inf)
    lo = np.where(finite, v, np.inf).min(axis=0) - cap_eff - 1.0
    hi = v_masked.max(axis=0)
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        s = np.clip(v_masked - mid, 0.0, cap_eff).sum(axis=0)
        too_big = s > total
        lo = np.where(too_big, mid, lo)
        hi = np.where(too_big, hi, mid)
        # interval below the shift resolution that meets the sum tolerance
        if float(np.max(hi - lo)) <= shift_tol * max(1.0, float(np.max(np.abs(hi)))):
            break
    return np.clip(v_masked - 0.5 * (lo + hi), 0.0, cap_eff)


def capped_simplex_project(v, cap: float, total: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{x : 0 <= x <= cap, sum x = total}``.

    Solved by bisection on the shift parameter; the sum constraint is met
    to ``1e-12``.  Raises if ``cap * len(v) < total`` (empty feasible set).
    """
    vec = np.atleast_1d(np.asarray(v, dtype=float))
    return _project_columns(vec[:, None], cap, total)[:, 0]


# ---------------------------------------------------------------------------
# saddle scoring subproblem


@dataclass(frozen=True, eq=False)
class SaddleResult:
    """Outcome of the reconstruction saddle problem."""

    direction: np.ndarray      # top scoring direction v (unit norm)
    w_matrix: np.ndarray       # column-stochastic mixing weights
    tau: np.ndarray            # residual score per point under Y = v v^T
    objective: float           # sum_i c_i tau_i at exit
    converged: bool
    sweeps_used: int

    @property
    def y_matrix(self) -> np.ndarray:
        return np.outer(self.direction, self.direction)


def saddle_solve(points, weights=None, cap: float = 1.0, sweeps: int = 12,
                 pg_iters: int = 30, tol: float = 1e-8,
                 exclude_self: bool = False,
                 stop_below: float | None = None) -> SaddleResult:
    """Alternate the two half-steps of the reconstruction saddle problem.

    For fixed mixing weights the best unit-trace PSD scoring matrix is
    the rank-one outer product of the top eigenvector of the weighted
    residual second-moment matrix.  For a fixed direction every column
    minimizes an independent scalar quadratic over the capped simplex,
    which projected gradient handles.  Sweeps stop once the objective
    changes by less than ``tol`` relative, or when the sweep budget runs
    out (the result is then flagged as not converged).

    ``exclude_self`` removes each point's own weight from its mixture so
    a point must be reconstructed from the *other* points.

    ``stop_below`` ends the solve as soon as the objective falls to that
    level.  Mixing steps only ever lower the objective, so any observed
    value is an upper bound on the saddle value: a caller that just needs
    to know whether the saddle sits below a threshold loses nothing by
    stopping there.
    """
    x = _as_points(points)
    n, d = x.shape
    c = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if c.shape != (n,) or np.any(c < 0.0):
        raise ValueError("weights must be a nonnegative length-n vector")
    if n == 1:
        if exclude_self:
            raise ValueError("cannot reconstruct a single point from others")
        return SaddleResult(direction=np.zeros(d), w_matrix=np.ones((1, 1)),
                            tau=np.zeros(1), objective=0.0, converged=True,
                            sweeps_used=0)
    avail = n - 1 if exclude_self else n
    if cap * avail < 1.0 - 1e-12:
        raise ValueError(f"cap {cap} too small for a stochastic column over "
                         f"{avail} entries")
    data = x.T                                   # d x n, columns are points
    diag_mask = np.eye(n, dtype=bool) if exclude_self else None

    w = np.full((n, n), 1.0 / avail)
    if exclude_self:
        np.fill_diagonal(w, 0.0)
    if 1.0 / avail > cap:
        base = np.full((n, n), 1.0 / avail)
        if diag_mask is not None:
            base[diag_mask] = -np.inf
        w = _project_columns(base, cap)

    direction = np.zeros(d)
    tau = np.zeros(n)
    objective = None
    converged = False
    sweeps_used = 0
    for sweep in range(sweeps):
        sweeps_used = sweep + 1
        # scoring step: top eigenvector of the weighted residual moments
        delta = x.T - data @ w                   # d x n, residual per point
        moment = (delta * c) @ delta.T
        eigvals, eigvecs = np.linalg.eigh(moment)
        direction = eigvecs[:, -1]
        tau = (direction @ delta) ** 2
        new_objective = float(c @ tau)
        if stop_below is not None and new_objective <= stop_below:
            objective = new_objective
            converged = True
            break
        if objective is not None and \
                abs(new_objective - objective) <= tol * max(1.0, abs(objective)):
            objective = new_objective
            converged = True
            break
        objective = new_objective
        # mixing step: per-column scalar quadratic over the capped simplex
        q = data.T @ direction                   # n scores along the direction
        q_norm_sq = float(q @ q)
        if q_norm_sq <= 1e-300:
            converged = True
            break
        q_scale = max(1.0, float(np.max(np.abs(q))))
        pg_obj = None
        for _ in range(pg_iters):
            resid = q @ w - q                    # per-column signed residual
            resid_sq = float(c @ (resid * resid))
            if np.max(np.abs(resid)) <= 1e-13 * q_scale:
                break
            if pg_obj is not None and resid_sq >= pg_obj * (1.0 - 1e-6):
                break                            # stalled on a face
            pg_obj = resid_sq
            step = np.outer(q, resid) / q_norm_sq
            cand = w - step
            if diag_mask is not None:
                cand[diag_mask] = -np.inf
            w = _project_columns(cand, cap, shift_tol=1e-9)
    return SaddleResult(direction=direction, w_matrix=w, tau=tau,
                        objective=0.0 if objective is None else objective,
                        converged=converged, sweeps_used=sweeps_used)


# ---------------------------------------------------------------------------
# iterative filter


class FilterBudgetError(RuntimeError):
    """The filter kept removing points without ever passing its exit test."""


def _sigma_fallback(pts: np.ndarray, alpha: float) -> float:
    """Spread bound when none is declared: top covariance eigenvalue of
    the points nearest the coordinate median."""
    n = pts.shape[0]
    m = min(n, max(2, int(round((1.0 - alpha) * n))))
    med = np.median(pts, axis=0)
    order = np.argsort(np.linalg.norm(pts - med, axis=1), kind="stable")[:m]
    cluster = pts[order]
    cov = np.cov(cluster.T, bias=True).reshape(pts.shape[1], pts.shape[1])
    lam_max = float(np.linalg.eigvalsh(cov)[-1])
    return math.sqrt(max(lam_max, 1e-24))


def filter_mean(batch, alpha: float, sigma: float | None = None,
                budget: int = 12, pg_iters: int = 30,
                rng: np.random.Generator | None = None) -> Estimate:
    """Iteratively filter suspect points, then average what survives.

    Each round solves the reconstruction saddle problem over the active
    set with per-entry cap ``(4 - alpha) / (alpha (2 + alpha) n)`` and no
    self-weights.  If the weighted residual scores exceed ``4 n sigma^2``
    the offenders are down-weighted in proportion to their score and
    dropped once their weight falls below one half; otherwise the loop
    exits and the estimate is read off the mixing matrix: singular values
    above ``0.9`` are split off, the remainder is renormalized, and the
    reconstruction is rank-one exactly when the mixture reached
    consensus, in which case the plain average of the surviving points is
    returned (otherwise a random reconstructed column).

    ``sigma`` must upper-bound the square root of the top eigenvalue of
    the honest sample covariance; without it a median-cluster fallback is
    estimated from the batch.  With ``alpha == 0`` the cap is undefined
    and no channel is distrusted, so the naive mean is returned.
    """
    pts = _as_points(batch)
    n0, d = pts.shape
    if alpha == 0.0:
        est = naive_mean(pts)
        est.diagnostics.update({"filter_rounds": 0, "removed": [],
                                "degenerate": "alpha=0"})
        return est
    if not (0.0 < alpha < 0.25):
        raise ValueError("alpha must be in [0, 0.25) for the filter rule")
    if rng is None:
        rng = np.random.default_rng(0)
    if sigma is None:
        sigma = _sigma_fallback(pts, alpha)
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")

    c = np.ones(n0)
    active = np.ones(n0, dtype=bool)
    removed: list = []
    result = None
    rounds = 0
    while True:
        idx = np.flatnonzero(active)
        n = idx.size
        if n == 0:
            raise FilterBudgetError(
                f"all {n0} points removed after {rounds} rounds "
                f"(sigma={sigma:.3g} too small for this batch?)"
            )
        if n == 1:
            return Estimate(value=pts[idx[0]].copy(),
                            diagnostics={"filter_rounds": rounds,
                                         "removed": removed, "sigma": sigma,
                                         "rank_one": True})
        cap = (4.0 - alpha) / (alpha * (2.0 + alpha) * n)
        threshold = 4.0 * n * sigma ** 2
        result = saddle_solve(pts[idx], c[idx], cap, sweeps=budget,
                              pg_iters=pg_iters, exclude_self=True,
                              stop_below=threshold)
        tau = result.tau
        if float(c[idx] @ tau) <= threshold:
            break
        rounds += 1
        if rounds > n0:
            raise FilterBudgetError(
                f"no clean exit after {rounds} rounds; last score "
                f"{float(c[idx] @ tau):.3g} vs threshold {4.0 * n * sigma ** 2:.3g}"
            )
        c[idx] *= 1.0 - tau / tau.max()
        dropped = idx[c[idx] < 0.5]
        removed.extend(int(i) for i in dropped)
        active[dropped] = False

    idx = np.flatnonzero(active)
    survivors = pts[idx]
    w = result.w_matrix
    u, s, vt = np.linalg.svd(w)
    w_small = (u * np.where(s > 0.9, 0.0, s)) @ vt
    w_big = w - w_small
    eye = np.eye(idx.size)
    shrink = eye - w_small                       # ||w_small|| <= 0.9 keeps this regular
    if np.linalg.cond(shrink) > 1e12:
        ridge = shrink.T @ shrink + 1e-10 * eye
        w_mix = np.linalg.solve(ridge, shrink.T @ w_big.T).T
    else:
        w_mix = np.linalg.solve(shrink.T, w_big.T).T
    z = survivors.T @ w_mix                      # d x n reconstructed columns
    sz = np.linalg.svd(z, compute_uv=False)
    rank_one = sz.size < 2 or sz[0] <= 0.0 or sz[1] / sz[0] < 1e-8
    if rank_one:
        value = survivors.mean(axis=0)
        column = None
    else:
        column = int(rng.integers(idx.size))
        value = z[:, column].copy()
    return Estimate(
        value=value,
        diagnostics={
            "filter_rounds": rounds, "removed": removed, "sigma": sigma,
            "rank_one": bool(rank_one), "column": column,
            "saddle_converged": result.converged,
            "saddle_sweeps": result.sweeps_used,
        },
    )


# ---------------------------------------------------------------------------
# brute-force oracle


def bruteforce_trusted_mean(batch, alpha: float) -> np.ndarray:
    """Tightest-cluster oracle: mean of the minimum-diameter subset.

    Enumerates every subset of size ``ceil((1-alpha) N)`` and returns the
    mean of the one with the smallest maximal pairwise distance (first
    subset in lexicographic order wins ties).  Exponential: refuses
    ``N > 20``.
    """
    pts = _as_points(batch)
    n = pts.shape[0]
    if n > 20:
        raise ValueError("brute-force oracle is limited to N <= 20")
    if not (0.0 <= alpha < 0.5):
        raise ValueError("alpha must be in [0, 0.5)")
    size = min(n, max(1, math.ceil((1.0 - alpha) * n)))
    diff = pts[:, None, :] - pts[None, :, :]
    pairwise = np.sqrt(np.sum(diff ** 2, axis=-1))
    best_subset = None
    best_diameter = np.inf
    for subset in itertools.combinations(range(n), size):
        sel = np.array(subset)
        diameter = float(pairwise[np.ix_(sel, sel)].max()) if size > 1 else 0.0
        if diameter < best_diameter:
            best_diameter = diameter
            best_subset = sel
    return pts[best_subset].mean(axis=0)


# ---------------------------------------------------------------------------
# rule objects used by the resilient engine and the CLI


class NaiveMean:
    """No defense: plain averaging, kept for baselines and ablations."""

    alpha = 0.0
    name = "naive_mean"

    def estimate(self, batch, rng=None) -> Estimate:
        return naive_mean(batch)

    def __repr__(self):
        return "NaiveMean()"


@dataclass(frozen=True)
class MedianNeighborhood:
    """Coordinate-median neighborhood averaging."""

    alpha: float
    name = "median_neighborhood"

    def __post_init__(self):
        if not (0.0 < self.alpha < 0.5):
            raise ValueError("alpha must be in (0, 0.5)")

    def estimate(self, batch, rng=None) -> Estimate:
        return median_neighborhood_mean(batch, self.alpha)


@dataclass(frozen=True)
class FilterRule:
    """Iterative filtering; valid for contamination below one quarter."""

    alpha: float
    sigma: float | None = None
    budget: int = 12
    name = "filter"

    def __post_init__(self):
        if not (0.0 <= self.alpha < 0.25):
            raise ValueError("alpha must be < 0.25 for the filter rule")

    def estimate(self, batch, rng=None) -> Estimate:
        return filter_mean(batch, self.alpha, sigma=self.sigma,
                           budget=self.budget, rng=rng)
