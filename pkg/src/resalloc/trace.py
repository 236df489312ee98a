"""Run traces: per-iteration metrics, summaries, CSV/JSON serialization.

A trace is the complete record of one run.  Baseline runs log iteration,
squared residual to the reference saddle point, dual prices, constraint
values at the broadcast point, and step norm.  Resilient runs extend the
schema with the estimation error of the robust mean, the induced
gradient-perturbation norms, their squared total ``E_k``, a per-row flag
for the perturbed contraction inequality, and the displacement a naive
average would have suffered.

Summaries are always recomputable from the rows plus the run metadata;
:func:`recompute_summary` is the single implementation used both when a
run finishes and when a stored trace is re-checked.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "RunTrace",
    "contraction_coefficient",
    "perturbation_gain",
    "steady_state_error_bound",
    "recursion_flags",
    "recompute_summary",
    "BURN_IN",
]

# iterations excluded from steady-state statistics; the limit bound is
# asymptotic and early transients would contaminate the proxy
BURN_IN = 50


def contraction_coefficient(upsilon: float, gamma: float, l_phi: float) -> float:
    """Per-iteration multiplier on squared distance to the saddle point."""
    return 1.0 - gamma * upsilon + 2.0 * gamma ** 2 * l_phi ** 2


def perturbation_gain(upsilon: float, gamma: float) -> float:
    """Weight of the squared perturbation ``E_k`` in the recursion."""
    return 4.0 * gamma / upsilon + 2.0 * gamma ** 2


def steady_state_error_bound(upsilon: float, gamma: float, l_phi: float,
                             e_bar: float):
    """Asymptotic bound ``(4/upsilon + 2 gamma) / (upsilon - 2 gamma L^2) * E_bar``.

    Returns ``None`` when ``gamma >= upsilon / (2 L^2)``: the contraction
    is lost and no finite neighborhood is implied.
    """
    denom = upsilon - 2.0 * gamma * l_phi ** 2
    if denom <= 0.0:
        return None
    return (4.0 / upsilon + 2.0 * gamma) / denom * e_bar


def recursion_flags(residual_sq: np.ndarray, e_k: np.ndarray, upsilon: float,
                    gamma: float, l_phi: float, tol: float = 1e-9) -> np.ndarray:
    """Row-wise check of the perturbed contraction inequality.

    Entry ``k`` (``k >= 1``) verifies
    ``r_k <= coef * r_{k-1} + gain * E_{k-1} + tol``; entry 0 is
    vacuously true.
    """
    coef = contraction_coefficient(upsilon, gamma, l_phi)
    gain = perturbation_gain(upsilon, gamma)
    r = np.asarray(residual_sq, dtype=float)
    e = np.asarray(e_k, dtype=float)
    ok = np.ones(r.shape[0], dtype=bool)
    if r.shape[0] > 1:
        ok[1:] = r[1:] <= coef * r[:-1] + gain * e[:-1] + tol
    return ok


@dataclass(eq=False)
class RunTrace:
    """Per-iteration records plus a recomputable summary block."""

    kind: str                      # "baseline" or "resilient"
    iteration: np.ndarray
    residual_sq: np.ndarray
    lambdas: np.ndarray            # (rows, T)
    gbar: np.ndarray               # (rows, T)
    step_norm: np.ndarray
    meta: dict
    est_error: np.ndarray | None = None
    e_theta_norm: np.ndarray | None = None
    e_lambda_norm: np.ndarray | None = None
    e_total: np.ndarray | None = None           # E_k per iteration
    recursion_ok: np.ndarray | None = None
    naive_displacement: np.ndarray | None = None
    summary: dict = field(default_factory=dict)
    final_state: object = None

    @property
    def n_rows(self) -> int:
        return int(self.iteration.shape[0])

    @property
    def n_constraints(self) -> int:
        return int(self.lambdas.shape[1])

    def steady_window(self) -> slice:
        """Rows used for steady-state statistics: the last 10 percent,
        never reaching back into the burn-in."""
        k = self.n_rows
        tail = max(1, math.ceil(0.1 * k))
        start = max(min(BURN_IN, k - 1), k - tail)
        return slice(start, k)

    # -- serialization ------------------------------------------------------

    def column_names(self) -> list:
        t = self.n_constraints
        names = (["iteration", "residual_sq"]
                 + [f"lambda_{j + 1}" for j in range(t)]
                 + [f"gbar_{j + 1}" for j in range(t)]
                 + ["step_norm"])
        if self.kind == "resilient":
            names += ["est_error", "e_theta_norm", "e_lambda_norm", "E_k",
                      "recursion_ok", "naive_displacement"]
        return names

    def to_rows(self) -> list:
        out = []
        for k in range(self.n_rows):
            row = [int(self.iteration[k]), repr(float(self.residual_sq[k]))]
            row += [repr(float(v)) for v in self.lambdas[k]]
            row += [repr(float(v)) for v in self.gbar[k]]
            row.append(repr(float(self.step_norm[k])))
            if self.kind == "resilient":
                row += [
                    repr(float(self.est_error[k])),
                    repr(float(self.e_theta_norm[k])),
                    repr(float(self.e_lambda_norm[k])),
                    repr(float(self.e_total[k])),
                    int(bool(self.recursion_ok[k])),
                    repr(float(self.naive_displacement[k])),
                ]
            out.append(row)
        return out

    def write(self, csv_path) -> None:
        """Write rows as RFC-4180 CSV plus a ``.summary.json`` sidecar."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.column_names())
            writer.writerows(self.to_rows())
        sidecar = csv_path.with_suffix(".summary.json")
        payload = {"kind": self.kind, "meta": self.meta, "summary": self.summary}
        with open(sidecar, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")

    @classmethod
    def read(cls, csv_path) -> "RunTrace":
        """Load a trace written by :meth:`write` (sidecar required)."""
        csv_path = Path(csv_path)
        sidecar = csv_path.with_suffix(".summary.json")
        with open(sidecar) as fh:
            payload = json.load(fh)
        kind = payload["kind"]
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            raw = [row for row in reader if row]
        t = sum(1 for name in header if name.startswith("lambda_"))
        cols = {name: idx for idx, name in enumerate(header)}
        data = np.array([[float(v) for v in row] for row in raw])
        if data.size == 0:
            data = data.reshape(0, len(header))
        kwargs = dict(
            kind=kind,
            iteration=data[:, cols["iteration"]].astype(int),
            residual_sq=data[:, cols["residual_sq"]],
            lambdas=data[:, cols["lambda_1"]:cols["lambda_1"] + t]
            if t else np.zeros((data.shape[0], 0)),
            gbar=data[:, cols["gbar_1"]:cols["gbar_1"] + t]
            if t else np.zeros((data.shape[0], 0)),
            step_norm=data[:, cols["step_norm"]],
            meta=payload["meta"],
        )
        if kind == "resilient":
            kwargs.update(
                est_error=data[:, cols["est_error"]],
                e_theta_norm=data[:, cols["e_theta_norm"]],
                e_lambda_norm=data[:, cols["e_lambda_norm"]],
                e_total=data[:, cols["E_k"]],
                recursion_ok=data[:, cols["recursion_ok"]].astype(bool),
                naive_displacement=data[:, cols["naive_displacement"]],
            )
        trace = cls(**kwargs)
        trace.summary = payload.get("summary", {})
        return trace


def recompute_summary(trace: RunTrace) -> dict:
    """Summary block derived purely from rows plus metadata.

    Resilient traces additionally evaluate the steady-state error bound
    at the measured maximal perturbation and re-verify the per-row
    contraction flags and the perturbation-norm bounds.
    """
    window = trace.steady_window()
    summary = {
        "n_rows": trace.n_rows,
        "final_residual_sq": float(trace.residual_sq[-1]) if trace.n_rows else None,
        "steady_state_residual_sq": float(np.max(trace.residual_sq[window]))
        if trace.n_rows else None,
        "steady_window_start": int(window.start) if trace.n_rows else None,
        "burn_in": BURN_IN,
    }
    if trace.kind != "resilient":
        return summary

    meta = trace.meta
    upsilon = float(meta["upsilon"])
    gamma = float(meta["gamma"])
    l_phi = float(meta["l_phi"])
    e_bar = float(np.max(trace.e_total)) if trace.n_rows else 0.0
    flags = recursion_flags(trace.residual_sq, trace.e_total, upsilon, gamma, l_phi)
    bound = steady_state_error_bound(upsilon, gamma, l_phi, e_bar)

    # perturbation norms against their linear-in-estimation-error bounds;
    # exact inequalities up to arithmetic slack
    lam_bar = meta.get("lambda_bar")
    slack = 1e-12
    if lam_bar is not None and trace.n_rows:
        lip = float(meta["lipschitz_max"])
        gb = float(meta["grad_bound_max"])
        t = float(meta["n_constraints"])
        theta_ok = np.all(
            trace.e_theta_norm
            <= float(lam_bar) * lip * t * trace.est_error + slack
        )
        lam_ok = np.all(
            trace.e_lambda_norm <= gb * t * trace.est_error + slack
        )
        perturbation_bounds_ok = bool(theta_ok and lam_ok)
    else:
        perturbation_bounds_ok = None

    summary.update({
        "max_E": e_bar,
        "recursion_all_ok": bool(np.all(flags)),
        "steady_state_bound": None if bound is None else float(bound),
        "steady_state_bound_ok": None if bound is None
        else bool(summary["steady_state_residual_sq"] <= bound + 1e-12),
        "perturbation_bounds_ok": perturbation_bounds_ok,
    })
    checks = [summary["recursion_all_ok"]]
    if summary["steady_state_bound_ok"] is not None:
        checks.append(summary["steady_state_bound_ok"])
    if perturbation_bounds_ok is not None:
        checks.append(perturbation_bounds_ok)
    summary["bound_checks_ok"] = bool(all(checks))
    return summary
