"""Simulated uplink channels between agents and coordinator.

A fixed subset of channels is compromised: whatever those agents send is
replaced in transit by an adversarial payload.  Downlink broadcasts are
always delivered intact.  Honest channels pass messages through
bit-for-bit, and everything is deterministic in (state, plan, history).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "LargeRandom",
    "SignFlip",
    "CoordinatedShift",
    "StaleReplay",
    "AttackStrategy",
    "AttackPlan",
    "UplinkBatch",
    "ContaminationStats",
    "apply_attack",
    "contamination_stats",
]


@dataclass(frozen=True)
class LargeRandom:
    """Payload drawn uniformly from ``[-magnitude, magnitude]^d`` each round."""

    magnitude: float

    def __post_init__(self):
        if not math.isfinite(self.magnitude):
            raise ValueError("magnitude must be finite")


@dataclass(frozen=True)
class SignFlip:
    """Payload ``-scale * theta_i``: the agent's true message, inverted."""

    scale: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.scale):
            raise ValueError("scale must be finite")


@dataclass(frozen=True, eq=False)
class CoordinatedShift:
    """All compromised channels send the same fixed target vector."""

    target: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.target, dtype=float))
        if not np.all(np.isfinite(t)):
            raise ValueError("target must be finite")
        object.__setattr__(self, "target", t)


@dataclass(frozen=True)
class StaleReplay:
    """Replay the agent's own message from ``delay`` iterations ago."""

    delay: int

    def __post_init__(self):
        if self.delay < 1:
            raise ValueError("delay must be at least 1")


AttackStrategy = Union[LargeRandom, SignFlip, CoordinatedShift, StaleReplay]


@dataclass(frozen=True, eq=False)
class AttackPlan:
    """Which channels are compromised and what they inject.

    The compromised fraction must respect the declared bound ``alpha``
    (itself below one half), and membership is fixed for a whole run.
    """

    n_agents: int
    alpha: float
    compromised: tuple
    strategy: AttackStrategy
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha < 0.5):
            raise ValueError("alpha must be in [0, 0.5)")
        members = tuple(sorted(int(i) for i in self.compromised))
        if len(set(members)) != len(members):
            raise ValueError("compromised channel indices must be unique")
        if members and (members[0] < 0 or members[-1] >= self.n_agents):
            raise ValueError("compromised channel index out of range")
        if len(members) > self.alpha * self.n_agents + 1e-9:
            raise ValueError(
                f"{len(members)} compromised channels exceed the declared "
                f"bound alpha*N = {self.alpha * self.n_agents:.3f}"
            )
        object.__setattr__(self, "compromised", members)

    @classmethod
    def sampled(cls, n_agents: int, alpha: float, strategy: AttackStrategy,
                seed: int, count: int | None = None) -> "AttackPlan":
        """Draw the compromised set by seed; defaults to ``round(alpha*N)``."""
        if count is None:
            count = int(round(alpha * n_agents))
        rng = np.random.default_rng(seed)
        members = tuple(sorted(rng.choice(n_agents, size=count, replace=False)))
        return cls(n_agents=n_agents, alpha=alpha, compromised=members,
                   strategy=strategy, seed=seed)

    @property
    def honest(self) -> tuple:
        bad = set(self.compromised)
        return tuple(i for i in range(self.n_agents) if i not in bad)


@dataclass(frozen=True, eq=False)
class UplinkBatch:
    """What the coordinator received, plus the withheld ground truth.

    ``truth`` exists only so the harness can score estimators; no
    aggregation rule reads anything but ``messages``.
    """

    messages: np.ndarray
    truth: np.ndarray
    compromised: tuple

    @property
    def n_agents(self) -> int:
        return int(self.messages.shape[0])

    @property
    def honest(self) -> tuple:
        bad = set(self.compromised)
        return tuple(i for i in range(self.n_agents) if i not in bad)


def apply_attack(theta, plan: AttackPlan, history: Sequence = (),
                 iteration: int | None = None) -> UplinkBatch:
    """Produce the received batch for the current round.

    ``history`` holds past parameter matrices (oldest first); the current
    round index defaults to ``len(history)``.  Honest channels carry
    ``theta`` rows untouched.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 2 or theta.shape[0] != plan.n_agents:
        raise ValueError(f"theta must be ({plan.n_agents}, d), got {theta.shape}")
    k = len(history) if iteration is None else int(iteration)
    messages = theta.copy()
    members = list(plan.compromised)
    if members:
        strat = plan.strategy
        if isinstance(strat, LargeRandom):
            rng = np.random.default_rng([plan.seed, k])
            payload = rng.uniform(-strat.magnitude, strat.magnitude,
                                  size=(len(members), theta.shape[1]))
        elif isinstance(strat, SignFlip):
            payload = -strat.scale * theta[members]
        elif isinstance(strat, CoordinatedShift):
            if strat.target.shape[0] != theta.shape[1]:
                raise ValueError("shift target dimension mismatch")
            payload = np.tile(strat.target, (len(members), 1))
        elif isinstance(strat, StaleReplay):
            src = theta
            if k - strat.delay >= 0 and len(history) > k - strat.delay:
                src = np.asarray(history[k - strat.delay], dtype=float)
            elif len(history) > 0:
                src = np.asarray(history[0], dtype=float)
            payload = src[members]
        else:
            raise TypeError(f"unknown attack strategy {strat!r}")
        messages[members] = payload
    return UplinkBatch(messages=messages, truth=theta, compromised=plan.compromised)


@dataclass(frozen=True)
class ContaminationStats:
    n_compromised: int
    n_honest: int
    naive_displacement: float


def contamination_stats(batch: UplinkBatch, plan: AttackPlan | None = None
                        ) -> ContaminationStats:
    """How far the naive average was pushed from the trusted mean."""
    members = batch.compromised if plan is None else plan.compromised
    honest = [i for i in range(batch.n_agents) if i not in set(members)]
    naive = batch.messages.mean(axis=0)
    trusted = batch.truth[honest].mean(axis=0)
    return ContaminationStats(
        n_compromised=len(members),
        n_honest=len(honest),
        naive_displacement=float(np.linalg.norm(naive - trusted)),
    )
