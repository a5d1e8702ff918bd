"""Normalized-metric evaluation: cost/reward normalization, CVaR, reports.

Conventions: normalized cost is (C + eps) / (kappa + eps), so a policy
is safe exactly when its mean cumulative cost is at or below the budget
kappa; normalized reward is min-max against the source corpus returns
(it can exceed 1 if the policy beats the corpus).  Both conventions are
echoed into every report.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envs import CmdpSpec, Trajectory, rollout
from .nn import GaussianPolicy

DEFAULT_EPSILON = 1e-3
DEFAULT_CVAR_ALPHA = 0.9


@dataclass(frozen=True)
class NormalizationStats:
    """Corpus reward range and the task cost budget."""

    r_min: float
    r_max: float
    kappa: float

    @classmethod
    def from_corpus(cls, corpus: Sequence[Trajectory], kappa: float) -> "NormalizationStats":
        if len(corpus) == 0:
            raise ValueError("cannot derive normalization stats from an empty corpus")
        rewards = [t.cumulative_reward for t in corpus]
        stats = cls(r_min=min(rewards), r_max=max(rewards), kappa=kappa)
        stats.validate()
        return stats

    def validate(self) -> None:
        if not self.r_max > self.r_min:
            raise ValueError(f"degenerate reward range: [{self.r_min}, {self.r_max}]")


def normalized_cost(c_pi: float, kappa: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """(C + eps) / (kappa + eps); equals 1 exactly at the budget."""
    if c_pi < 0.0 or kappa < 0.0:
        raise ValueError(f"cost and budget must be non-negative, got {c_pi}, {kappa}")
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return (c_pi + epsilon) / (kappa + epsilon)


def normalized_reward(r_pi: float, stats: NormalizationStats) -> float:
    stats.validate()
    return (r_pi - stats.r_min) / (stats.r_max - stats.r_min)


def cvar(values: Sequence[float], alpha: float) -> float:
    """Mean of the worst (1 - alpha) fraction: the top ceil((1-alpha)*n) values."""
    if len(values) == 0:
        raise ValueError("cvar of an empty list is undefined")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    ordered = sorted(values, reverse=True)
    k = math.ceil((1.0 - alpha) * len(ordered))
    return float(np.mean(ordered[:k]))


@dataclass(frozen=True)
class EvalReport:
    """Aggregates of a rollout batch under one policy."""

    normalized_reward: float
    normalized_cost: float
    is_safe: bool
    cvar_cost: float
    n_rollouts: int
    mean_reward: float
    mean_cost: float
    rollout_rewards: tuple[float, ...]
    rollout_costs: tuple[float, ...]
    kappa: float
    epsilon: float
    cvar_alpha: float
    seed: int

    def as_dict(self) -> dict:
        return {
            "normalized_reward": self.normalized_reward,
            "normalized_cost": self.normalized_cost,
            "is_safe": self.is_safe,
            "cvar_cost": self.cvar_cost,
            "n_rollouts": self.n_rollouts,
            "mean_reward": self.mean_reward,
            "mean_cost": self.mean_cost,
            "rollout_rewards": list(self.rollout_rewards),
            "rollout_costs": list(self.rollout_costs),
            "kappa": self.kappa,
            "epsilon": self.epsilon,
            "cvar_alpha": self.cvar_alpha,
            "seed": self.seed,
        }


def evaluate(
    policy: GaussianPolicy,
    env: CmdpSpec,
    n_rollouts: int,
    kappa: float,
    epsilon: float = DEFAULT_EPSILON,
    stats: NormalizationStats | None = None,
    seed: int = 0,
    mode: str = "stochastic",
    cvar_alpha: float = DEFAULT_CVAR_ALPHA,
) -> EvalReport:
    """Run rollouts and summarize them under the normalization conventions.

    Without corpus stats the normalized reward falls back to the raw
    mean return (reported as-is).
    """
    if n_rollouts < 1:
        raise ValueError(f"n_rollouts must be >= 1, got {n_rollouts}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xEA1]))
    rewards, costs = [], []
    for _ in range(n_rollouts):
        t = rollout(env, policy, mode=mode, seed=rng)
        rewards.append(t.cumulative_reward)
        costs.append(t.cumulative_cost)
    mean_reward = float(np.mean(rewards))
    mean_cost = float(np.mean(costs))
    ncost = normalized_cost(mean_cost, kappa, epsilon)
    nreward = normalized_reward(mean_reward, stats) if stats is not None else mean_reward
    return EvalReport(
        normalized_reward=nreward,
        normalized_cost=ncost,
        is_safe=ncost <= 1.0,
        cvar_cost=cvar(costs, cvar_alpha),
        n_rollouts=n_rollouts,
        mean_reward=mean_reward,
        mean_cost=mean_cost,
        rollout_rewards=tuple(rewards),
        rollout_costs=tuple(costs),
        kappa=kappa,
        epsilon=epsilon,
        cvar_alpha=cvar_alpha,
        seed=seed,
    )


def safety_fraction(reports: Sequence[EvalReport]) -> float:
    if len(reports) == 0:
        raise ValueError("safety fraction of an empty report list is undefined")
    return sum(1 for r in reports if r.is_safe) / len(reports)


def write_report(path, report: EvalReport, config_echo: dict | None = None) -> None:
    doc = report.as_dict()
    doc["config"] = config_echo or {}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


TABLE_COLUMNS = [
    "method",
    "tau",
    "seed",
    "mean_reward",
    "mean_cost",
    "normalized_reward",
    "normalized_cost",
    "cvar_cost",
    "is_safe",
]


def write_table(path, rows: Sequence[dict]) -> None:
    """Flat comparison table, one row per method x tau x seed plus mean rows."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in TABLE_COLUMNS})
