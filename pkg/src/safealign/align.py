"""Trainers: behavior cloning, hybrid preference fine-tuning, baselines.

The fine-tuner starts from a frozen reference policy and optimizes a
hybrid objective over per-state action triples (state, preferred
action, non-preferred action):

* triples rooted in preferred trajectories contrast the dataset action
  against a counterfactual sampled from the current policy, and carry
  an additional imitation (SFT) term weighted by ``lam``;
* triples rooted in non-preferred trajectories contrast a
  policy-sampled action against the dataset action, with no SFT term.

Counterfactual actions are data: they enter the loss only through
density evaluation, and no gradient flows through the sampling path.
Setting ``lam`` to zero recovers plain preference learning (the PPL
baseline).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, NonFiniteLossError
from .data import StateIndex
from .envs import CmdpSpec, Trajectory, rollout
from .nn import (
    GaussianPolicy,
    PolicyGraph,
    checksum,
    gaussian_logp,
    init_adam,
    init_policy,
    mlp_forward,
    parameters,
    policy_gradients,
    sample_actions,
    save_policy,
    update_policy,
)

FROM_PREFERRED = "from_preferred"
FROM_NON_PREFERRED = "from_non_preferred"

STRATEGY_POLICY = "policy"
STRATEGY_MIXED = "mixed"


@dataclass(frozen=True)
class PreferenceTriple:
    """One unit of preference supervision."""

    state: np.ndarray
    action_plus: np.ndarray
    action_minus: np.ndarray
    origin: str


@dataclass(frozen=True)
class TripleBatch:
    """Vectorized triples; ``from_preferred`` marks the origin per row."""

    states: np.ndarray
    action_plus: np.ndarray
    action_minus: np.ndarray
    from_preferred: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i: int) -> PreferenceTriple:
        return PreferenceTriple(
            state=self.states[i],
            action_plus=self.action_plus[i],
            action_minus=self.action_minus[i],
            origin=FROM_PREFERRED if self.from_preferred[i] else FROM_NON_PREFERRED,
        )

    def triples(self) -> list[PreferenceTriple]:
        return [self[i] for i in range(len(self))]


@dataclass(frozen=True)
class AlignConfig:
    """Hyperparameters for preference fine-tuning.

    ``batch_size`` counts whole trajectories per side per iteration;
    every step of each sampled trajectory becomes one triple.  Both
    sides sample with replacement (the non-preferred set is small).
    """

    beta: float = 0.05
    lam: float = 1.6
    lr: float = 3e-4
    batch_size: int = 4
    iterations: int = 20000
    tau: float = 15.0
    counterfactual_strategy: str = STRATEGY_POLICY
    seed: int = 0
    eval_interval: int = 2000
    eval_rollouts: int = 10
    epsilon_cost: float = 1e-3
    d_max: float = 1.0
    checkpoint_interval: int = 0

    def validate(self) -> None:
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lam < 0.0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if self.counterfactual_strategy not in (STRATEGY_POLICY, STRATEGY_MIXED):
            raise ValueError(
                f"counterfactual_strategy must be '{STRATEGY_POLICY}' or "
                f"'{STRATEGY_MIXED}', got {self.counterfactual_strategy!r}"
            )


# --- triple construction -----------------------------------------------------

def _stack_transitions(trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    states = np.concatenate([t.states[:-1] for t in trajectories], axis=0)
    actions = np.concatenate([t.actions for t in trajectories], axis=0)
    return states, actions


def build_triples(
    batch_p: Sequence[Trajectory],
    batch_np: Sequence[Trajectory],
    policy: GaussianPolicy,
    rng: np.random.Generator,
    strategy: str = STRATEGY_POLICY,
    index_np: StateIndex | None = None,
    index_p: StateIndex | None = None,
    d_max: float = 1.0,
) -> TripleBatch:
    """Per-step triples from a trajectory minibatch.

    Policy strategy: the counterfactual next to every dataset action is
    sampled from the current policy.  Mixed strategy: where the opposite
    dataset holds a state within ``d_max`` (z-normalized), its paired
    action is used instead; elsewhere it falls back to policy sampling.
    The fallback draw happens for every row either way, so both
    strategies consume the generator identically.
    """
    if len(batch_p) == 0 and len(batch_np) == 0:
        raise ValueError("cannot build triples from an empty batch")
    if strategy == STRATEGY_MIXED and (len(batch_p) > 0 and index_np is None):
        raise ValueError("mixed strategy requires an index over the non-preferred set")
    if strategy == STRATEGY_MIXED and (len(batch_np) > 0 and index_p is None):
        raise ValueError("mixed strategy requires an index over the preferred set")

    parts_s, parts_plus, parts_minus, parts_mask = [], [], [], []

    if len(batch_p) > 0:
        states, a_plus = _stack_transitions(batch_p)
        a_minus = sample_actions(policy, states, rng)
        if strategy == STRATEGY_MIXED:
            nn_actions, dists = index_np.query_batch(states)
            use = dists <= d_max
            a_minus = np.where(use[:, None], nn_actions, a_minus)
        parts_s.append(states)
        parts_plus.append(a_plus)
        parts_minus.append(a_minus)
        parts_mask.append(np.ones(len(states), dtype=bool))

    if len(batch_np) > 0:
        states, a_minus = _stack_transitions(batch_np)
        a_plus = sample_actions(policy, states, rng)
        if strategy == STRATEGY_MIXED:
            nn_actions, dists = index_p.query_batch(states)
            use = dists <= d_max
            a_plus = np.where(use[:, None], nn_actions, a_plus)
        parts_s.append(states)
        parts_plus.append(a_plus)
        parts_minus.append(a_minus)
        parts_mask.append(np.zeros(len(states), dtype=bool))

    return TripleBatch(
        states=np.concatenate(parts_s, axis=0),
        action_plus=np.concatenate(parts_plus, axis=0),
        action_minus=np.concatenate(parts_minus, axis=0),
        from_preferred=np.concatenate(parts_mask),
    )


# --- the hybrid loss -----------------------------------------------------------

def group_loss(
    lp_plus: Node,
    lp_minus: Node,
    lp_ref_plus: np.ndarray,
    lp_ref_minus: np.ndarray,
    beta: float,
    sft_weight: float,
) -> Node:
    """Mean loss of one origin group.

    -mean[ log sigmoid(beta * Delta) + sft_weight * lp_plus ] where
    Delta = (lp_plus - lp_ref_plus) - (lp_minus - lp_ref_minus).  The
    reference log-densities are plain arrays, so no gradient ever
    reaches the reference policy.
    """
    delta = ad.add(ad.sub(lp_plus, lp_minus), lp_ref_minus - lp_ref_plus)
    loss = ad.scale(ad.mean(ad.log_sigmoid(ad.scale(delta, beta))), -1.0)
    if sft_weight != 0.0:
        loss = ad.sub(loss, ad.scale(ad.mean(lp_plus), sft_weight))
    return loss


def _ref_logp(pi_ref: GaussianPolicy, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    mean = mlp_forward(pi_ref.trunk, states)
    return gaussian_logp(mean, pi_ref.log_std, actions)


def _check_triple_values(values: np.ndarray, offsets: np.ndarray, label: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(offsets[np.argmax(bad)])
        raise NonFiniteLossError(f"non-finite {label} at triple index {i}")


def alignment_loss(
    triples: TripleBatch,
    pi_theta: GaussianPolicy | PolicyGraph,
    pi_ref: GaussianPolicy,
    beta: float,
    lam: float,
) -> tuple[Node, dict[str, float]]:
    """Hybrid DPO+SFT loss over a triple batch.

    Returns the scalar loss node plus the per-group means for logging.
    Pass a :class:`PolicyGraph` to share leaves with the backward pass;
    a bare policy is wrapped automatically.
    """
    if len(triples) == 0:
        raise ValueError("cannot evaluate the loss on an empty triple batch")
    graph = pi_theta if isinstance(pi_theta, PolicyGraph) else PolicyGraph(pi_theta)

    total: Node | None = None
    parts: dict[str, float] = {}
    all_offsets = np.arange(len(triples))
    for label, mask, sft_weight in (
        ("preferred_group", triples.from_preferred, lam),
        ("non_preferred_group", ~triples.from_preferred, 0.0),
    ):
        if not mask.any():
            parts[label] = float("nan")
            continue
        states = triples.states[mask]
        a_plus = triples.action_plus[mask]
        a_minus = triples.action_minus[mask]
        mean_node = graph.mean(states)
        lp_plus = graph.log_prob(states, a_plus, mean=mean_node)
        lp_minus = graph.log_prob(states, a_minus, mean=mean_node)
        offsets = all_offsets[mask]
        _check_triple_values(lp_plus.value, offsets, "policy log-density")
        _check_triple_values(lp_minus.value, offsets, "counterfactual log-density")
        side = group_loss(
            lp_plus,
            lp_minus,
            _ref_logp(pi_ref, states, a_plus),
            _ref_logp(pi_ref, states, a_minus),
            beta,
            sft_weight,
        )
        parts[label] = float(side.value)
        total = side if total is None else ad.add(total, side)

    assert total is not None
    parts["loss"] = float(total.value)
    return total, parts


# --- behavior cloning -----------------------------------------------------------

def select_high_reward(dataset: Sequence[Trajectory], fraction: float = 0.3) -> list[Trajectory]:
    """Top fraction of the corpus by cumulative reward, ignoring cost."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    ranked = sorted(dataset, key=lambda t: (-t.cumulative_reward, t.traj_id))
    k = max(1, int(np.ceil(fraction * len(ranked))))
    return ranked[:k]


def pretrain_bc(
    dataset: Sequence[Trajectory],
    epochs: int = 50,
    hidden_sizes: Sequence[int] = (64, 64),
    lr: float = 3e-4,
    batch_size: int = 256,
    seed: int = 0,
) -> tuple[GaussianPolicy, list[float]]:
    """Maximize the mean log-density of dataset actions.

    Returns the trained policy and the per-step loss curve.
    """
    if len(dataset) == 0:
        raise ValueError("cannot behavior-clone an empty dataset")
    states, actions = _stack_transitions(dataset)
    policy = init_policy(states.shape[1], actions.shape[1], hidden_sizes, seed=seed)
    adam = init_adam(parameters(policy), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBC]))

    losses: list[float] = []
    step = 0
    n = len(states)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            graph = PolicyGraph(policy)
            logp = graph.log_prob(states[rows], actions[rows])
            loss = ad.scale(ad.mean(logp), -1.0)
            if not np.isfinite(loss.value):
                raise NonFiniteLossError(f"behavior cloning diverged at step {step}")
            grads = policy_gradients(loss, graph)
            policy, adam = update_policy(policy, grads, adam)
            losses.append(float(loss.value))
            step += 1
    return policy, losses


# --- label-mismatch diagnostic ----------------------------------------------------

@dataclass
class MismatchLog:
    """Per-quartile counts of comparisons and binary cost-label flips."""

    comparisons_preferred: list[int] = field(default_factory=lambda: [0, 0, 0, 0])
    flips_preferred: list[int] = field(default_factory=lambda: [0, 0, 0, 0])
    comparisons_non_preferred: list[int] = field(default_factory=lambda: [0, 0, 0, 0])
    flips_non_preferred: list[int] = field(default_factory=lambda: [0, 0, 0, 0])

    @staticmethod
    def _pct(flips: int, comparisons: int) -> float:
        return 100.0 * flips / comparisons if comparisons > 0 else 0.0

    def pct_preferred(self, q: int) -> float:
        return self._pct(self.flips_preferred[q], self.comparisons_preferred[q])

    def pct_non_preferred(self, q: int) -> float:
        return self._pct(self.flips_non_preferred[q], self.comparisons_non_preferred[q])

    def pct_total(self, q: int) -> float:
        return self._pct(
            self.flips_preferred[q] + self.flips_non_preferred[q],
            self.comparisons_preferred[q] + self.comparisons_non_preferred[q],
        )

    def as_dict(self) -> dict:
        return {
            "comparisons_preferred": self.comparisons_preferred,
            "flips_preferred": self.flips_preferred,
            "comparisons_non_preferred": self.comparisons_non_preferred,
            "flips_non_preferred": self.flips_non_preferred,
            "pct_preferred": [self.pct_preferred(q) for q in range(4)],
            "pct_non_preferred": [self.pct_non_preferred(q) for q in range(4)],
            "pct_total": [self.pct_total(q) for q in range(4)],
        }


def _counterfactual_costs(
    trajectory: Trajectory,
    policy: GaussianPolicy,
    env: CmdpSpec,
    rng: np.random.Generator,
    strategy: str,
    index: StateIndex | None,
    d_max: float,
) -> float:
    """Cost of the open-loop counterfactual: dataset states, resampled actions."""
    states = trajectory.states[:-1]
    actions = sample_actions(policy, states, rng)
    if strategy == STRATEGY_MIXED and index is not None:
        nn_actions, dists = index.query_batch(states)
        use = dists <= d_max
        actions = np.where(use[:, None], nn_actions, actions)
    actions = np.clip(actions, env.action_low, env.action_high)
    return float(sum(env.cost_fn(s, a) for s, a in zip(states, actions)))


def count_mismatches(
    trajectories: Sequence[Trajectory],
    policy: GaussianPolicy,
    env: CmdpSpec,
    tau: float,
    rng: np.random.Generator,
    strategy: str = STRATEGY_POLICY,
    index: StateIndex | None = None,
    d_max: float = 1.0,
) -> tuple[int, int]:
    """(flips, comparisons) between dataset and counterfactual cost labels."""
    flips = 0
    for t in trajectories:
        cf_cost = _counterfactual_costs(t, policy, env, rng, strategy, index, d_max)
        if (t.cumulative_cost < tau) != (cf_cost < tau):
            flips += 1
    return flips, len(trajectories)


def mismatch_quartiles(
    d_p: Sequence[Trajectory],
    d_np: Sequence[Trajectory],
    snapshots: Sequence[GaussianPolicy],
    env: CmdpSpec,
    tau: float,
    rng: np.random.Generator | int,
    strategy: str = STRATEGY_POLICY,
    index_np: StateIndex | None = None,
    index_p: StateIndex | None = None,
    d_max: float = 1.0,
) -> MismatchLog:
    """Label-flip statistics for one policy snapshot per training quartile."""
    if len(snapshots) != 4:
        raise ValueError(f"expected 4 quartile snapshots, got {len(snapshots)}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(
        np.random.SeedSequence([int(rng), 0x3157])
    )
    log = MismatchLog()
    for q, policy in enumerate(snapshots):
        if policy.state_dim != env.state_dim:
            raise ValueError(
                f"snapshot {q}: policy state dim {policy.state_dim} "
                f"does not match env {env.state_dim}"
            )
        f, c = count_mismatches(d_p, policy, env, tau, gen, strategy, index_np, d_max)
        log.flips_preferred[q], log.comparisons_preferred[q] = f, c
        f, c = count_mismatches(d_np, policy, env, tau, gen, strategy, index_p, d_max)
        log.flips_non_preferred[q], log.comparisons_non_preferred[q] = f, c
    return log


# --- fine-tuning ---------------------------------------------------------------------

@dataclass
class FinetuneResult:
    policy: GaussianPolicy
    mismatch: MismatchLog
    history: list[dict]
    gradient_updates: int
    ref_checksum_before: str
    ref_checksum_after: str


def _history_record(iteration: int, loss: float | None) -> dict:
    return {
        "iteration": iteration,
        "loss": loss,
        "eval_reward": None,
        "eval_cost": None,
        "mismatch_pref_pct": None,
        "mismatch_nonpref_pct": None,
    }


def finetune(
    pi_ref: GaussianPolicy,
    d_p: Sequence[Trajectory],
    d_np: Sequence[Trajectory],
    config: AlignConfig,
    env: CmdpSpec | None = None,
    checkpoint_dir=None,
) -> FinetuneResult:
    """Single-stage preference fine-tuning of a copy of the reference policy.

    Each iteration samples ``batch_size`` trajectories per side, builds
    triples against the current policy, and takes exactly one gradient
    step, so the update count equals ``iterations``.  The reference
    policy is never touched (checksums before and after are returned).
    Mismatch statistics are collected with the policy as it stands at
    the start of each training quartile, and small evaluation rollouts
    run every ``eval_interval`` iterations when an environment is
    supplied.
    """
    config.validate()
    if len(d_p) == 0 or len(d_np) == 0:
        raise ValueError("both preference sets must be nonempty")

    ref_before = checksum(pi_ref)
    policy = pi_ref
    adam = init_adam(parameters(policy), lr=config.lr)
    train_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0xF1DE]))

    index_np = index_p = None
    if config.counterfactual_strategy == STRATEGY_MIXED:
        index_np = StateIndex.from_trajectories(d_np, owner="non_preferred")
        index_p = StateIndex.from_trajectories(d_p, owner="preferred")

    # Mismatch snapshots sit at the start of each training quartile: they
    # measure the counterfactual labels that quartile's updates consume.
    quartile_marks = [(config.iterations * q) // 4 for q in (0, 1, 2, 3)]
    mismatch = MismatchLog()
    history: list[dict] = []
    updates = 0

    for i in range(1, config.iterations + 1):
        record = _history_record(i, None)
        while quartile_marks and i - 1 == quartile_marks[0]:
            q = 4 - len(quartile_marks)
            quartile_marks.pop(0)
            if env is not None:
                mm_rng = np.random.default_rng(
                    np.random.SeedSequence([int(config.seed), 0x3157, q])
                )
                f, c = count_mismatches(
                    d_p, policy, env, config.tau, mm_rng,
                    config.counterfactual_strategy, index_np, config.d_max,
                )
                mismatch.flips_preferred[q], mismatch.comparisons_preferred[q] = f, c
                f, c = count_mismatches(
                    d_np, policy, env, config.tau, mm_rng,
                    config.counterfactual_strategy, index_p, config.d_max,
                )
                mismatch.flips_non_preferred[q], mismatch.comparisons_non_preferred[q] = f, c
                record["mismatch_pref_pct"] = mismatch.pct_preferred(q)
                record["mismatch_nonpref_pct"] = mismatch.pct_non_preferred(q)

        idx_p = train_rng.integers(0, len(d_p), size=config.batch_size)
        idx_np = train_rng.integers(0, len(d_np), size=config.batch_size)
        triples = build_triples(
            [d_p[j] for j in idx_p],
            [d_np[j] for j in idx_np],
            policy,
            train_rng,
            strategy=config.counterfactual_strategy,
            index_np=index_np,
            index_p=index_p,
            d_max=config.d_max,
        )
        graph = PolicyGraph(policy)
        try:
            loss, _ = alignment_loss(triples, graph, pi_ref, config.beta, config.lam)
            grads = policy_gradients(loss, graph)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"iteration {i}: {exc}") from exc
        policy, adam = update_policy(policy, grads, adam)
        updates += 1

        record["loss"] = float(loss.value)
        if env is not None and config.eval_interval > 0 and i % config.eval_interval == 0:
            eval_rng = np.random.default_rng(
                np.random.SeedSequence([int(config.seed), 0xE7A1, i])
            )
            rewards, costs = [], []
            for _ in range(config.eval_rollouts):
                t = rollout(env, policy, mode="stochastic", seed=eval_rng)
                rewards.append(t.cumulative_reward)
                costs.append(t.cumulative_cost)
            record["eval_reward"] = float(np.mean(rewards))
            record["eval_cost"] = float(np.mean(costs))
        if (
            checkpoint_dir is not None
            and config.checkpoint_interval > 0
            and i % config.checkpoint_interval == 0
        ):
            save_policy(
                Path(checkpoint_dir) / f"checkpoint_{i:06d}.json", policy,
                rng_seed=config.seed,
            )
        history.append(record)

    return FinetuneResult(
        policy=policy,
        mismatch=mismatch,
        history=history,
        gradient_updates=updates,
        ref_checksum_before=ref_before,
        ref_checksum_after=checksum(pi_ref),
    )


def train_ppl(
    pi_ref: GaussianPolicy,
    d_p: Sequence[Trajectory],
    d_np: Sequence[Trajectory],
    config: AlignConfig,
    env: CmdpSpec | None = None,
    checkpoint_dir=None,
) -> FinetuneResult:
    """Preference-only baseline: the same pipeline with the SFT weight forced to 0."""
    return finetune(
        pi_ref, d_p, d_np, replace(config, lam=0.0), env=env, checkpoint_dir=checkpoint_dir
    )
