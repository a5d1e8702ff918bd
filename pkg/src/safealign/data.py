"""Preference-set construction, trajectory persistence, state lookup.

An offline corpus is split by a cost budget tau into safe and unsafe
trajectories, from which the two supervision sets are drawn:

* preferred set -- stratified sample over the top reward quantiles of
  the safe half, so high-reward safe behavior dominates;
* non-preferred set -- drawn from the mildly-unsafe end (lowest-cost
  unsafe trajectories), spread evenly across their reward range.

The module also provides the exact nearest-neighbor index used when
counterfactual actions are taken from the opposite dataset instead of
being sampled from the policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envs import Trajectory


class DatasetFormatError(ValueError):
    """A trajectory file line failed to parse or validate."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def partition(dataset: Sequence[Trajectory], tau: float) -> tuple[list[Trajectory], list[Trajectory]]:
    """Split by cumulative cost: safe strictly below tau, unsafe at or above."""
    if len(dataset) == 0:
        raise ValueError("cannot partition an empty dataset")
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    safe = [t for t in dataset if t.cumulative_cost < tau]
    unsafe = [t for t in dataset if t.cumulative_cost >= tau]
    return safe, unsafe


@dataclass(frozen=True)
class PreferenceDatasets:
    """The preferred/non-preferred trajectory sets plus their provenance."""

    preferred: tuple[Trajectory, ...]
    non_preferred: tuple[Trajectory, ...]
    tau: float
    n_p_requested: int
    n_np_requested: int
    seed: int
    source_id: str
    shortfall_preferred: bool
    shortfall_non_preferred: bool

    def validate(self) -> None:
        for t in self.preferred:
            if t.cumulative_cost >= self.tau:
                raise ValueError(f"preferred trajectory {t.traj_id} has cost >= tau")
        for t in self.non_preferred:
            if t.cumulative_cost < self.tau:
                raise ValueError(f"non-preferred trajectory {t.traj_id} has cost < tau")
        if not self.shortfall_preferred and len(self.preferred) != self.n_p_requested:
            raise ValueError("preferred set size mismatch without shortfall flag")
        if not self.shortfall_non_preferred and len(self.non_preferred) != self.n_np_requested:
            raise ValueError("non-preferred set size mismatch without shortfall flag")

    def manifest(self) -> dict:
        return {
            "tau": self.tau,
            "n_p": self.n_p_requested,
            "n_np": self.n_np_requested,
            "seed": self.seed,
            "source_id": self.source_id,
            "preferred_ids": [t.traj_id for t in self.preferred],
            "non_preferred_ids": [t.traj_id for t in self.non_preferred],
            "shortfall_preferred": self.shortfall_preferred,
            "shortfall_non_preferred": self.shortfall_non_preferred,
        }


def quantile_bins(n_items: int, n_bins: int) -> list[range]:
    """Split 0..n_items-1 into n_bins contiguous bins of near-equal size."""
    base, extra = divmod(n_items, n_bins)
    bins, start = [], 0
    for i in range(n_bins):
        size = base + (1 if i < extra else 0)
        bins.append(range(start, start + size))
        start += size
    return bins


N_REWARD_BINS = 5
UNSAFE_POOL_LIMIT = 100


def build_preference_sets(
    dataset: Sequence[Trajectory],
    tau: float,
    n_p: int = 100,
    n_np: int = 20,
    seed: int = 0,
    source_id: str = "",
    unsafe_pool: str = "lowest_cost",
) -> PreferenceDatasets:
    """Draw the preferred and non-preferred sets from an offline corpus.

    Preferred: safe trajectories sorted by reward descending; the top
    half is cut into five quantile bins and each bin is sampled equally.
    Non-preferred: the 100 unsafe trajectories nearest the budget
    (``unsafe_pool`` selects which end of the cost ordering), thinned to
    evenly spaced reward ranks so the set spans the reward range.
    Deterministic given the seed; ties always resolve by dataset index.
    """
    safe, unsafe = partition(dataset, tau)
    if len(safe) == 0 or len(unsafe) == 0:
        raise ValueError(
            f"both sides of the tau={tau} split must be nonempty "
            f"(safe={len(safe)}, unsafe={len(unsafe)})"
        )
    if unsafe_pool not in ("lowest_cost", "highest_cost"):
        raise ValueError(f"unsafe_pool must be 'lowest_cost' or 'highest_cost', got {unsafe_pool!r}")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9EF]))

    # Preferred: stratified over reward quantiles of the top half.
    by_reward = sorted(safe, key=lambda t: (-t.cumulative_reward, t.traj_id))
    pool = by_reward[: (len(by_reward) + 1) // 2]
    if len(pool) < n_p:
        # The top half alone cannot supply the request; widen to all of SAFE.
        pool = by_reward
    shortfall_p = n_p > len(pool)
    if shortfall_p:
        preferred = list(pool)
    else:
        preferred = []
        bins = quantile_bins(len(pool), N_REWARD_BINS)
        base, extra = divmod(n_p, N_REWARD_BINS)
        for i, bin_range in enumerate(bins):
            want = base + (1 if i < extra else 0)
            take = min(want, len(bin_range))
            picks = rng.choice(len(bin_range), size=take, replace=False)
            preferred.extend(pool[bin_range[j]] for j in sorted(picks))
        if len(preferred) < n_p:
            # Bins smaller than their allocation: top up from unused pool slots.
            chosen = {t.traj_id for t in preferred}
            for t in pool:
                if len(preferred) == n_p:
                    break
                if t.traj_id not in chosen:
                    preferred.append(t)

    # Non-preferred: mildly-unsafe pool, then evenly spaced reward ranks.
    ascending = unsafe_pool == "lowest_cost"
    by_cost = sorted(
        unsafe,
        key=lambda t: (t.cumulative_cost if ascending else -t.cumulative_cost, t.traj_id),
    )
    np_pool = sorted(
        by_cost[: min(UNSAFE_POOL_LIMIT, len(by_cost))],
        key=lambda t: (t.cumulative_reward, t.traj_id),
    )
    shortfall_np = n_np > len(np_pool)
    if shortfall_np:
        non_preferred = list(np_pool)
    elif n_np == 1:
        non_preferred = [np_pool[0]]
    else:
        ranks = [round(j * (len(np_pool) - 1) / (n_np - 1)) for j in range(n_np)]
        non_preferred = [np_pool[r] for r in ranks]

    sets = PreferenceDatasets(
        preferred=tuple(preferred),
        non_preferred=tuple(non_preferred),
        tau=tau,
        n_p_requested=n_p,
        n_np_requested=n_np,
        seed=seed,
        source_id=source_id,
        shortfall_preferred=shortfall_p,
        shortfall_non_preferred=shortfall_np,
    )
    sets.validate()
    return sets


# --- nearest-neighbor index ---------------------------------------------------

@dataclass(frozen=True)
class StateIndex:
    """Exact nearest-neighbor lookup over z-normalized states.

    Brute force is fine at this scale (a few thousand entries); queries
    are vectorized, and ties break toward the lowest insertion index.
    """

    states: np.ndarray
    actions: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    owner: str
    z_states: np.ndarray

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], owner: str = "") -> "StateIndex":
        if len(trajectories) == 0:
            raise ValueError("cannot index an empty trajectory list")
        states = np.concatenate([t.states[:-1] for t in trajectories], axis=0)
        actions = np.concatenate([t.actions for t in trajectories], axis=0)
        mean = states.mean(axis=0)
        std = np.maximum(states.std(axis=0), 1e-8)
        return cls(
            states=states,
            actions=actions,
            mean=mean,
            std=std,
            owner=owner,
            z_states=(states - mean) / std,
        )

    def __len__(self) -> int:
        return len(self.states)

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def query(self, state: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Nearest entry: (state, paired action, z-normalized L2 distance)."""
        diff = self.z_states - self._normalize(np.asarray(state))
        d2 = np.einsum("ij,ij->i", diff, diff)
        i = int(np.argmin(d2))
        return self.states[i], self.actions[i], float(np.sqrt(d2[i]))

    def query_batch(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized lookup: (actions (N, A), distances (N,))."""
        zq = self._normalize(np.asarray(states))
        # The query-norm term is constant per row and cannot move the
        # argmin, so only |zi|^2 - 2 zq.zi is scored; true distances are
        # reconstructed for the winners alone.
        scores = zq @ (-2.0 * self.z_states.T)
        scores += np.einsum("ij,ij->i", self.z_states, self.z_states)[None, :]
        idx = np.argmin(scores, axis=1)
        diff = self.z_states[idx] - zq
        dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        return self.actions[idx], dists


def nearest_counterfactual(index: StateIndex, state: np.ndarray):
    """The opposite-dataset entry closest to the query state."""
    return index.query(state)


# --- persistence ----------------------------------------------------------------

def save_trajectories(path, trajectories: Sequence[Trajectory]) -> None:
    """One JSON object per line; float repr keeps full precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            record = {
                "id": t.traj_id,
                "states": t.states.tolist(),
                "actions": t.actions.tolist(),
                "rewards": t.rewards.tolist(),
                "costs": t.costs.tolist(),
            }
            fh.write(json.dumps(record))
            fh.write("\n")


def load_trajectories(path) -> list[Trajectory]:
    """Parse a trajectory file, validating the length invariant per line."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON ({exc.msg})", line_number) from exc
            try:
                traj = Trajectory(
                    traj_id=int(record["id"]),
                    states=np.asarray(record["states"], dtype=np.float64),
                    actions=np.asarray(record["actions"], dtype=np.float64),
                    rewards=np.asarray(record["rewards"], dtype=np.float64),
                    costs=np.asarray(record["costs"], dtype=np.float64),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"malformed record ({exc})", line_number) from exc
            try:
                traj.validate()
            except ValueError as exc:
                raise DatasetFormatError(str(exc), line_number) from exc
            out.append(traj)
    return out


def save_manifest(path, sets: PreferenceDatasets) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sets.manifest(), fh, indent=2)
        fh.write("\n")


# --- diagnostics -----------------------------------------------------------------

def jaccard_overlap(
    preferred: Sequence[Trajectory],
    non_preferred: Sequence[Trajectory],
    bins: int = 20,
) -> float:
    """State-occupancy overlap between the two sets on a shared grid.

    Both sets are discretized onto a per-dimension ``bins`` grid spanning
    their joint state range; the result is |intersection| / |union| of
    the occupied cells.  Reported as a coverage diagnostic, not a target.
    """
    sp = np.concatenate([t.states for t in preferred], axis=0)
    snp = np.concatenate([t.states for t in non_preferred], axis=0)
    lo = np.minimum(sp.min(axis=0), snp.min(axis=0))
    hi = np.maximum(sp.max(axis=0), snp.max(axis=0))
    span = np.maximum(hi - lo, 1e-9)

    def cells(x):
        scaled = np.clip(((x - lo) / span * bins).astype(int), 0, bins - 1)
        return {tuple(row) for row in scaled}

    cp, cn = cells(sp), cells(snp)
    union = cp | cn
    if not union:
        return 0.0
    return len(cp & cn) / len(union)
