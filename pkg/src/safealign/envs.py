"""Toy constrained MDPs, scripted data-collection controllers, rollouts.

Two desk-scale tasks with explicit reward and cost functions:

* ``speedlimit1d`` -- a point mass on a line.  Acceleration is the
  action, reward is the velocity reached each step, and cost is an
  indicator that the velocity exceeds the limit.  Fast driving is
  rewarded and penalized at the same time, which is exactly the
  reward/cost tension the alignment pipeline is meant to resolve.
* ``hazardnav2d`` -- 2-D navigation toward a goal with three circular
  hazard regions between the usual start area and the goal.

Reward and cost are pure functions of (state, action), evaluated on the
deterministic successor the action produces, so re-scoring a trajectory
under counterfactual actions is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .nn import GaussianPolicy, forward_mean, sample_action

Rng = np.random.Generator


@dataclass(frozen=True)
class CmdpSpec:
    """A constrained MDP: dynamics plus reward, cost, and bounds."""

    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    gamma: float
    cost_max: float
    initial_state: Callable[[Rng], np.ndarray]
    transition: Callable[[np.ndarray, np.ndarray, Rng], np.ndarray]
    reward_fn: Callable[[np.ndarray, np.ndarray], float]
    cost_fn: Callable[[np.ndarray, np.ndarray], float]


@dataclass
class Trajectory:
    """One episode: T+1 states, T actions, and per-step reward/cost."""

    traj_id: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray

    @property
    def cumulative_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def cumulative_cost(self) -> float:
        return float(self.costs.sum())

    def __len__(self) -> int:
        return len(self.actions)

    def validate(self) -> None:
        n = len(self.actions)
        if not (len(self.rewards) == len(self.costs) == n == len(self.states) - 1):
            raise ValueError(
                f"trajectory {self.traj_id}: lengths disagree "
                f"(states {len(self.states)}, actions {n}, "
                f"rewards {len(self.rewards)}, costs {len(self.costs)})"
            )


# --- SpeedLimit1D ----------------------------------------------------------

SPEED_DT = 0.1
SPEED_DRAG = 0.05
SPEED_LIMIT = 1.0
SPEED_HORIZON = 100


def _speed_next_velocity(state: np.ndarray, action: np.ndarray) -> float:
    v = state[1]
    return float(v + action[0] * SPEED_DT - SPEED_DRAG * v * SPEED_DT)


def _speed_transition(state: np.ndarray, action: np.ndarray, rng: Rng) -> np.ndarray:
    pos = state[0] + state[1] * SPEED_DT
    return np.array([pos, _speed_next_velocity(state, action)])


def speed_limit_env() -> CmdpSpec:
    return CmdpSpec(
        name="speedlimit1d",
        state_dim=2,
        action_dim=1,
        action_low=np.array([-1.0]),
        action_high=np.array([1.0]),
        horizon=SPEED_HORIZON,
        gamma=0.99,
        cost_max=1.0,
        initial_state=lambda rng: np.zeros(2),
        transition=_speed_transition,
        reward_fn=lambda s, a: _speed_next_velocity(s, a),
        cost_fn=lambda s, a: 1.0 if _speed_next_velocity(s, a) > SPEED_LIMIT else 0.0,
    )


# --- HazardNav2D ------------------------------------------------------------

NAV_GOAL = np.array([1.5, 1.5])
NAV_HAZARDS = np.array([[0.0, 0.0], [0.8, 0.3], [0.3, 1.0]])
NAV_HAZARD_RADIUS = 0.35
NAV_BOUND = 2.0
NAV_HORIZON = 60
NAV_NOISE_SIGMA = 0.01


def _nav_deterministic_next(state: np.ndarray, action: np.ndarray) -> np.ndarray:
    return np.clip(state + action, -NAV_BOUND, NAV_BOUND)


def _nav_in_hazard(point: np.ndarray) -> bool:
    d = np.linalg.norm(NAV_HAZARDS - point, axis=1)
    return bool(np.any(d <= NAV_HAZARD_RADIUS))


def hazard_nav_env(noise_sigma: float = NAV_NOISE_SIGMA) -> CmdpSpec:
    def transition(state, action, rng):
        nxt = _nav_deterministic_next(state, action)
        if noise_sigma > 0.0:
            nxt = np.clip(nxt + rng.normal(0.0, noise_sigma, size=2), -NAV_BOUND, NAV_BOUND)
        return nxt

    return CmdpSpec(
        name="hazardnav2d",
        state_dim=2,
        action_dim=2,
        action_low=np.array([-0.2, -0.2]),
        action_high=np.array([0.2, 0.2]),
        horizon=NAV_HORIZON,
        gamma=0.99,
        cost_max=1.0,
        initial_state=lambda rng: rng.uniform(-1.8, -1.2, size=2),
        transition=transition,
        reward_fn=lambda s, a: -float(
            np.linalg.norm(_nav_deterministic_next(s, a) - NAV_GOAL)
        ),
        cost_fn=lambda s, a: 1.0 if _nav_in_hazard(_nav_deterministic_next(s, a)) else 0.0,
    )


ENV_BUILDERS = {
    "speedlimit1d": speed_limit_env,
    "hazardnav2d": hazard_nav_env,
}

# Cost-budget defaults scaled to each task's cost magnitude.
DEFAULT_TAUS = {
    "speedlimit1d": [10.0, 15.0, 20.0],
    "hazardnav2d": [4.0, 6.0, 8.0],
}


def make_env(name: str) -> CmdpSpec:
    """Build a bundled environment by name."""
    key = name.lower()
    if key not in ENV_BUILDERS:
        raise ValueError(f"unknown environment {name!r}; valid names: {sorted(ENV_BUILDERS)}")
    return ENV_BUILDERS[key]()


def default_tau(env_name: str) -> float:
    taus = DEFAULT_TAUS[env_name.lower()]
    return taus[len(taus) // 2]


# --- scripted controllers ----------------------------------------------------

@dataclass
class VelocityTracker:
    """Proportional cruise controller for speedlimit1d.

    Each episode picks a velocity target uniformly from [target_low,
    target_high].  Against drag the closed loop settles at
    target * gain / (gain + drag), so whether the controller is safe is
    set by that equilibrium, not the nominal target.
    """

    target_low: float
    target_high: float
    gain: float = 2.0
    noise_std: float = 0.05
    target: float = field(default=0.0, init=False)

    def reset(self, rng: Rng) -> None:
        self.target = float(rng.uniform(self.target_low, self.target_high))

    def act(self, state: np.ndarray, rng: Rng) -> np.ndarray:
        a = self.gain * (self.target - state[1])
        if self.noise_std > 0.0:
            a += self.noise_std * rng.standard_normal()
        return np.array([a])


@dataclass
class ThrottleController:
    """Reckless max-reward controller for speedlimit1d.

    Full throttle until the episode's (over-the-limit) velocity target,
    braking above it.  Its actions are aggressive everywhere it drives,
    which makes its state-action pairs sharply contrast with cruise
    behavior at comparable states.
    """

    target_low: float
    target_high: float
    throttle: float = 1.0
    brake: float = -0.3
    noise_std: float = 0.05
    target: float = field(default=0.0, init=False)

    def reset(self, rng: Rng) -> None:
        self.target = float(rng.uniform(self.target_low, self.target_high))

    def act(self, state: np.ndarray, rng: Rng) -> np.ndarray:
        a = self.throttle if state[1] < self.target else self.brake
        if self.noise_std > 0.0:
            a += self.noise_std * rng.standard_normal()
        return np.array([a])


@dataclass
class GoalSeeker:
    """Step-toward-goal controller for hazardnav2d.

    With ``avoid_hazards`` set, adds a repulsive term near each hazard so
    the path detours; otherwise it walks straight through them.
    """

    step_low: float
    step_high: float
    avoid_hazards: bool = True
    noise_std: float = 0.01
    step_scale: float = field(default=0.0, init=False)

    def reset(self, rng: Rng) -> None:
        self.step_scale = float(rng.uniform(self.step_low, self.step_high))

    def act(self, state: np.ndarray, rng: Rng) -> np.ndarray:
        to_goal = NAV_GOAL - state
        dist = np.linalg.norm(to_goal)
        direction = to_goal / dist if dist > 1e-9 else np.zeros(2)
        a = self.step_scale * direction
        if self.avoid_hazards:
            for center in NAV_HAZARDS:
                away = state - center
                d = np.linalg.norm(away)
                margin = NAV_HAZARD_RADIUS + 0.25
                if 1e-9 < d < margin:
                    a += 0.25 * (margin - d) / margin * (away / d)
        if self.noise_std > 0.0:
            a += self.noise_std * rng.standard_normal(2)
        return a


def default_behavior_mix(env_name: str):
    """Controller mix used when synthesizing the bundled offline corpora.

    The mix spans slow, safe-cruise, and over-the-limit behavior so the
    cumulative reward and cost distributions are both wide and sit on
    both sides of the default cost budgets.
    """
    key = env_name.lower()
    if key == "speedlimit1d":
        # The gentle-gain cruise family settles at target * gain / (gain + drag),
        # i.e. equilibrium velocities of roughly 0.96 to 0.99 here: high-reward
        # but legal.  Its moderate ramp actions (~0.65) contrast with the
        # throttle family's bang-bang +1 at the same states.
        return [
            (VelocityTracker(1.03, 1.065, gain=0.65, noise_std=0.02), 0.40),
            (VelocityTracker(0.10, 0.50, noise_std=0.02), 0.25),
            (ThrottleController(1.00, 1.05), 0.35),
        ]
    if key == "hazardnav2d":
        return [
            (GoalSeeker(0.10, 0.16, avoid_hazards=True), 0.45),
            (GoalSeeker(0.12, 0.20, avoid_hazards=False), 0.35),
            (GoalSeeker(0.02, 0.05, avoid_hazards=True), 0.20),
        ]
    raise ValueError(f"unknown environment {env_name!r}; valid names: {sorted(ENV_BUILDERS)}")


# --- rollouts -----------------------------------------------------------------

Actor = Union[GaussianPolicy, Callable[[np.ndarray, Rng], np.ndarray]]


def _as_rng(seed: Union[int, Rng]) -> Rng:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence([int(seed)]))


def rollout(
    env: CmdpSpec,
    actor: Actor,
    mode: str = "stochastic",
    seed: Union[int, Rng] = 0,
    traj_id: int = 0,
) -> Trajectory:
    """Run one episode, clipping actions to bounds and recording per-step data."""
    if mode not in ("stochastic", "mean"):
        raise ValueError(f"mode must be 'stochastic' or 'mean', got {mode!r}")
    if isinstance(actor, GaussianPolicy) and actor.state_dim != env.state_dim:
        raise ValueError(
            f"policy state dim {actor.state_dim} does not match env {env.state_dim}"
        )
    rng = _as_rng(seed)
    if hasattr(actor, "reset"):
        actor.reset(rng)

    state = np.asarray(env.initial_state(rng), dtype=np.float64)
    states = [state]
    actions, rewards, costs = [], [], []
    for t in range(env.horizon):
        if not np.all(np.isfinite(state)):
            raise ArithmeticError(f"non-finite state encountered at step {t}")
        if isinstance(actor, GaussianPolicy):
            raw = forward_mean(actor, state) if mode == "mean" else sample_action(actor, state, rng)
        elif hasattr(actor, "act"):
            raw = actor.act(state, rng)
        else:
            raw = actor(state, rng)
        action = np.clip(np.asarray(raw, dtype=np.float64), env.action_low, env.action_high)
        rewards.append(env.reward_fn(state, action))
        costs.append(env.cost_fn(state, action))
        state = np.asarray(env.transition(state, action, rng), dtype=np.float64)
        actions.append(action)
        states.append(state)

    traj = Trajectory(
        traj_id=traj_id,
        states=np.asarray(states),
        actions=np.asarray(actions),
        rewards=np.asarray(rewards),
        costs=np.asarray(costs),
    )
    traj.validate()
    return traj


def synthesize_dataset(
    env: CmdpSpec,
    n_traj: int,
    behavior_mix: Sequence[tuple[Actor, float]] | None = None,
    seed: int = 0,
) -> list[Trajectory]:
    """Sample a corpus by drawing each trajectory's generator from the mix."""
    if behavior_mix is None:
        behavior_mix = default_behavior_mix(env.name)
    if len(behavior_mix) == 0:
        raise ValueError("behavior_mix must not be empty")
    weights = np.array([w for _, w in behavior_mix], dtype=np.float64)
    if np.any(weights <= 0.0):
        raise ValueError("behavior_mix weights must be positive")
    weights = weights / weights.sum()

    master = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5D5]))
    children = np.random.SeedSequence([int(seed), 0xDA7A]).spawn(n_traj)
    dataset = []
    for i in range(n_traj):
        k = int(master.choice(len(behavior_mix), p=weights))
        actor = behavior_mix[k][0]
        traj = rollout(env, actor, mode="stochastic", seed=np.random.default_rng(children[i]), traj_id=i)
        dataset.append(traj)
    return dataset
