"""Feed-forward diagonal-Gaussian policies and the Adam optimizer.

Parameters live in frozen dataclasses holding float64 numpy arrays;
updates produce new instances, so a snapshot taken at any point is
immutable and safe to hand to concurrent evaluation.  Inference paths
(:func:`forward_mean`, :func:`log_prob`, :func:`sample_action`) are
plain numpy; training code lifts the same parameters into the autodiff
graph through :class:`PolicyGraph`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_TWO_PI = math.log(2.0 * math.pi)

CHECKPOINT_FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Input dimensions do not match the network."""


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a tanh MLP with a linear output layer."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def validate(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(
                    f"layer {i}: expected input dim {self.weights[i - 1].shape[1]}, "
                    f"got {w.shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameter entries")


@dataclass(frozen=True)
class GaussianPolicy:
    """Diagonal-Gaussian policy: an MLP mean plus a learnable log-std vector."""

    trunk: MlpParams
    log_std: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def action_dim(self) -> int:
        return self.trunk.out_dim

    def validate(self) -> None:
        self.trunk.validate()
        if self.log_std.shape != (self.action_dim,):
            raise ValueError(
                f"log_std shape {self.log_std.shape} does not match action dim {self.action_dim}"
            )
        if np.any(self.log_std < LOG_STD_MIN) or np.any(self.log_std > LOG_STD_MAX):
            raise ValueError(f"log_std outside [{LOG_STD_MIN}, {LOG_STD_MAX}]")


def init_policy(
    state_dim: int,
    action_dim: int,
    hidden_sizes: Sequence[int] = (64, 64),
    seed: int = 0,
) -> GaussianPolicy:
    """Xavier-initialized policy; log_std starts at 0 (unit variance)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6E6E]))
    dims = [state_dim, *hidden_sizes, action_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    policy = GaussianPolicy(
        trunk=MlpParams(tuple(weights), tuple(biases)),
        log_std=np.zeros(action_dim),
    )
    policy.validate()
    return policy


def _check_state(policy: GaussianPolicy, state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    got = state.shape[-1] if state.ndim > 0 else 0
    if state.ndim not in (1, 2) or got != policy.state_dim:
        raise DimensionError(
            f"state dimension mismatch: expected {policy.state_dim}, received {got}"
        )
    return state


def mlp_forward(trunk: MlpParams, x: np.ndarray) -> np.ndarray:
    """Batched numpy forward pass: tanh hidden layers, linear output."""
    h = x
    for w, b in zip(trunk.weights[:-1], trunk.biases[:-1]):
        h = np.tanh(h @ w + b)
    return h @ trunk.weights[-1] + trunk.biases[-1]


def forward_mean(policy: GaussianPolicy, state: np.ndarray) -> np.ndarray:
    """Mean action for one state (1-D) or a batch of states (2-D)."""
    state = _check_state(policy, state)
    single = state.ndim == 1
    out = mlp_forward(policy.trunk, state[None, :] if single else state)
    return out[0] if single else out


def gaussian_logp(
    mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray
) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dimensions."""
    z = (actions - mean) * np.exp(-log_std)
    per_dim = -0.5 * z * z - log_std - 0.5 * LOG_TWO_PI
    return per_dim.sum(axis=-1)


def log_prob(policy: GaussianPolicy, state: np.ndarray, action: np.ndarray) -> float:
    """Log density of an action under the policy at one state."""
    action = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action passed to log_prob")
    if action.shape != (policy.action_dim,):
        raise DimensionError(
            f"action dimension mismatch: expected {policy.action_dim}, "
            f"received {action.shape}"
        )
    mean = forward_mean(policy, state)
    return float(gaussian_logp(mean, policy.log_std, action))


def sample_action(
    policy: GaussianPolicy, state: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw mean + std * z with z standard normal from the given generator."""
    mean = forward_mean(policy, state)
    z = rng.standard_normal(policy.action_dim)
    return mean + np.exp(policy.log_std) * z


def sample_actions(
    policy: GaussianPolicy, states: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Batched sampling; one row of noise per state."""
    means = forward_mean(policy, states)
    z = rng.standard_normal(means.shape)
    return means + np.exp(policy.log_std) * z


# --- parameter flattening -------------------------------------------------

def parameters(policy: GaussianPolicy) -> list[np.ndarray]:
    """Flat parameter list: W1, b1, ..., Wn, bn, log_std."""
    out: list[np.ndarray] = []
    for w, b in zip(policy.trunk.weights, policy.trunk.biases):
        out.append(w)
        out.append(b)
    out.append(policy.log_std)
    return out


def replace_parameters(policy: GaussianPolicy, arrays: Sequence[np.ndarray]) -> GaussianPolicy:
    n_layers = len(policy.trunk.weights)
    if len(arrays) != 2 * n_layers + 1:
        raise ValueError(f"expected {2 * n_layers + 1} arrays, got {len(arrays)}")
    weights = tuple(arrays[2 * i] for i in range(n_layers))
    biases = tuple(arrays[2 * i + 1] for i in range(n_layers))
    return GaussianPolicy(trunk=MlpParams(weights, biases), log_std=arrays[-1])


def checksum(policy: GaussianPolicy) -> str:
    """SHA-256 over the exact parameter bytes; detects any mutation."""
    h = hashlib.sha256()
    for arr in parameters(policy):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


# --- autodiff bridge --------------------------------------------------------

class PolicyGraph:
    """Policy parameters lifted into the autodiff graph for one loss build.

    Reusing one instance across the terms of a loss shares the leaves, so
    a single backward pass yields the full gradient set.
    """

    def __init__(self, policy: GaussianPolicy):
        self.policy = policy
        self.weight_nodes = [ad.leaf(w) for w in policy.trunk.weights]
        self.bias_nodes = [ad.leaf(b) for b in policy.trunk.biases]
        self.log_std_node = ad.leaf(policy.log_std)

    def leaves(self) -> list[Node]:
        out: list[Node] = []
        for w, b in zip(self.weight_nodes, self.bias_nodes):
            out.append(w)
            out.append(b)
        out.append(self.log_std_node)
        return out

    def mean(self, states: np.ndarray) -> Node:
        h: Node | np.ndarray = np.asarray(states, dtype=np.float64)
        last = len(self.weight_nodes) - 1
        for i, (w, b) in enumerate(zip(self.weight_nodes, self.bias_nodes)):
            h = ad.add(ad.matmul(h, w), b)
            if i != last:
                h = ad.tanh(h)
        return h

    def log_prob(
        self,
        states: np.ndarray,
        actions: np.ndarray | Node,
        mean: Node | None = None,
    ) -> Node:
        """Log density node of shape (N,).

        Actions passed as arrays are constants (the training convention);
        pass a leaf Node to differentiate with respect to them as well.
        """
        if mean is None:
            mean = self.mean(states)
        if not isinstance(actions, Node):
            actions = np.asarray(actions, dtype=np.float64)
        inv_std = ad.exp(ad.scale(self.log_std_node, -1.0))
        z = ad.mul(ad.sub(actions, mean), inv_std)
        per_dim = ad.sub(
            ad.scale(ad.square(z), -0.5),
            ad.add(self.log_std_node, 0.5 * LOG_TWO_PI),
        )
        return ad.sum_(per_dim, axis=1)


def policy_gradients(loss: Node, graph: PolicyGraph) -> list[np.ndarray]:
    """Backward pass returning gradients aligned with :func:`parameters`."""
    return ad.backward(loss, graph.leaves())


# --- Adam -------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: Sequence[np.ndarray], lr: float = 3e-4) -> AdamState:
    return AdamState(
        m=tuple(np.zeros_like(p) for p in params),
        v=tuple(np.zeros_like(p) for p in params),
        step=0,
        lr=lr,
    )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and new state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have equal length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=tuple(new_m), v=tuple(new_v), step=t)


def update_policy(
    policy: GaussianPolicy,
    grads: Sequence[np.ndarray],
    state: AdamState,
) -> tuple[GaussianPolicy, AdamState]:
    """Adam step over all policy parameters, re-clamping log_std afterwards."""
    new_params, new_state = adam_step(parameters(policy), grads, state)
    new_params[-1] = np.clip(new_params[-1], LOG_STD_MIN, LOG_STD_MAX)
    return replace_parameters(policy, new_params), new_state


# --- checkpoints --------------------------------------------------------------

def save_policy(path, policy: GaussianPolicy, rng_seed: int | None = None) -> None:
    """Write a checkpoint; floats use repr, so the round trip is bit-exact."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "state_dim": policy.state_dim,
        "action_dim": policy.action_dim,
        "hidden_sizes": list(policy.trunk.hidden_sizes),
        "layer_weights": [w.reshape(-1).tolist() for w in policy.trunk.weights],
        "layer_biases": [b.tolist() for b in policy.trunk.biases],
        "log_std": policy.log_std.tolist(),
        "rng_seed": rng_seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_policy(path) -> tuple[GaussianPolicy, int | None]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version!r}")
    dims = [doc["state_dim"], *doc["hidden_sizes"], doc["action_dim"]]
    weights = tuple(
        np.asarray(flat, dtype=np.float64).reshape(dims[i], dims[i + 1])
        for i, flat in enumerate(doc["layer_weights"])
    )
    biases = tuple(np.asarray(b, dtype=np.float64) for b in doc["layer_biases"])
    policy = GaussianPolicy(
        trunk=MlpParams(weights, biases),
        log_std=np.asarray(doc["log_std"], dtype=np.float64),
    )
    policy.validate()
    return policy, doc.get("rng_seed")
