"""Deep Q-learning machinery shared by both agents.

A small two-layer feedforward Q-network (tanh hidden layer, linear
output), a FIFO replay buffer, epsilon-greedy action selection and the
DQN update with exact hand-written backpropagation and plain SGD. One
online network per agent, no target network. Everything is float64 so
downstream identities can be checked to 1e-9.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed import DimensionMismatch

HIDDEN_DIM = 25


class BufferTooSmall(RuntimeError):
    pass


@dataclass
class QNetwork:
    """Q = W2 . tanh(W1 . s + b1) + b2."""

    w1: np.ndarray  # (input_dim, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, output_dim)
    b2: np.ndarray  # (output_dim,)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def create(cls, input_dim: int, output_dim: int, seed: int = 0,
               hidden_dim: int = HIDDEN_DIM) -> "QNetwork":
        rng = np.random.default_rng(seed)
        scale1 = 1.0 / np.sqrt(input_dim)
        scale2 = 1.0 / np.sqrt(hidden_dim)
        return cls(
            w1=rng.normal(0.0, scale1, size=(input_dim, hidden_dim)),
            b1=np.zeros(hidden_dim),
            w2=rng.normal(0.0, scale2, size=(hidden_dim, output_dim)),
            b2=np.zeros(output_dim),
        )

    def copy(self) -> "QNetwork":
        return QNetwork(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def q_forward(net: QNetwork, state: np.ndarray) -> np.ndarray:
    """Q-values for one state vector."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (net.input_dim,):
        raise DimensionMismatch(f"state shape {state.shape}, expected ({net.input_dim},)")
    hidden = np.tanh(state @ net.w1 + net.b1)
    return hidden @ net.w2 + net.b2


def q_forward_batch(net: QNetwork, states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != net.input_dim:
        raise DimensionMismatch(f"states shape {states.shape}, expected (*, {net.input_dim})")
    hidden = np.tanh(states @ net.w1 + net.b1)
    return hidden @ net.w2 + net.b2


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray | None
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity experience ring with FIFO eviction."""

    def __init__(self, capacity: int = 10000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: list[Transition] = []
        self._cursor = 0

    def push(self, transition: Transition) -> None:
        if len(self._entries) < self.capacity:
            self._entries.append(transition)
        else:
            self._entries[self._cursor] = transition
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if len(self._entries) < batch_size:
            raise BufferTooSmall(f"buffer has {len(self._entries)} < batch {batch_size}")
        idx = rng.choice(len(self._entries), size=batch_size, replace=False)
        return [self._entries[i] for i in idx]

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.95
    learning_rate: float = 1e-3
    batch_size: int = 32
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_decay_steps: int = 2000
    buffer_capacity: int = 10000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must not exceed epsilon_start")


def epsilon_by_step(cfg: DqnConfig, step: int) -> float:
    """Linear schedule from epsilon_start to epsilon_end; then flat."""
    if step >= cfg.epsilon_decay_steps:
        return cfg.epsilon_end
    frac = step / max(cfg.epsilon_decay_steps, 1)
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def select_action(net: QNetwork, state: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy over Q-values; greedy ties break to the lowest index."""
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(net.output_dim))
    return int(np.argmax(q_forward(net, state)))


def _loss_and_grads(net: QNetwork, states: np.ndarray, actions: np.ndarray,
                    targets: np.ndarray):
    """MSE on the taken actions only, with exact gradients.

    Targets are treated as constants (computed before the step), matching
    the no-target-network update.
    """
    batch = states.shape[0]
    hidden = np.tanh(states @ net.w1 + net.b1)
    q = hidden @ net.w2 + net.b2
    q_taken = q[np.arange(batch), actions]
    err = q_taken - targets
    loss = float(np.mean(err**2))

    dq = np.zeros_like(q)
    dq[np.arange(batch), actions] = 2.0 * err / batch
    grad_w2 = hidden.T @ dq
    grad_b2 = dq.sum(axis=0)
    dhidden = dq @ net.w2.T
    dz1 = dhidden * (1.0 - hidden**2)
    grad_w1 = states.T @ dz1
    grad_b1 = dz1.sum(axis=0)
    return loss, (grad_w1, grad_b1, grad_w2, grad_b2)


def dqn_train_step(net: QNetwork, buffer: ReplayBuffer, cfg: DqnConfig,
                   rng: np.random.Generator) -> float:
    """One uniform-minibatch Bellman regression step via SGD.

    Target is r for terminal transitions, else r + gamma * max_a Q(s', a).
    Returns the (non-negative) pre-update loss.
    """
    batch = buffer.sample(cfg.batch_size, rng)
    states = np.stack([t.state for t in batch]).astype(np.float64)
    actions = np.array([t.action for t in batch], dtype=np.int64)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)

    targets = rewards.copy()
    live = [i for i, t in enumerate(batch) if not t.terminal]
    if live:
        next_states = np.stack([batch[i].next_state for i in live]).astype(np.float64)
        next_q = q_forward_batch(net, next_states)
        targets[live] += cfg.gamma * next_q.max(axis=1)

    loss, (gw1, gb1, gw2, gb2) = _loss_and_grads(net, states, actions, targets)
    lr = cfg.learning_rate
    net.w1 -= lr * gw1
    net.b1 -= lr * gb1
    net.w2 -= lr * gw2
    net.b2 -= lr * gb2
    return loss


def fit_targets(net: QNetwork, state: np.ndarray, targets: np.ndarray,
                steps: int = 4000, learning_rate: float = 0.05) -> QNetwork:
    """Regress Q(state) onto fixed per-action targets; full batch over actions."""
    states = np.tile(np.asarray(state, dtype=np.float64), (net.output_dim, 1))
    actions = np.arange(net.output_dim)
    targets = np.asarray(targets, dtype=np.float64)
    for _ in range(steps):
        _, (gw1, gb1, gw2, gb2) = _loss_and_grads(net, states, actions, targets)
        net.w1 -= learning_rate * gw1
        net.b1 -= learning_rate * gb1
        net.w2 -= learning_rate * gw2
        net.b2 -= learning_rate * gb2
    return net


def argmax_invariance_check(net: QNetwork, state: np.ndarray, c: float,
                            steps: int = 4000, seed: int = 0) -> bool:
    """True when rescaling the training targets by c > 0 leaves the greedy
    action unchanged after retraining to convergence.

    Fresh same-seed networks are regressed onto Q(state) and c * Q(state);
    linear-output networks fitted to convergence keep their argmax under
    positive scaling.
    """
    base_targets = q_forward(net, state)
    greedy = []
    for scale in (1.0, c):
        fresh = QNetwork.create(net.input_dim, net.output_dim, seed=seed)
        fit_targets(fresh, state, scale * base_targets, steps=steps)
        greedy.append(int(np.argmax(q_forward(fresh, state))))
    return greedy[0] == greedy[1]


def net_to_dict(net: QNetwork) -> dict:
    """Flat-values checkpoint with a shape header; exact float round-trip."""
    arrays = {"w1": net.w1, "b1": net.b1, "w2": net.w2, "b2": net.b2}
    return {
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "values": {k: v.ravel().tolist() for k, v in arrays.items()},
    }


def net_from_dict(payload: dict) -> QNetwork:
    arrays = {}
    for name in ("w1", "b1", "w2", "b2"):
        shape = tuple(payload["shapes"][name])
        arrays[name] = np.array(payload["values"][name], dtype=np.float64).reshape(shape)
    return QNetwork(**arrays)


def save_network(net: QNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net_to_dict(net)), encoding="utf-8")


def load_network(path: str | Path) -> QNetwork:
    return net_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
