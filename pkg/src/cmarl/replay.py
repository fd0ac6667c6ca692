"""Fixed-capacity experience replay over joint multi-agent transitions.

One entry covers all agents of one environment step so the communicative
forward pass can be replayed coherently. Storage is a preallocated ring
of float32 arrays; the oldest entry is overwritten first. Not
thread-safe: single writer, single reader within a training loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSamples, ShapeMismatch
from .rng import Rng

DEFAULT_CAPACITY_BUDGET = 100_000  # joint capacity = floor(budget / n_agents)


def default_capacity(n_agents: int) -> int:
    return DEFAULT_CAPACITY_BUDGET // n_agents


@dataclass
class JointTransition:
    obs: np.ndarray        # (n_agents, in_frames, roi, roi, roi) float32
    actions: np.ndarray    # (n_agents,) int64
    rewards: np.ndarray    # (n_agents,) float32, within [-1, 1]
    next_obs: np.ndarray   # same shape as obs
    terminal: np.ndarray   # (n_agents,) bool


@dataclass
class JointBatch:
    """Stacked sample: leading axis is the batch dimension."""
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray


class ReplayBuffer:
    """Ring buffer of JointTransitions, uniform sampling with replacement.

    Capacity defaults to floor(100000 / n_agents). Observation arrays are
    allocated lazily on the first push so an empty buffer costs nothing.
    """

    def __init__(self, n_agents: int, capacity: int | None = None):
        if n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        self.n_agents = n_agents
        self.capacity = default_capacity(n_agents) if capacity is None else capacity
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.size = 0
        self._cursor = 0
        self._obs = None
        self._actions = None
        self._rewards = None
        self._next_obs = None
        self._terminal = None

    def _allocate(self, obs_shape: tuple) -> None:
        cap = self.capacity
        self._obs = np.empty((cap, *obs_shape), dtype=np.float32)
        self._next_obs = np.empty((cap, *obs_shape), dtype=np.float32)
        self._actions = np.empty((cap, self.n_agents), dtype=np.int64)
        self._rewards = np.empty((cap, self.n_agents), dtype=np.float32)
        self._terminal = np.empty((cap, self.n_agents), dtype=bool)

    def push(self, t: JointTransition) -> None:
        obs = np.asarray(t.obs, dtype=np.float32)
        next_obs = np.asarray(t.next_obs, dtype=np.float32)
        if obs.ndim != 5 or obs.shape[0] != self.n_agents:
            raise ShapeMismatch(
                f"obs shape {obs.shape} must be ({self.n_agents}, frames, r, r, r)")
        if self._obs is None:
            self._allocate(obs.shape)
        if obs.shape != self._obs.shape[1:] or next_obs.shape != obs.shape:
            raise ShapeMismatch(
                f"transition shape {obs.shape} != buffer shape {self._obs.shape[1:]}")
        actions = np.asarray(t.actions, dtype=np.int64)
        rewards = np.asarray(t.rewards, dtype=np.float32)
        terminal = np.asarray(t.terminal, dtype=bool)
        if actions.shape != (self.n_agents,) or rewards.shape != (self.n_agents,) \
                or terminal.shape != (self.n_agents,):
            raise ShapeMismatch("per-agent fields must have shape (n_agents,)")

        i = self._cursor
        self._obs[i] = obs
        self._next_obs[i] = next_obs
        self._actions[i] = actions
        self._rewards[i] = rewards
        self._terminal[i] = terminal
        self._cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: Rng) -> JointBatch:
        """Uniform with replacement; deterministic in the rng stream."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.size < batch_size:
            raise InsufficientSamples(
                f"buffer holds {self.size} < batch {batch_size}")
        idx = rng.integers(self.size, batch_size)
        return JointBatch(
            obs=self._obs[idx].copy(),
            actions=self._actions[idx].copy(),
            rewards=self._rewards[idx].copy(),
            next_obs=self._next_obs[idx].copy(),
            terminal=self._terminal[idx].copy(),
        )

    def __len__(self) -> int:
        return self.size
