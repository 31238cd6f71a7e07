"""Uniform replay buffer over joint transitions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    obs: list[np.ndarray]
    actions: list[np.ndarray]
    reward: float
    next_obs: list[np.ndarray]
    terminated: bool
    truncated: bool = False


@dataclass
class Batch:
    x: np.ndarray  # [B, sum obs]
    a: np.ndarray  # [B, sum act]
    r: np.ndarray  # [B]
    x_next: np.ndarray
    done: np.ndarray  # 1.0 on true termination only

    def __len__(self) -> int:
        return len(self.r)


class ReplayBuffer:
    """Ring buffer storing concatenated observations and actions."""

    def __init__(self, capacity: int, x_dim: int, a_dim: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.x = np.zeros((capacity, x_dim))
        self.a = np.zeros((capacity, a_dim))
        self.r = np.zeros(capacity)
        self.x_next = np.zeros((capacity, x_dim))
        self.terminated = np.zeros(capacity)
        self.truncated = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        x = np.concatenate(t.obs)
        a = np.concatenate(t.actions)
        x_next = np.concatenate(t.next_obs)
        if not (np.isfinite(x).all() and np.isfinite(a).all() and np.isfinite(x_next).all()
                and np.isfinite(t.reward)):
            raise ValueError("refusing to store a non-finite transition")
        k = self.cursor
        self.x[k], self.a[k], self.r[k], self.x_next[k] = x, a, t.reward, x_next
        self.terminated[k] = float(t.terminated)
        self.truncated[k] = float(t.truncated)
        self.cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.x[idx], self.a[idx], self.r[idx], self.x_next[idx], self.terminated[idx])
