"""Decentralized execution.

Each agent runs as its own :class:`DecentralizedAgent` holding only its
policy and a local latent source. Observations reach agents through an
:class:`ObservationBoard` that counts any read of another agent's slot, so
the absence of cross-agent data flow is measured rather than assumed.
"""
from __future__ import annotations

import numpy as np

from .config import EXEC_MODES


class ObservationBoard:
    """Per-step holder of the agents' observations with read accounting."""

    def __init__(self, observations):
        self._obs = [np.asarray(o, dtype=np.float64) for o in observations]
        self.reads: list[tuple[int, int]] = []
        self.cross_reads = 0

    def read(self, requester: int, index: int) -> np.ndarray:
        self.reads.append((requester, index))
        if requester != index:
            self.cross_reads += 1
        return self._obs[index]


class DecentralizedAgent:
    """One executing agent: its own observation, its own latent stream.

    ``mode="zero"`` feeds z = 0 each step. ``mode="seeded"`` draws z from a
    generator seeded with ``latent_seed``; agents given the same seed produce
    the same sequence without exchanging anything.
    """

    def __init__(self, index: int, policy, mode: str = "zero", latent_seed: int = 0,
                 stochastic: bool = False, noise_seed: int = 0):
        if mode not in EXEC_MODES:
            raise ValueError(f"unknown execution mode {mode!r}; choose from {EXEC_MODES}")
        self.index, self.policy, self.mode = index, policy, mode
        self.latent_dim = getattr(policy, "latent_dim", 0)
        self.stochastic = stochastic and hasattr(policy, "sample_numpy")
        self._latent_rng = np.random.default_rng(latent_seed)
        self._noise_rng = np.random.default_rng([noise_seed, index])
        self.z_history: list[np.ndarray] = []

    def next_latent(self) -> np.ndarray:
        if self.mode == "zero":
            z = np.zeros(self.latent_dim)
        else:
            z = self._latent_rng.standard_normal(self.latent_dim)
        self.z_history.append(z)
        return z

    def act(self, board: ObservationBoard) -> np.ndarray:
        o = board.read(self.index, self.index)
        z = self.next_latent()
        if self.stochastic:
            eps = self._noise_rng.standard_normal(self.policy.act_dim)
            return self.policy.sample_numpy(o, z, eps)
        return self.policy.mean_action_numpy(o, z)


class DecentralizedExecutor:
    """A team of independent agents stepped together."""

    def __init__(self, policies, mode: str = "zero", latent_seed: int = 0, stochastic: bool = False,
                 keep_history: bool = False):
        self.agents = [DecentralizedAgent(i, p, mode, latent_seed, stochastic, latent_seed)
                       for i, p in enumerate(policies)]
        self.mode = mode
        self.keep_history = keep_history
        self.cross_reads = 0
        self.reads = 0

    def act(self, observations) -> list[np.ndarray]:
        board = ObservationBoard(observations)
        actions = [agent.act(board) for agent in self.agents]
        self.cross_reads += board.cross_reads
        self.reads += len(board.reads)
        if not self.keep_history:
            for agent in self.agents:
                agent.z_history.clear()
        return actions


def act_exec(policies, observations, mode: str = "zero", latent_seed: int = 0):
    """Single-step convenience wrapper; stateful callers should keep an executor."""
    return DecentralizedExecutor(policies, mode, latent_seed).act(observations)


def evaluate(policies, env, episode_seeds, mode: str = "zero", latent_seed: int = 0,
             stochastic: bool = False) -> dict:
    """Roll out decentralized episodes and report returns plus the read audit."""
    executor = DecentralizedExecutor(policies, mode, latent_seed, stochastic)
    returns = []
    for seed in episode_seeds:
        obs = env.reset(int(seed))
        total, done = 0.0, False
        while not done:
            obs, r, done = env.step(executor.act(obs))
            total += r
        returns.append(total)
    returns = np.asarray(returns)
    return {"mode": mode, "returns": returns.tolist(), "mean_return": float(returns.mean()) if len(returns) else 0.0,
            "std_return": float(returns.std()) if len(returns) else 0.0,
            "cross_agent_reads": executor.cross_reads, "reads": executor.reads}
