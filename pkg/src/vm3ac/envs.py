"""Seedable multi-agent environments.

Two continuous particle worlds with a shared cooperative reward (cooperative
navigation and predator-prey) and a tabular Markov game container used by
:mod:`vm3ac.verify`.

Observation layout (both particle worlds, per agent, flat float64 vector)::

    [own x, own y, own vx, own vy,
     (dx, dy) to every other agent in index order,
     entity block]

where the entity block is ``(dx, dy)`` per landmark for cooperative navigation
and ``(dx, dy, alive)`` per prey for predator-prey.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class EpisodeDone(RuntimeError):
    pass


@dataclass
class ParticleParams:
    world_half_width: float = 1.0
    damping: float = 0.25
    dt: float = 0.1
    accel_scale: float = 5.0
    max_speed: float | None = None


def integrate(pos: np.ndarray, vel: np.ndarray, actions: np.ndarray, p: ParticleParams) -> None:
    """Damped Euler step in place; walls clamp position and stop outward motion."""
    vel *= 1.0 - p.damping
    vel += actions * p.accel_scale * p.dt
    if p.max_speed is not None:
        speed = np.linalg.norm(vel, axis=1, keepdims=True)
        too_fast = speed > p.max_speed
        vel[:] = np.where(too_fast, vel * (p.max_speed / np.maximum(speed, 1e-12)), vel)
    pos += vel * p.dt
    hw = p.world_half_width
    hit = np.abs(pos) > hw
    np.clip(pos, -hw, hw, out=pos)
    vel[hit] = 0.0


class MarkovGameEnv:
    """Common interface: ``reset(seed) -> obs`` and ``step(actions) -> (obs, reward, done)``.

    After each step ``terminated`` / ``truncated`` say why an episode ended;
    time-limit endings are truncations. ``clip_count`` totals action
    components that were outside [-1, 1] and got clipped.
    """

    n_agents: int
    obs_dims: list[int]
    action_dims: list[int]
    horizon: int

    def __init__(self, record: bool = False):
        self.t = 0
        self.done = True
        self.terminated = False
        self.truncated = False
        self.clip_count = 0
        self.record = record
        self.trajectory: list[dict] = []

    def reset(self, seed: int) -> list[np.ndarray]:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self.terminated = False
        self.truncated = False
        self.clip_count = 0
        self.trajectory = []
        self._reset_state()
        return self.observe()

    def step(self, actions: Sequence[np.ndarray]) -> tuple[list[np.ndarray], float, bool]:
        if self.done:
            raise EpisodeDone("step() called on a finished episode; call reset()")
        acts = np.asarray(actions, dtype=np.float64).reshape(self.n_agents, -1)
        self.clip_count += int(np.count_nonzero(np.abs(acts) > 1.0))
        acts = np.clip(acts, -1.0, 1.0)
        reward = float(self._advance(acts))
        self.t += 1
        self.terminated = self._terminal()
        self.truncated = not self.terminated and self.t >= self.horizon
        self.done = self.terminated or self.truncated
        if self.record:
            self.trajectory.append({"t": self.t, "actions": acts.tolist(), "reward": reward,
                                    "done": self.done, **self._snapshot()})
        return self.observe(), reward, self.done

    def dump_trajectory(self, path) -> None:
        write_jsonl(path, self.trajectory)

    # subclass hooks
    def _reset_state(self) -> None:
        raise NotImplementedError

    def _advance(self, actions: np.ndarray) -> float:
        raise NotImplementedError

    def _terminal(self) -> bool:
        return False

    def _snapshot(self) -> dict:
        return {}

    def observe(self) -> list[np.ndarray]:
        raise NotImplementedError

    def reward_bound(self) -> float:
        raise NotImplementedError


def write_jsonl(path, records) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# cooperative navigation


@dataclass
class CoopNavConfig:
    n_agents: int = 3
    n_landmarks: int = 3
    collision_penalty: float = 10.0
    occupancy_bonus: float = 1.0
    horizon: int = 50
    agent_radius: float = 0.1
    landmark_radius: float = 0.05
    particle: ParticleParams = field(default_factory=ParticleParams)


def coopnav_reward(agent_pos: np.ndarray, landmark_pos: np.ndarray, config: CoopNavConfig) -> float:
    """Shared reward: -sum of nearest-agent distances, -R2 per colliding pair, +R3 if all occupied."""
    agent_pos = np.asarray(agent_pos, dtype=np.float64)
    landmark_pos = np.asarray(landmark_pos, dtype=np.float64)
    d_al = np.linalg.norm(agent_pos[:, None, :] - landmark_pos[None, :, :], axis=-1)
    nearest = d_al.min(axis=0)
    reward = -float(nearest.sum())
    reward -= config.collision_penalty * n_collisions(agent_pos, config.agent_radius)
    if np.all(nearest < config.agent_radius + config.landmark_radius):
        reward += config.occupancy_bonus
    return reward


def n_collisions(agent_pos: np.ndarray, radius: float) -> int:
    n = len(agent_pos)
    d = np.linalg.norm(agent_pos[:, None, :] - agent_pos[None, :, :], axis=-1)
    iu = np.triu_indices(n, k=1)
    return int(np.count_nonzero(d[iu] < 2.0 * radius))


class CooperativeNavigation(MarkovGameEnv):
    def __init__(self, config: CoopNavConfig | None = None, record: bool = False):
        super().__init__(record)
        self.config = config or CoopNavConfig()
        c = self.config
        self.n_agents = c.n_agents
        self.horizon = c.horizon
        obs_dim = 4 + 2 * (c.n_agents - 1) + 2 * c.n_landmarks
        self.obs_dims = [obs_dim] * c.n_agents
        self.action_dims = [2] * c.n_agents

    def _reset_state(self) -> None:
        c, hw = self.config, self.config.particle.world_half_width
        self.pos = self.rng.uniform(-hw, hw, size=(c.n_agents, 2))
        self.vel = np.zeros((c.n_agents, 2))
        self.landmarks = self.rng.uniform(-hw, hw, size=(c.n_landmarks, 2))

    def _advance(self, actions: np.ndarray) -> float:
        integrate(self.pos, self.vel, actions, self.config.particle)
        return coopnav_reward(self.pos, self.landmarks, self.config)

    def _snapshot(self) -> dict:
        return {"agents": self.pos.tolist(), "landmarks": self.landmarks.tolist()}

    def observe(self) -> list[np.ndarray]:
        out = []
        for i in range(self.n_agents):
            others = np.delete(self.pos, i, axis=0) - self.pos[i]
            rel_lm = self.landmarks - self.pos[i]
            out.append(np.concatenate([self.pos[i], self.vel[i], others.ravel(), rel_lm.ravel()]))
        return out

    def reward_bound(self) -> float:
        c = self.config
        diag = 2.0 * math.sqrt(2.0) * c.particle.world_half_width
        pairs = c.n_agents * (c.n_agents - 1) // 2
        return c.n_landmarks * diag + c.collision_penalty * pairs + c.occupancy_bonus


# ---------------------------------------------------------------------------
# predator-prey


@dataclass
class PredatorPreyConfig:
    n_predators: int = 2
    n_preys: int = 16
    capture_quota: int = 2
    team_reward: float = 10.0
    horizon: int = 100
    capture_radius: float = 0.1
    lattice_half_width: float = 0.6
    particle: ParticleParams = field(default_factory=lambda: ParticleParams(max_speed=1.0))

    def __post_init__(self):
        side = math.isqrt(self.n_preys)
        if side * side != self.n_preys:
            raise ValueError(f"n_preys must be a perfect square for the lattice, got {self.n_preys}")
        if not 1 <= self.capture_quota <= self.n_predators:
            raise ValueError("capture_quota must lie in [1, n_predators]")


PREDATOR_PREY_PRESETS = {2: 2, 3: 1, 4: 2}  # n_predators -> capture quota


def predator_prey_preset(n_predators: int) -> PredatorPreyConfig:
    return PredatorPreyConfig(n_predators=n_predators, capture_quota=PREDATOR_PREY_PRESETS[n_predators])


def prey_lattice(config: PredatorPreyConfig) -> np.ndarray:
    side = math.isqrt(config.n_preys)
    ticks = np.linspace(-config.lattice_half_width, config.lattice_half_width, side)
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def find_captures(pred_pos: np.ndarray, prey_pos: np.ndarray, alive: np.ndarray,
                  radius: float, quota: int) -> np.ndarray:
    """Mask of live preys with at least ``quota`` predators inside ``radius``."""
    d = np.linalg.norm(pred_pos[:, None, :] - prey_pos[None, :, :], axis=-1)
    close = np.count_nonzero(d < radius, axis=0)
    return alive & (close >= quota)


def pp_reward(captures, round_: int, config: PredatorPreyConfig) -> float:
    """Team reward R1 * 2**round per prey captured this step."""
    n = int(np.count_nonzero(captures)) if np.ndim(captures) else int(captures)
    return float(config.team_reward * (2 ** round_) * n)


class PredatorPrey(MarkovGameEnv):
    """Predators chase static preys laid out on a square lattice.

    Once every prey has been captured the lattice respawns and the team
    reward doubles for the next round.
    """

    def __init__(self, config: PredatorPreyConfig | None = None, record: bool = False):
        super().__init__(record)
        self.config = config or PredatorPreyConfig()
        c = self.config
        self.n_agents = c.n_predators
        self.horizon = c.horizon
        obs_dim = 4 + 2 * (c.n_predators - 1) + 3 * c.n_preys
        self.obs_dims = [obs_dim] * c.n_predators
        self.action_dims = [2] * c.n_predators
        self.lattice = prey_lattice(c)

    def _reset_state(self) -> None:
        c, hw = self.config, self.config.particle.world_half_width
        self.pos = self.rng.uniform(-hw, hw, size=(c.n_predators, 2))
        self.vel = np.zeros((c.n_predators, 2))
        self.prey_pos = self.lattice.copy()
        self.alive = np.ones(c.n_preys, dtype=bool)
        self.round = 0
        self.captured_total = 0

    def _advance(self, actions: np.ndarray) -> float:
        c = self.config
        integrate(self.pos, self.vel, actions, c.particle)
        caught = find_captures(self.pos, self.prey_pos, self.alive, c.capture_radius, c.capture_quota)
        reward = pp_reward(caught, self.round, c)
        self.alive &= ~caught
        self.captured_total += int(caught.sum())
        if not self.alive.any():
            self.alive[:] = True
            self.prey_pos = self.lattice.copy()
            self.round += 1
        return reward

    @property
    def n_captured(self) -> int:
        return int(self.config.n_preys - self.alive.sum())

    def _snapshot(self) -> dict:
        return {"predators": self.pos.tolist(), "alive": self.alive.astype(int).tolist(),
                "round": self.round}

    def observe(self) -> list[np.ndarray]:
        out = []
        alive = self.alive.astype(np.float64)[:, None]
        for i in range(self.n_agents):
            others = np.delete(self.pos, i, axis=0) - self.pos[i]
            rel = (self.prey_pos - self.pos[i]) * alive
            prey_block = np.concatenate([rel, alive], axis=1)
            out.append(np.concatenate([self.pos[i], self.vel[i], others.ravel(), prey_block.ravel()]))
        return out

    def reward_bound(self) -> float:
        # per-step bound in the current round
        c = self.config
        return c.team_reward * (2 ** self.round) * c.n_preys


ENVIRONMENTS = {"coopnav": (CooperativeNavigation, CoopNavConfig),
                "predprey": (PredatorPrey, PredatorPreyConfig)}


def make_env(name: str, params: dict | None = None, record: bool = False) -> MarkovGameEnv:
    """Build an environment from a name and a flat/nested parameter dict."""
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    env_cls, cfg_cls = ENVIRONMENTS[name]
    params = dict(params or {})
    particle = ParticleParams(**params.pop("particle", {})) if "particle" in params else None
    cfg = cfg_cls(**params) if particle is None else cfg_cls(particle=particle, **params)
    return env_cls(cfg, record=record)


def env_config_dict(env: MarkovGameEnv) -> dict:
    return asdict(env.config)


# ---------------------------------------------------------------------------
# tabular games


@dataclass
class DiscreteGame:
    """Tabular Markov game with joint actions flattened row-major over agents."""

    transition: np.ndarray  # [S, A_joint, S]
    reward: np.ndarray  # [S, A_joint]
    action_counts: tuple[int, ...]
    gamma: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.action_counts = tuple(int(a) for a in self.action_counts)
        s, a = self.reward.shape
        if a != math.prod(self.action_counts):
            raise ValueError(f"reward has {a} joint actions, expected {math.prod(self.action_counts)}")
        if self.transition.shape != (s, a, s):
            raise ValueError(f"transition shape {self.transition.shape} != {(s, a, s)}")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(-1) - 1.0) > 1e-12):
            raise ValueError("transition rows must be probability vectors")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_joint(self) -> int:
        return self.reward.shape[1]


def random_game(rng: np.random.Generator, n_states: int, action_counts: Sequence[int],
                gamma: float) -> DiscreteGame:
    n_joint = math.prod(action_counts)
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_joint))
    p /= p.sum(-1, keepdims=True)
    r = rng.normal(size=(n_states, n_joint))
    return DiscreteGame(p, r, tuple(action_counts), gamma)
