"""Learner state, action selection and gradient updates.

:class:`SoftLearner` covers VM3-AC and the soft baselines (MA-SAC, I-SAC,
MA-AC); :class:`MaddpgLearner` is the deterministic-policy baseline. Both own
six independent RNG streams spawned from one seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from ..diffcore import AdamState
from ..nets import CriticSet, DeterministicPolicy, GaussianPolicy, Mlp, MlpSpec, VariationalPredictor, soft_update
from . import losses as L
from .buffer import Batch, ReplayBuffer, Transition
from .config import AlgoConfig

RNG_STREAMS = ("init", "env", "latent", "exploration", "sampler", "eval")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)}


class LatentViolation(AssertionError):
    pass


class LatentAudit:
    """Records every latent draw and which agents consumed it.

    A draw is opened under a key (one env step or one update batch), handed to
    agents, then closed. Closing checks that every agent received the very
    same array, and that no key is reused.
    """

    def __init__(self, n_agents: int):
        self.n_agents = n_agents
        self.draws = 0
        self.violations: list[str] = []
        self._open: dict = {}
        self._seen: set = set()

    def draw(self, key, z: np.ndarray) -> None:
        if key in self._seen:
            self.violations.append(f"latent key {key} drawn twice")
        self._seen.add(key)
        self._open[key] = (z, [])
        self.draws += 1

    def hand_out(self, key, agent: int, z: np.ndarray) -> np.ndarray:
        if key not in self._open:
            self.violations.append(f"agent {agent} used latent outside a draw ({key})")
            return z
        ref, takers = self._open[key]
        if z is not ref:
            self.violations.append(f"agent {agent} got a different latent at {key}")
        takers.append(agent)
        return ref

    def close(self, key) -> None:
        _, takers = self._open.pop(key)
        if sorted(takers) != list(range(self.n_agents)):
            self.violations.append(f"latent at {key} consumed by {takers}, expected each agent once")

    def summary(self) -> dict:
        return {"draws": self.draws, "violations": len(self.violations)}


@dataclass
class SoftAgent:
    policy: GaussianPolicy
    critics: CriticSet
    predictor: VariationalPredictor | None
    opt: dict[str, AdamState] = field(default_factory=dict)


class _Base:
    def __init__(self, config: AlgoConfig, obs_dims, act_dims, seed: int):
        self.config = config.validate()
        self.obs_dims, self.act_dims = list(obs_dims), list(act_dims)
        self.n_agents = len(self.obs_dims)
        self.seed = int(seed)
        self.rngs = make_streams(self.seed)
        self.obs_slices = _slices(self.obs_dims)
        self.act_slices = _slices(self.act_dims)
        self.x_dim, self.a_dim = sum(self.obs_dims), sum(self.act_dims)
        self.buffer = ReplayBuffer(config.buffer_size, self.x_dim, self.a_dim)
        self.audit = LatentAudit(self.n_agents)
        self.env_steps = 0
        self.updates = 0
        self.progress = 0.0  # fraction of the run completed, drives annealed noise

    def obs(self, x: np.ndarray, i: int) -> np.ndarray:
        return x[..., self.obs_slices[i]]

    def store(self, obs, actions, reward, next_obs, terminated, truncated=False) -> None:
        self.buffer.add(Transition(obs, actions, reward, next_obs, terminated, truncated))

    def ready(self) -> bool:
        return len(self.buffer) >= self.config.batch_size

    def policies(self) -> list:
        return [a.policy for a in self.agents]

    def meta(self) -> dict:
        return {"algorithm": self.config.algorithm, "obs_dims": self.obs_dims, "act_dims": self.act_dims,
                "latent_dim": self.latent_dim, "hidden": list(self.config.hidden), "seed": self.seed,
                "env_steps": self.env_steps, "updates": self.updates}


def _slices(dims) -> list[slice]:
    edges = np.cumsum([0, *dims])
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


class SoftLearner(_Base):
    """VM3-AC and the soft-actor-critic baselines."""

    def __init__(self, config: AlgoConfig, obs_dims, act_dims, seed: int = 0):
        super().__init__(config, obs_dims, act_dims, seed)
        cfg, rng = self.config, self.rngs["init"]
        self.latent_dim = cfg.latent_dim
        self.agents: list[SoftAgent] = []
        for i in range(self.n_agents):
            policy = GaussianPolicy(self.obs_dims[i], self.act_dims[i], cfg.latent_dim, rng, cfg.hidden)
            if cfg.algorithm == "isac":
                critics = CriticSet(self.obs_dims[i], self.act_dims[i], rng, cfg.hidden)
            else:
                critics = CriticSet(self.x_dim, self.a_dim, rng, cfg.hidden)
            predictor = None
            if cfg.algorithm == "vm3ac" and self.n_agents > 1:
                if len(set(self.act_dims)) != 1 or len(set(self.obs_dims)) != 1:
                    raise ValueError("the shared variational predictor needs homogeneous agents")
                predictor = VariationalPredictor(i, self.n_agents, self.obs_dims[i], self.act_dims[i],
                                                 rng, cfg.sigma_q, cfg.hidden)
            agent = SoftAgent(policy, critics, predictor)
            nets = {"policy": policy.params, "q1": critics.q1.params, "q2": critics.q2.params,
                    "v": critics.v.params}
            if predictor is not None:
                nets["predictor"] = predictor.params
            agent.opt = {k: AdamState.for_params(p, lr=cfg.lr) for k, p in nets.items()}
            self.agents.append(agent)

    # -- acting -------------------------------------------------------------

    def act_train(self, observations, z: np.ndarray | None = None, eps=None) -> list[np.ndarray]:
        """One shared latent for all agents, then each agent samples its own action.

        ``z`` and ``eps`` may be injected; otherwise they come from the latent
        and exploration streams.
        """
        if z is None:
            z = self.rngs["latent"].standard_normal(self.latent_dim)
        if eps is None:
            eps = [self.rngs["exploration"].standard_normal(d) for d in self.act_dims]
        key = ("act", self.env_steps)
        self.audit.draw(key, z)
        actions = []
        for i, agent in enumerate(self.agents):
            zi = self.audit.hand_out(key, i, z)
            actions.append(agent.policy.sample_numpy(observations[i], zi, eps[i]))
        self.audit.close(key)
        self.env_steps += 1
        return actions

    def draw_noise(self, batch_size: int) -> L.Noise:
        z = self.rngs["latent"].standard_normal((batch_size, self.latent_dim))
        eps = [self.rngs["exploration"].standard_normal((batch_size, d)) for d in self.act_dims]
        return L.Noise(z, eps)

    def sample_batch(self) -> Batch:
        return self.buffer.sample(self.rngs["sampler"], self.config.batch_size)

    # -- learning -----------------------------------------------------------

    def update(self, batch: Batch | None = None, noise: L.Noise | None = None) -> dict | None:
        """One gradient step on every agent's critics, then policies and predictors.

        Returns ``None`` (no-op) when the buffer holds fewer than a batch.
        """
        if batch is None:
            if not self.ready():
                return None
            batch = self.sample_batch()
        if noise is None:
            noise = self.draw_noise(len(batch))
        cfg = self.config
        vm3ac = cfg.algorithm == "vm3ac"
        key = ("update", self.updates)
        self.audit.draw(key, noise.z)
        n = self.n_agents
        metrics = {"loss_v": 0.0, "loss_q": 0.0, "loss_pi": 0.0}
        with dc.Tape():
            ap = L.actor_pass(self, batch, noise, key=key)
            var = [L.variational_sum(self, batch, ap, i) for i in range(n)] if vm3ac else [None] * n
            if vm3ac:
                v_hats = [L.vm3ac_value_target(self, batch, ap, var[i], i) for i in range(n)]
            else:
                v_hats = [L.sac_value_target(self, batch, ap, i) for i in range(n)]

            with dc.Tape():
                total = None
                for i in range(n):
                    loss_v, loss_q = L.critic_losses(self, batch, v_hats[i], i)
                    metrics["loss_v"] += loss_v.item() / n
                    metrics["loss_q"] += loss_q.item() / n
                    term = loss_v + loss_q
                    total = term if total is None else total + term
                dc.backward(total)
            for agent in self.agents:
                c = agent.critics
                for name, mlp in (("q1", c.q1), ("q2", c.q2), ("v", c.v)):
                    dc.adam_step(mlp.params, agent.opt[name])

            total = None
            for i in range(n):
                if vm3ac:
                    loss_pi = L.vm3ac_policy_loss(self, batch, ap, var[i], i)
                else:
                    loss_pi = L.sac_policy_loss(self, batch, ap, i)
                metrics["loss_pi"] += loss_pi.item() / n
                total = loss_pi if total is None else total + loss_pi
            params = [p for a in self.agents for p in a.policy.params]
            params += [p for a in self.agents if a.predictor is not None for p in a.predictor.params]
            dc.backward(total, params)
        for agent in self.agents:
            dc.adam_step(agent.policy.params, agent.opt["policy"])
            if agent.predictor is not None:
                dc.adam_step(agent.predictor.params, agent.opt["predictor"])
            soft_update(agent.critics.v_target, agent.critics.v, cfg.tau)
        self.audit.close(key)
        self.updates += 1

        metrics["entropy"] = float(-np.mean([lp.data.mean() for lp in ap.log_probs]))
        if vm3ac and n > 1:
            # mean log q per ordered (owner, partner, direction) term
            metrics["mi_proxy"] = float(np.mean([v.data.mean() for v in var]) / (2 * (n - 1)))
        else:
            metrics["mi_proxy"] = 0.0
        return metrics

    # -- persistence --------------------------------------------------------

    def named_params(self) -> dict:
        out = {}
        for i, a in enumerate(self.agents):
            out.update(a.policy.trunk.named_params(f"agent{i}.policy"))
            for name in ("q1", "q2", "v", "v_target"):
                out.update(getattr(a.critics, name).named_params(f"agent{i}.{name}"))
            if a.predictor is not None:
                out.update(a.predictor.trunk.named_params(f"agent{i}.predictor"))
        return out


class MaddpgLearner(_Base):
    """Deterministic tanh policies with one centralized critic per agent."""

    def __init__(self, config: AlgoConfig, obs_dims, act_dims, seed: int = 0):
        super().__init__(config, obs_dims, act_dims, seed)
        cfg, rng = self.config, self.rngs["init"]
        self.latent_dim = 0
        self.agents = []
        for i in range(self.n_agents):
            policy = DeterministicPolicy(self.obs_dims[i], self.act_dims[i], rng, cfg.hidden)
            target_policy = DeterministicPolicy(self.obs_dims[i], self.act_dims[i], rng, cfg.hidden)
            target_policy.trunk.copy_from(policy.trunk)
            q = Mlp(MlpSpec(self.x_dim + self.a_dim, 1, cfg.hidden), rng)
            q_target = Mlp(MlpSpec(self.x_dim + self.a_dim, 1, cfg.hidden), rng)
            q_target.copy_from(q)
            self.agents.append(_MaddpgAgent(policy, target_policy, q, q_target,
                                            {"policy": AdamState.for_params(policy.params, lr=cfg.lr),
                                             "q": AdamState.for_params(q.params, lr=cfg.lr)}))

    def noise_std(self) -> float:
        cfg = self.config
        t = min(max(self.progress, 0.0), 1.0)
        return cfg.noise_std + t * (cfg.noise_std_final - cfg.noise_std)

    def act_train(self, observations, z=None, eps=None) -> list[np.ndarray]:
        if eps is None:
            eps = [self.rngs["exploration"].standard_normal(d) for d in self.act_dims]
        std = self.noise_std()
        self.env_steps += 1
        return [np.clip(a.policy.mean_action_numpy(observations[i]) + std * eps[i], -1.0, 1.0)
                for i, a in enumerate(self.agents)]

    def sample_batch(self) -> Batch:
        return self.buffer.sample(self.rngs["sampler"], self.config.batch_size)

    def update(self, batch: Batch | None = None, noise=None) -> dict | None:
        if batch is None:
            if not self.ready():
                return None
            batch = self.sample_batch()
        cfg, n = self.config, self.n_agents
        next_actions = np.concatenate(
            [a.target_policy.mean_action_numpy(self.obs(batch.x_next, i)) for i, a in enumerate(self.agents)],
            axis=-1)
        xa_next = np.concatenate([batch.x_next, next_actions], axis=-1)
        xa = dc.constant(np.concatenate([batch.x, batch.a], axis=-1))
        metrics = {"loss_v": 0.0, "loss_q": 0.0, "loss_pi": 0.0}
        with dc.Tape():
            total = None
            for a in self.agents:
                y = batch.r + cfg.gamma * (1.0 - batch.done) * a.q_target.forward_numpy(xa_next)[:, 0]
                q = dc.reshape(a.q(xa), (len(batch),))
                loss = dc.scale(dc.mean(dc.square(q - dc.constant(y))), 0.5)
                metrics["loss_q"] += loss.item() / n
                total = loss if total is None else total + loss
            dc.backward(total)
        for a in self.agents:
            dc.adam_step(a.q.params, a.opt["q"])

        with dc.Tape():
            total = None
            for i, a in enumerate(self.agents):
                own = a.policy(self.obs(batch.x, i))
                parts = [own if k == i else dc.constant(batch.a[:, self.act_slices[k]]) for k in range(n)]
                q = a.q(dc.concat([dc.constant(batch.x), *parts]), frozen=True)
                loss = dc.neg(dc.mean(q))
                metrics["loss_pi"] += loss.item() / n
                total = loss if total is None else total + loss
            dc.backward(total, [p for a in self.agents for p in a.policy.params])
        for a in self.agents:
            dc.adam_step(a.policy.params, a.opt["policy"])
            soft_update(a.q_target, a.q, cfg.tau)
            soft_update(a.target_policy.trunk, a.policy.trunk, cfg.tau)
        self.updates += 1
        metrics["entropy"] = 0.0
        metrics["mi_proxy"] = 0.0
        return metrics

    def named_params(self) -> dict:
        out = {}
        for i, a in enumerate(self.agents):
            out.update(a.policy.trunk.named_params(f"agent{i}.policy"))
            out.update(a.target_policy.trunk.named_params(f"agent{i}.target_policy"))
            out.update(a.q.named_params(f"agent{i}.q"))
            out.update(a.q_target.named_params(f"agent{i}.q_target"))
        return out


@dataclass
class _MaddpgAgent:
    policy: DeterministicPolicy
    target_policy: DeterministicPolicy
    q: Mlp
    q_target: Mlp
    opt: dict


def make_learner(config: AlgoConfig, obs_dims, act_dims, seed: int = 0):
    if config.algorithm == "maddpg":
        return MaddpgLearner(config, obs_dims, act_dims, seed)
    return SoftLearner(config, obs_dims, act_dims, seed)
