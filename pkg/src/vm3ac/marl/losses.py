"""Loss construction for the soft actor-critic family.

All functions take a :class:`~vm3ac.marl.learner.SoftLearner` plus a sampled
:class:`~vm3ac.marl.buffer.Batch` and externally drawn :class:`Noise`, so a
batch can be replayed exactly through different code paths.

Two paths exist on purpose. ``vm3ac_*`` builds the latent-conditioned targets
with the variational sum; ``sac_*`` is the plain MA-SAC / I-SAC / MA-AC
construction with no variational machinery at all.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .. import diffcore as dc
from ..diffcore import Tensor
from ..nets import critic_eval, policy_sample, variational_log_prob
from .buffer import Batch

if TYPE_CHECKING:
    from .learner import SoftLearner


@dataclass
class Noise:
    z: np.ndarray  # [B, latent_dim], one latent row per sample shared by all agents
    eps: list[np.ndarray]  # per agent [B, act_dim]


@dataclass
class ActorPass:
    actions: list[Tensor]
    log_probs: list[Tensor]

    def joint_numpy(self) -> np.ndarray:
        return np.concatenate([a.data for a in self.actions], axis=-1)


def actor_pass(state: "SoftLearner", batch: Batch, noise: Noise, key=None) -> ActorPass:
    """Reparameterized fresh actions for every agent from one shared z per sample."""
    actions, log_probs = [], []
    for k, agent in enumerate(state.agents):
        z = noise.z if key is None else state.audit.hand_out(key, k, noise.z)
        a, lp = policy_sample(agent.policy, state.obs(batch.x, k), z, noise.eps[k])
        actions.append(a)
        log_probs.append(lp)
    return ActorPass(actions, log_probs)


def critic_inputs(state: "SoftLearner", x: np.ndarray, a: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
    if state.config.algorithm == "isac":
        return state.obs(x, i), a[:, state.act_slices[i]]
    return x, a


def variational_sum(state: "SoftLearner", batch: Batch, ap: ActorPass, i: int,
                    frozen_own: np.ndarray | None = None) -> Tensor:
    """sum_{j != i} [log q_i(a_i | a_j, .) + log q_i(a_j | a_i, .)] per sample.

    The first factor reaches only the predictor's parameters; the second also
    carries gradient into agent i's action. ``frozen_own`` substitutes a fixed
    array for a_i inside the first factor, which is what the stop-gradient
    looks like to a finite-difference probe.
    """
    pred = state.agents[i].predictor
    n = state.n_agents
    if pred is None or n == 1:
        return dc.constant(np.zeros(len(batch)))
    o_i = state.obs(batch.x, i)
    a_i = ap.actions[i]
    a_i_frozen = dc.stop_gradient(a_i) if frozen_own is None else dc.constant(frozen_own)
    total = None
    for j in range(n):
        if j == i:
            continue
        o_j = state.obs(batch.x, j)
        a_j_frozen = dc.stop_gradient(ap.actions[j])
        own_from_other = variational_log_prob(pred, a_i_frozen, a_j_frozen, o_j, o_i, j=i, i=j)
        other_from_own = variational_log_prob(pred, a_j_frozen, a_i, o_i, o_j, j=j, i=i)
        term = own_from_other + other_from_own
        total = term if total is None else total + term
    return total


def _q_min_numpy(state: "SoftLearner", i: int, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    crit = state.agents[i].critics
    xa = np.concatenate([x, a], axis=-1)
    return np.minimum(crit.q1.forward_numpy(xa)[:, 0], crit.q2.forward_numpy(xa)[:, 0])


def vm3ac_value_target(state: "SoftLearner", batch: Batch, ap: ActorPass, var_i: Tensor, i: int) -> np.ndarray:
    cfg = state.config
    x_in, a_in = critic_inputs(state, batch.x, ap.joint_numpy(), i)
    q_min = _q_min_numpy(state, i, x_in, a_in)
    coef = cfg.beta / state.n_agents * cfg.var_coef
    return q_min - cfg.beta * ap.log_probs[i].data + coef * var_i.data


def sac_value_target(state: "SoftLearner", batch: Batch, ap: ActorPass, i: int) -> np.ndarray:
    x_in, a_in = critic_inputs(state, batch.x, ap.joint_numpy(), i)
    return _q_min_numpy(state, i, x_in, a_in) - state.config.beta * ap.log_probs[i].data


def critic_losses(state: "SoftLearner", batch: Batch, v_hat: np.ndarray, i: int) -> tuple[Tensor, Tensor]:
    """(L_V, L_Q) with L_Q summed over both critics."""
    cfg = state.config
    crit = state.agents[i].critics
    x_in, a_in = critic_inputs(state, batch.x, batch.a, i)
    x_next_in = state.obs(batch.x_next, i) if cfg.algorithm == "isac" else batch.x_next
    v = crit.value(x_in)
    loss_v = dc.scale(dc.mean(dc.square(v - dc.constant(v_hat))), 0.5)
    q_hat = dc.constant(batch.r + cfg.gamma * (1.0 - batch.done) * crit.target_value_numpy(x_next_in))
    q1, q2, _ = critic_eval(crit, x_in, a_in)
    loss_q = dc.scale(dc.mean(dc.square(q1 - q_hat)) + dc.mean(dc.square(q2 - q_hat)), 0.5)
    return loss_v, loss_q


def _joint_for_agent(state: "SoftLearner", ap: ActorPass, i: int) -> Tensor:
    parts = [a if k == i else dc.stop_gradient(a) for k, a in enumerate(ap.actions)]
    return dc.concat(parts)


def _q1_on_fresh(state: "SoftLearner", batch: Batch, ap: ActorPass, i: int) -> Tensor:
    crit = state.agents[i].critics
    if state.config.algorithm == "isac":
        q1, _, _ = critic_eval(crit, state.obs(batch.x, i), ap.actions[i], frozen=True)
    else:
        q1, _, _ = critic_eval(crit, batch.x, _joint_for_agent(state, ap, i), frozen=True)
    return q1


def vm3ac_policy_loss(state: "SoftLearner", batch: Batch, ap: ActorPass, var_i: Tensor, i: int) -> Tensor:
    cfg = state.config
    coef = cfg.beta / state.n_agents * cfg.var_coef
    q1 = _q1_on_fresh(state, batch, ap, i)
    per_sample = dc.scale(ap.log_probs[i], cfg.beta) - q1 - dc.scale(var_i, coef)
    return dc.mean(per_sample)


def sac_policy_loss(state: "SoftLearner", batch: Batch, ap: ActorPass, i: int) -> Tensor:
    q1 = _q1_on_fresh(state, batch, ap, i)
    return dc.mean(dc.scale(ap.log_probs[i], state.config.beta) - q1)


def value_target(state: "SoftLearner", batch: Batch, i: int, noise: Noise) -> np.ndarray:
    """Per-sample V-hat for agent ``i`` from fresh actions under ``noise``."""
    with dc.no_grad():
        ap = actor_pass(state, batch, noise)
        if state.config.algorithm == "vm3ac":
            return vm3ac_value_target(state, batch, ap, variational_sum(state, batch, ap, i), i)
        return sac_value_target(state, batch, ap, i)


def losses(state: "SoftLearner", batch: Batch, i: int, noise: Noise,
           frozen_own: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(L_V, L_Q, L_pi) for agent ``i`` at the current parameters.

    The returned tensors live on the active tape, so callers may backpropagate
    through any of them. See :func:`variational_sum` for ``frozen_own``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    ap = actor_pass(state, batch, noise)
    if state.config.algorithm == "vm3ac":
        var_i = variational_sum(state, batch, ap, i, frozen_own)
        v_hat = vm3ac_value_target(state, batch, ap, var_i, i)
        loss_pi = vm3ac_policy_loss(state, batch, ap, var_i, i)
    else:
        v_hat = sac_value_target(state, batch, ap, i)
        loss_pi = sac_policy_loss(state, batch, ap, i)
    loss_v, loss_q = critic_losses(state, batch, v_hat, i)
    return loss_v, loss_q, loss_pi
