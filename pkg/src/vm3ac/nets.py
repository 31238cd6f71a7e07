"""Policy, critic and variational-predictor networks built on :mod:`vm3ac.diffcore`."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
SQUASH_EPS = 1e-6


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (128, 128)
    hidden_activation: str = "relu"
    final_activation: str | None = None

    def __post_init__(self):
        if self.input_dim < 0 or self.output_dim <= 0:
            raise ValueError(f"bad MLP dims {self.input_dim} -> {self.output_dim}")
        if self.hidden_activation != "relu":
            raise ValueError("only relu hidden layers are supported")
        if self.final_activation not in (None, "none", "tanh"):
            raise ValueError(f"unknown final activation {self.final_activation!r}")


class Mlp:
    """Fully connected network with relu hidden layers.

    Weights are drawn uniformly in +-1/sqrt(fan_in); biases start at zero.
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        dims = [spec.input_dim, *spec.hidden, spec.output_dim]
        self.params: list[Tensor] = []
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params.append(Tensor(w, requires_grad=True, name=f"w{k}"))
            self.params.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"b{k}"))

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        x = dc.as_tensor(x)
        if x.shape[-1] != self.spec.input_dim:
            raise dc.ShapeError(f"MLP expects input width {self.spec.input_dim}, got {x.shape}")
        params = [dc.constant(p) for p in self.params] if frozen else self.params
        n_layers = len(params) // 2
        h = x
        for k in range(n_layers):
            h = dc.matmul(h, params[2 * k]) + params[2 * k + 1]
            if k < n_layers - 1:
                h = dc.relu(h)
        if self.spec.final_activation == "tanh":
            h = dc.tanh(h)
        return h

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass; no tape involvement."""
        n_layers = len(self.params) // 2
        h = np.asarray(x, dtype=np.float64)
        for k in range(n_layers):
            h = h @ self.params[2 * k].data + self.params[2 * k + 1].data
            if k < n_layers - 1:
                h = np.maximum(h, 0.0)
        if self.spec.final_activation == "tanh":
            h = np.tanh(h)
        return h

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{p.name}": p for p in self.params}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        for p in self.params:
            key = f"{prefix}.{p.name}"
            if key not in arrays:
                raise KeyError(f"missing parameter {key}")
            if arrays[key].shape != p.data.shape:
                raise dc.ShapeError(
                    f"{key}: checkpoint shape {arrays[key].shape} vs network shape {p.data.shape}")
            p.data[...] = arrays[key]

    def copy_from(self, other: "Mlp") -> None:
        for p, q in zip(self.params, other.params):
            p.data[...] = q.data


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    """target <- (1 - tau) * target + tau * source."""
    for t, s in zip(target.params, source.params):
        t.data *= 1.0 - tau
        t.data += tau * s.data


def _batch(x) -> tuple[Tensor, bool]:
    t = dc.as_tensor(x)
    if t.ndim == 1:
        return dc.reshape(t, (1, t.shape[0])), True
    return t, False


# ---------------------------------------------------------------------------
# policy


class GaussianPolicy:
    """Tanh-squashed Gaussian policy over ``obs ++ z``."""

    def __init__(self, obs_dim: int, act_dim: int, latent_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (128, 128)):
        if latent_dim < 0:
            raise ValueError("latent_dim must be >= 0")
        self.obs_dim, self.act_dim, self.latent_dim = obs_dim, act_dim, latent_dim
        self.trunk = Mlp(MlpSpec(obs_dim + latent_dim, 2 * act_dim, hidden), rng)

    @property
    def params(self) -> list[Tensor]:
        return self.trunk.params

    def _inputs(self, o, z) -> Tensor:
        o = dc.as_tensor(o)
        if z is None:
            z = np.zeros(o.shape[:-1] + (0,))
        z = dc.as_tensor(z)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dimension {z.shape[-1]} != policy latent_dim {self.latent_dim}")
        if self.latent_dim == 0:
            return o
        return dc.concat([o, z])

    def distribution(self, o, z) -> tuple[Tensor, Tensor]:
        out = self.trunk(self._inputs(o, z))
        mu = dc.take_last(out, 0, self.act_dim)
        log_std = dc.clamp(dc.take_last(out, self.act_dim, 2 * self.act_dim), LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def mean_action_numpy(self, o: np.ndarray, z: np.ndarray | None) -> np.ndarray:
        o = np.asarray(o, dtype=np.float64)
        if self.latent_dim:
            z = np.asarray(z, dtype=np.float64)
            if z.shape[-1] != self.latent_dim:
                raise ValueError(f"latent dimension {z.shape[-1]} != policy latent_dim {self.latent_dim}")
            o = np.concatenate([o, z], axis=-1)
        return np.tanh(self.trunk.forward_numpy(o)[..., :self.act_dim])

    def sample_numpy(self, o: np.ndarray, z: np.ndarray | None, eps: np.ndarray) -> np.ndarray:
        o = np.asarray(o, dtype=np.float64)
        if self.latent_dim:
            z = np.asarray(z, dtype=np.float64)
            if z.shape[-1] != self.latent_dim:
                raise ValueError(f"latent dimension {z.shape[-1]} != policy latent_dim {self.latent_dim}")
            o = np.concatenate([o, z], axis=-1)
        out = self.trunk.forward_numpy(o)
        mu = out[..., :self.act_dim]
        log_std = np.clip(out[..., self.act_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return np.tanh(mu + np.exp(log_std) * eps)


def policy_sample(policy: GaussianPolicy, o, z, eps) -> tuple[Tensor, Tensor]:
    """Reparameterized squashed-Gaussian sample and its log-density.

    ``o``, ``z`` and ``eps`` may be single vectors or ``[B, .]`` batches; the
    noise is supplied by the caller so the draw is replayable.
    """
    o_b, single = _batch(o)
    z_b = None if z is None else _batch(z)[0]
    eps_b = _batch(eps)[0]
    mu, log_std = policy.distribution(o_b, z_b)
    if eps_b.shape != mu.shape:
        raise dc.ShapeError(f"noise shape {eps_b.shape} != action shape {mu.shape}")
    u = mu + dc.exp(log_std) * eps_b
    action = dc.tanh(u)
    correction = dc.log(1.0 + SQUASH_EPS - dc.square(action)).sum(axis=-1)
    log_prob = dc.gaussian_log_prob(u, mu, log_std) - correction
    if single:
        return dc.reshape(action, (policy.act_dim,)), dc.reshape(log_prob, ())
    return action, log_prob


class DeterministicPolicy:
    """tanh(MLP(obs)) policy used by the MADDPG baseline."""

    latent_dim = 0

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (128, 128)):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.trunk = Mlp(MlpSpec(obs_dim, act_dim, hidden, final_activation="tanh"), rng)

    @property
    def params(self) -> list[Tensor]:
        return self.trunk.params

    def __call__(self, o, frozen: bool = False) -> Tensor:
        return self.trunk(o, frozen)

    def mean_action_numpy(self, o: np.ndarray, z=None) -> np.ndarray:
        return self.trunk.forward_numpy(o)


# ---------------------------------------------------------------------------
# variational predictor


class VariationalPredictor:
    """Gaussian q(a_target | a_cond, o_cond, o_target) with a fixed std.

    One network per owning agent, shared over partners through a one-hot code
    of the predicted agent's index.
    """

    def __init__(self, owner: int, n_agents: int, obs_dim: int, act_dim: int,
                 rng: np.random.Generator, sigma: float = 1.0, hidden: tuple[int, ...] = (128, 128)):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.owner, self.n_agents = owner, n_agents
        self.obs_dim, self.act_dim, self.sigma = obs_dim, act_dim, float(sigma)
        self.trunk = Mlp(MlpSpec(act_dim + 2 * obs_dim + n_agents, act_dim, hidden), rng)

    @property
    def params(self) -> list[Tensor]:
        return self.trunk.params

    def onehot(self, j: int, batch: int) -> np.ndarray:
        out = np.zeros((batch, self.n_agents))
        out[:, j] = 1.0
        return out

    def mean(self, a_cond, o_cond, o_target, target: int) -> Tensor:
        a_cond, single = _batch(a_cond)
        o_cond, o_target = _batch(o_cond)[0], _batch(o_target)[0]
        code = dc.constant(self.onehot(target, a_cond.shape[0]))
        mu = self.trunk(dc.concat([a_cond, o_cond, o_target, code]))
        return dc.reshape(mu, (self.act_dim,)) if single else mu


def variational_log_prob(pred: VariationalPredictor, a_j, a_i, o_i, o_j, j: int,
                         i: int | None = None) -> Tensor:
    """log q(a_j | a_i, o_i, o_j) under the predictor's Gaussian.

    ``i`` defaults to the predictor's owner. Passing ``i=j_other`` with
    ``j=owner`` evaluates the reverse direction q(a_owner | a_other, ...).
    """
    i = pred.owner if i is None else i
    if i == j:
        raise ValueError(f"variational term needs two distinct agents, got i == j == {j}")
    if not (0 <= j < pred.n_agents and 0 <= i < pred.n_agents):
        raise ValueError(f"agent index out of range for {pred.n_agents} agents")
    a_j_b, single = _batch(a_j)
    mu = pred.mean(a_i, o_i, o_j, j)
    if single:
        mu = dc.reshape(mu, (1, pred.act_dim))
    d = pred.act_dim
    sq = dc.square(a_j_b - mu).sum(axis=-1)
    out = dc.scale(sq, -0.5 / pred.sigma ** 2) + (-0.5 * d * math.log(2.0 * math.pi * pred.sigma ** 2))
    return dc.reshape(out, ()) if single else out


# ---------------------------------------------------------------------------
# critics


class CriticSet:
    """Twin action-value critics, a state-value critic and its EMA target."""

    def __init__(self, x_dim: int, a_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (128, 128)):
        self.x_dim, self.a_dim = x_dim, a_dim
        self.q1 = Mlp(MlpSpec(x_dim + a_dim, 1, hidden), rng)
        self.q2 = Mlp(MlpSpec(x_dim + a_dim, 1, hidden), rng)
        self.v = Mlp(MlpSpec(x_dim, 1, hidden), rng)
        self.v_target = Mlp(MlpSpec(x_dim, 1, hidden), rng)
        self.v_target.copy_from(self.v)
        for p in self.v_target.params:
            p.requires_grad = False

    @property
    def params(self) -> list[Tensor]:
        return self.q1.params + self.q2.params + self.v.params

    def value(self, x, frozen: bool = False) -> Tensor:
        x, _ = _batch(x)
        return dc.reshape(self.v(x, frozen), (x.shape[0],))

    def target_value_numpy(self, x: np.ndarray) -> np.ndarray:
        return self.v_target.forward_numpy(np.atleast_2d(x))[:, 0]


def critic_eval(critics: CriticSet, x, a_all, frozen: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Return (q1, q2, min(q1, q2)) as ``[B]`` tensors."""
    x, single = _batch(x)
    a_all = _batch(a_all)[0]
    if x.shape[-1] != critics.x_dim or a_all.shape[-1] != critics.a_dim:
        raise dc.ShapeError(
            f"critic expects x:{critics.x_dim}, a:{critics.a_dim}; got {x.shape}, {a_all.shape}")
    xa = dc.concat([x, a_all])
    b = x.shape[0]
    q1 = dc.reshape(critics.q1(xa, frozen), (b,))
    q2 = dc.reshape(critics.q2(xa, frozen), (b,))
    q_min = dc.minimum(q1, q2)
    if single:
        return dc.reshape(q1, ()), dc.reshape(q2, ()), dc.reshape(q_min, ())
    return q1, q2, q_min
