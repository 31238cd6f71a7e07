"""Finite-difference checks for every differentiable op and the three learner losses."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .verify import CheckResult, finite_difference_grad, grad_rel_error

OP_RTOL = 1e-4
LOSS_RTOL = 1e-3
H = 1e-5
# parameter perturbations of size H move pre-activations by far less than this
KINK_CLEARANCE = 1e-3


def _away_from(x: np.ndarray, points, gap: float = 1e-3) -> np.ndarray:
    """Nudge entries off kinks so central differences stay on one branch."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < gap
        x[close] += 4 * gap
    return x


def _unary(fn, x: np.ndarray, w: np.ndarray):
    def value(v):
        with dc.no_grad():
            return float((fn(dc.constant(v)).data * w).sum())

    t = dc.Tensor(x.copy(), requires_grad=True)
    with dc.Tape():
        out = fn(t)
        loss = dc.tensor_sum(dc.mul(out, dc.constant(w)) if out.ndim else dc.scale(out, float(w)))
        dc.backward(loss)
    return t.grad, finite_difference_grad(value, x, H)


def _binary(fn, x: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Gradients of sum(w * fn(x, y)) for both arguments."""
    def weighted(out):
        return dc.tensor_sum(dc.mul(out, dc.constant(w)) if out.ndim else dc.scale(out, float(w)))

    tx = dc.Tensor(x.copy(), requires_grad=True)
    ty = dc.Tensor(y.copy(), requires_grad=True)
    with dc.Tape():
        dc.backward(weighted(fn(tx, ty)))

    def fx(v):
        with dc.no_grad():
            return float(weighted(fn(dc.constant(v), dc.constant(y))).data)

    def fy(v):
        with dc.no_grad():
            return float(weighted(fn(dc.constant(x), dc.constant(v))).data)

    return [(tx.grad, finite_difference_grad(fx, x, H)), (ty.grad, finite_difference_grad(fy, y, H))]


def op_cases(rng: np.random.Generator) -> dict:
    """name -> list of (analytic, numeric) gradient pairs."""
    B, D, K = 4, 3, 5
    x = rng.normal(size=(B, D))
    y = rng.normal(size=(B, D))
    row = rng.normal(size=D)
    w = rng.normal(size=(B, D))
    cases = {
        "add": _binary(dc.add, x, y, w),
        "add_broadcast": _binary(dc.add, x, row, w),
        "sub": _binary(dc.sub, x, y, w),
        "mul": _binary(dc.mul, x, y, w),
        "minimum": _binary(dc.minimum, x, _away_from(y, [0.0]) + 0.5, w),
        "scale": [_unary(lambda t: dc.scale(t, -1.7), x, w)],
        "neg": [_unary(dc.neg, x, w)],
        "square": [_unary(dc.square, x, w)],
        "relu": [_unary(dc.relu, _away_from(x, [0.0]), w)],
        "tanh": [_unary(dc.tanh, x, w)],
        "exp": [_unary(dc.exp, x, w)],
        "log": [_unary(dc.log, np.abs(x) + 0.5, w)],
        "clamp": [_unary(lambda t: dc.clamp(t, -0.5, 0.5), _away_from(x, [-0.5, 0.5]), w)],
        "sum_all": [_unary(dc.tensor_sum, x, np.array(1.3))],
        "sum_axis": [_unary(lambda t: dc.tensor_sum(t, axis=-1), x, w[:, 0])],
        "mean": [_unary(dc.mean, x, np.array(0.7))],
        "reshape": [_unary(lambda t: dc.reshape(t, (D, B)), x, w.reshape(D, B))],
        "take_last": [_unary(lambda t: dc.take_last(t, 1, 3), x, w[:, 1:3])],
    }
    m = rng.normal(size=(D, K))
    cases["matmul"] = _binary(dc.matmul, x, m, rng.normal(size=(B, K)))
    cases["matmul_vector"] = _binary(dc.matmul, row, m, rng.normal(size=K))
    cases["concat_last"] = _binary(lambda a, b: dc.concat([a, b]), x, y, rng.normal(size=(B, 2 * D)))
    cases["concat_rows"] = _binary(lambda a, b: dc.concat([a, b], axis=0), x, y, rng.normal(size=(2 * B, D)))
    mu, ls = rng.normal(size=(B, D)), rng.normal(scale=0.3, size=(B, D))
    glp = [_unary(lambda t: dc.gaussian_log_prob(t, dc.constant(mu), dc.constant(ls)), x, w[:, 0]),
           _unary(lambda t: dc.gaussian_log_prob(dc.constant(x), t, dc.constant(ls)), mu, w[:, 0]),
           _unary(lambda t: dc.gaussian_log_prob(dc.constant(x), dc.constant(mu), t), ls, w[:, 0])]
    cases["gaussian_log_prob"] = glp
    return cases


def _tiny_learner(algorithm: str, seed: int):
    from .marl.config import AlgoConfig
    from .marl.learner import SoftLearner

    latent = 2 if algorithm == "vm3ac" else 0
    cfg = AlgoConfig(algorithm=algorithm, beta=0.1, latent_dim=latent, hidden=(8, 8), batch_size=6,
                     buffer_size=64)
    learner = SoftLearner(cfg, [4, 4], [2, 2], seed)
    rng = np.random.default_rng(seed + 1)
    for _ in range(12):
        obs = [rng.normal(size=4) for _ in range(2)]
        act = [np.tanh(rng.normal(size=2)) for _ in range(2)]
        learner.store(obs, act, float(rng.normal()), [rng.normal(size=4) for _ in range(2)], bool(rng.random() < 0.2))
    # biases start at zero, which can put a relu exactly on its kink when a
    # whole layer is inactive; random biases keep the probe at generic points
    for name, p in learner.named_params().items():
        if name.split(".")[-1].startswith("b") or ".v_target." in name:
            p.data += rng.normal(scale=0.1, size=p.data.shape)
    return learner


def kink_distance(tape: dc.Tape) -> float:
    """Smallest distance of any recorded relu / clamp / minimum input to its switch point."""
    from .nets import LOG_STD_MAX, LOG_STD_MIN

    dist = np.inf
    for rec in tape.records:
        if rec.op == "relu":
            dist = min(dist, float(np.min(np.abs(rec.inputs[0].data))))
        elif rec.op == "clamp":
            x = rec.inputs[0].data
            dist = min(dist, float(np.min(np.abs(x - LOG_STD_MIN))), float(np.min(np.abs(x - LOG_STD_MAX))))
        elif rec.op == "minimum":
            dist = min(dist, float(np.min(np.abs(rec.inputs[0].data - rec.inputs[1].data))))
    return dist


def _probe_point(learner, rng, tries: int = 50):
    """A batch and frozen noise whose forward pass stays clear of every kink.

    Central differences across a relu kink measure a one-sided average, not the
    derivative, so points within ``KINK_CLEARANCE`` of one are redrawn.
    """
    from .marl import losses as L

    for _ in range(tries):
        batch = learner.sample_batch()
        noise = learner.draw_noise(len(batch))
        with dc.Tape() as tape:
            L.losses(learner, batch, 0, noise)
            clear = kink_distance(tape) > KINK_CLEARANCE
            tape.clear()
        if clear:
            return batch, noise
    raise RuntimeError("could not find a kink-free probe point")


def loss_cases(rng: np.random.Generator, algorithm: str = "vm3ac") -> dict:
    """Frozen-noise finite differences of (L_V, L_Q, L_pi) for agent 0."""
    from .marl import losses as L

    learner = _tiny_learner(algorithm, int(rng.integers(1 << 30)))
    batch, noise = _probe_point(learner, rng)
    agent = learner.agents[0]
    targets = {
        "loss_v": (0, agent.critics.v.params),
        "loss_q": (1, agent.critics.q1.params + agent.critics.q2.params),
        "loss_pi": (2, agent.policy.params + (agent.predictor.params if agent.predictor else [])),
    }
    with dc.no_grad():
        # agent 0's fresh action, held fixed inside the stop-gradient factor
        own = L.actor_pass(learner, batch, noise).actions[0].data.copy()
    out = {}
    for name, (k, params) in targets.items():
        for p in learner.named_params().values():
            p.grad = None
        with dc.Tape():
            loss = L.losses(learner, batch, 0, noise)[k]
            dc.backward(loss, params)
        pairs = []
        for p in params:
            analytic = p.grad.copy()
            base = p.data.copy()

            def value(v, p=p):
                p.data[...] = v
                with dc.no_grad():
                    return float(L.losses(learner, batch, 0, noise, frozen_own=own)[k].data)

            numeric = finite_difference_grad(value, base, H)
            p.data[...] = base
            pairs.append((analytic, numeric))
        out[f"{algorithm}.{name}"] = pairs
    return out


def _result(name: str, pairs, rtol: float) -> CheckResult:
    worst = max(grad_rel_error(a, n, rtol=rtol) for a, n in pairs)
    return CheckResult(f"grad.{name}", worst < rtol, worst, {"max_rel_error": worst, "rtol": rtol})


def gradient_checks(rng: np.random.Generator) -> list[CheckResult]:
    results = [_result(name, pairs, OP_RTOL) for name, pairs in op_cases(rng).items()]
    for algorithm in ("vm3ac", "masac"):
        results += [_result(name, pairs, LOSS_RTOL) for name, pairs in loss_cases(rng, algorithm).items()]
    return results
