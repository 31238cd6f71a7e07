"""Training loop, metrics stream and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..envs import make_env
from ..nets import DeterministicPolicy, GaussianPolicy
from .config import AlgoConfig
from .execution import evaluate
from .learner import make_learner

METRICS_FORMAT = "vm3ac-metrics/1"
LOSS_KEYS = ("loss_v", "loss_q", "loss_pi")


class TrainingAborted(RuntimeError):
    """Raised when a loss or parameter goes non-finite; carries the dump path."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class RunResult:
    header: dict
    records: list[dict]
    learner: object
    checkpoint: Path | None = None
    metrics_path: Path | None = None
    extra: dict = field(default_factory=dict)


def metrics_header(env_name: str, env_params: dict, config: AlgoConfig, seed: int, total_steps: int,
                   eval_interval: int, eval_episodes: int) -> dict:
    return {"type": "header", "format": METRICS_FORMAT, "seed": int(seed), "env": env_name,
            "env_params": env_params, "algo": config.to_dict(), "total_steps": int(total_steps),
            "eval_interval": int(eval_interval), "eval_episodes": int(eval_episodes)}


def write_metrics(path, header: dict, records: list[dict]) -> None:
    with Path(path).open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_metrics(path) -> tuple[dict, list[dict]]:
    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ValueError(f"{path}: missing metrics header")
    return lines[0], lines[1:]


def _param_report(learner) -> dict:
    out = {}
    for name, p in learner.named_params().items():
        data = p.data
        out[name] = {"finite": bool(np.isfinite(data).all()), "max_abs": float(np.nanmax(np.abs(data)))}
    return out


def _abort(out_dir, seed, step, reason, last_metrics, learner) -> TrainingAborted:
    dump = None
    if out_dir is not None:
        dump = Path(out_dir) / f"abort_seed{seed}.json"
        dump.write_text(json.dumps({"seed": seed, "step": step, "reason": reason,
                                    "last_metrics": last_metrics, "params": _param_report(learner)},
                                   indent=1, default=str))
    return TrainingAborted(f"non-finite value at step {step}: {reason}", dump)


def train(config: AlgoConfig, env_name: str = "coopnav", env_params: dict | None = None, seed: int = 0,
          total_steps: int = 0, eval_interval: int = 5000, eval_episodes: int = 10,
          out_dir=None, exec_mode: str | None = None, checkpoint: bool = True) -> RunResult:
    """Interleave shared-latent rollouts with gradient updates and periodic evaluation.

    An evaluation record is written at step 0 and then every ``eval_interval``
    steps (and at the final step). Evaluation reuses the same episode seeds at
    every point so returns are comparable over the run.
    """
    config.validate()
    env_params = dict(env_params or {})
    env = make_env(env_name, env_params)
    eval_env = make_env(env_name, env_params)
    learner = make_learner(config, env.obs_dims, env.action_dims, seed)
    mode = exec_mode or config.exec_latent_mode
    header = metrics_header(env_name, env_params, config, seed, total_steps, eval_interval, eval_episodes)
    eval_seeds = learner.rngs["eval"].integers(0, 2**31 - 1, size=eval_episodes)
    env_rng = learner.rngs["env"]

    records: list[dict] = []
    pending: list[dict] = []

    def eval_point(step: int) -> None:
        res = evaluate(learner.policies(), eval_env, eval_seeds, mode=mode, latent_seed=seed,
                       stochastic=config.exec_stochastic)
        losses = {k: (float(np.mean([m[k] for m in pending])) if pending else None) for k in LOSS_KEYS}
        records.append({
            "type": "eval", "step": step, "seed": int(seed),
            "mean_return": res["mean_return"], "std_return": res["std_return"],
            "losses": losses,
            "entropy": float(np.mean([m["entropy"] for m in pending])) if pending else None,
            "mi_proxy": float(np.mean([m["mi_proxy"] for m in pending])) if pending else None,
            "updates": learner.updates, "exec_mode": mode,
            "cross_agent_reads": res["cross_agent_reads"],
            "latent_draws": learner.audit.draws, "latent_violations": len(learner.audit.violations),
        })
        pending.clear()

    if total_steps > 0:
        eval_point(0)
        obs = env.reset(int(env_rng.integers(2**31 - 1)))
        last = None
        for step in range(1, total_steps + 1):
            learner.progress = step / total_steps
            actions = learner.act_train(obs)
            next_obs, reward, done = env.step(actions)
            learner.store(obs, actions, reward, next_obs, env.terminated, env.truncated)
            obs = env.reset(int(env_rng.integers(2**31 - 1))) if done else next_obs
            if step > config.warmup_steps and step % config.update_every == 0:
                for _ in range(config.updates_per_step):
                    try:
                        m = learner.update()
                    except dc.NonFiniteError as exc:
                        raise _abort(out_dir, seed, step, str(exc), last, learner) from exc
                    if m is None:
                        break
                    if not all(math.isfinite(m[k]) for k in LOSS_KEYS):
                        raise _abort(out_dir, seed, step, f"loss {m}", last, learner)
                    last = m
                    pending.append(m)
            if step % eval_interval == 0 or step == total_steps:
                eval_point(step)

    result = RunResult(header, records, learner)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out / f"metrics_seed{seed}.jsonl"
        write_metrics(result.metrics_path, header, records)
        if checkpoint:
            result.checkpoint = out / f"checkpoint_seed{seed}.json"
            save_learner(result.checkpoint, learner, env_name, env_params)
    return result


def save_learner(path, learner, env_name: str, env_params: dict) -> None:
    meta = learner.meta()
    meta.update({"env": env_name, "env_params": env_params, "algo": learner.config.to_dict()})
    dc.save_checkpoint(path, learner.named_params(), meta)


def load_policies(path) -> tuple[list, dict]:
    """Rebuild the executable policies stored in a checkpoint."""
    arrays, meta = dc.load_checkpoint(path)
    rng = np.random.default_rng(0)
    hidden = tuple(meta["hidden"])
    policies = []
    for i, (o, a) in enumerate(zip(meta["obs_dims"], meta["act_dims"])):
        if meta["algorithm"] == "maddpg":
            pol = DeterministicPolicy(o, a, rng, hidden)
        else:
            pol = GaussianPolicy(o, a, meta["latent_dim"], rng, hidden)
        pol.trunk.load_arrays(arrays, f"agent{i}.policy")
        policies.append(pol)
    return policies, meta


def check_compatible(policies, env) -> None:
    """Reject a checkpoint whose policy shapes do not fit ``env``."""
    got = [(p.obs_dim, p.act_dim) for p in policies]
    want = list(zip(env.obs_dims, env.action_dims))
    if got != want:
        raise dc.ShapeError(f"checkpoint policies (obs, act) {got} vs environment {want}")
