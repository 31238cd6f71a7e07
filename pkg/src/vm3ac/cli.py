"""Command-line experiment runner: ``train``, ``eval``, ``verify`` and ``sweep``.

Config files are YAML (JSON is valid YAML too)::

    env: coopnav                # coopnav | predprey
    env_params: {n_agents: 3}   # fields of CoopNavConfig / PredatorPreyConfig
    algo:                       # AlgoConfig fields; unset ones take per-environment defaults
      algorithm: vm3ac
      beta: 0.1
    seeds: [0, 1, 2]
    total_steps: 200000
    eval_interval: 5000
    eval_episodes: 10
    out_dir: runs/cn3           # --out overrides
    sweep:                      # optional: one AlgoConfig field and its values
      beta: [0.0, 0.05, 0.1, 0.15]

Outputs per run directory: ``metrics_seed<k>.jsonl`` and
``checkpoint_seed<k>.json`` per seed, ``aggregate.csv`` (step, mean, std over
seeds), ``curve.svg`` and ``config.yaml`` (the resolved config).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .envs import ENVIRONMENTS, make_env
from .marl.config import EXEC_MODES, AlgoConfig, ConfigError, for_env
from .marl.execution import evaluate
from .marl.training import check_compatible, load_policies, read_metrics, train
from .verify import run_suite

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


@dataclass
class ExperimentConfig:
    env: str = "coopnav"
    env_params: dict = field(default_factory=dict)
    algo: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    total_steps: int = 200_000
    eval_interval: int = 5000
    eval_episodes: int = 10
    out_dir: str = "runs/experiment"
    sweep: dict = field(default_factory=dict)

    def n_agents(self) -> int:
        return make_env(self.env, self.env_params).n_agents

    def algo_config(self, **overrides) -> AlgoConfig:
        params = {**self.algo, **overrides}
        algorithm = params.pop("algorithm", "vm3ac")
        if "hidden" in params:
            params["hidden"] = tuple(params["hidden"])
        return for_env(self.env, self.n_agents(), algorithm, **params)

    def validate(self) -> "ExperimentConfig":
        errors = []
        if self.env not in ENVIRONMENTS:
            errors.append(f"env: {self.env!r} not in {sorted(ENVIRONMENTS)}")
        else:
            try:
                make_env(self.env, self.env_params)
            except (TypeError, ValueError) as exc:
                errors.append(f"env_params: {exc}")
        if not isinstance(self.seeds, list) or not self.seeds or \
                not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            errors.append("seeds: must be a non-empty list of integers")
        for name in ("total_steps", "eval_interval", "eval_episodes"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < (0 if name == "total_steps" else 1):
                errors.append(f"{name}: must be an integer >= {0 if name == 'total_steps' else 1}")
        if len(self.sweep) > 1:
            errors.append("sweep: give exactly one field")
        for key, values in self.sweep.items():
            if key not in AlgoConfig.__dataclass_fields__:
                errors.append(f"sweep.{key}: unknown algorithm field")
            elif not isinstance(values, list) or not values:
                errors.append(f"sweep.{key}: must be a non-empty list")
        if errors:
            raise ConfigError("; ".join(errors))
        try:
            if not self.sweep:
                self.algo_config()
            for key, values in self.sweep.items():
                for v in values:
                    self.algo_config(**{key: v})
        except ConfigError as exc:
            raise ConfigError(f"algo: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"algo: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for key in ("env_params", "algo", "sweep"):
        if key in raw and raw[key] is None:
            raw[key] = {}
        if key in raw and not isinstance(raw[key], dict):
            raise ConfigError(f"{key}: must be a mapping")
    return ExperimentConfig(**raw).validate()


# ---------------------------------------------------------------------------
# aggregation and plotting


def aggregate(metric_paths) -> list[tuple[int, float, float]]:
    """(step, mean, std) over seeds, using the steps common to every file."""
    per_seed = []
    for p in metric_paths:
        _, records = read_metrics(p)
        per_seed.append({r["step"]: r["mean_return"] for r in records})
    if not per_seed:
        return []
    steps = sorted(set.intersection(*(set(d) for d in per_seed)))
    rows = []
    for s in steps:
        vals = np.array([d[s] for d in per_seed])
        rows.append((s, float(vals.mean()), float(vals.std())))
    return rows


def write_aggregate(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean", "std"])
        for step, mean, std in rows:
            w.writerow([step, repr(mean), repr(std)])


def write_svg(path, series: dict, title: str = "") -> None:
    """Line chart of mean return with a +-std band, one line per series."""
    width, height, pad = 640, 400, 50
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    pts = [(s, m - d, m + d) for rows in series.values() for s, m, d in rows]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>']
    if pts:
        x_lo, x_hi = min(p[0] for p in pts), max(p[0] for p in pts)
        y_lo, y_hi = min(p[1] for p in pts), max(p[2] for p in pts)
        x_hi = x_hi if x_hi > x_lo else x_lo + 1
        y_hi = y_hi if y_hi > y_lo else y_lo + 1

        def sx(v):
            return pad + (v - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

        def sy(v):
            return height - pad - (v - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

        parts.append(f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
                     'fill="none" stroke="#888"/>')
        parts.append(f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x_lo:g}</text>')
        parts.append(f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="end">'
                     f'{x_hi:g}</text>')
        parts.append(f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y_lo:.1f}</text>')
        parts.append(f'<text x="{pad - 4}" y="{pad + 10}" font-size="10" text-anchor="end">{y_hi:.1f}</text>')
        for k, (label, rows) in enumerate(series.items()):
            c = colors[k % len(colors)]
            upper = " ".join(f"{sx(s):.1f},{sy(m + d):.1f}" for s, m, d in rows)
            lower = " ".join(f"{sx(s):.1f},{sy(m - d):.1f}" for s, m, d in reversed(rows))
            parts.append(f'<polygon points="{upper} {lower}" fill="{c}" fill-opacity="0.15" stroke="none"/>')
            line = " ".join(f"{sx(s):.1f},{sy(m):.1f}" for s, m, _ in rows)
            parts.append(f'<polyline points="{line}" fill="none" stroke="{c}" stroke-width="2"/>')
            parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 + 14 * k}" font-size="11" '
                         f'text-anchor="end" fill="{c}">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


# ---------------------------------------------------------------------------
# commands


def run_experiment(cfg: ExperimentConfig, out: Path, algo: AlgoConfig, label: str = "") -> list:
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["algo"] = algo.to_dict()
    resolved["sweep"] = {}
    resolved["out_dir"] = str(out)
    (out / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    summary = []
    for seed in cfg.seeds:
        res = train(algo, cfg.env, cfg.env_params, seed, cfg.total_steps, cfg.eval_interval,
                    cfg.eval_episodes, out_dir=out)
        first = res.records[0]["mean_return"] if res.records else float("nan")
        last = res.records[-1]["mean_return"] if res.records else float("nan")
        summary.append((label, seed, first, last, res.learner.updates))
    rows = aggregate([out / f"metrics_seed{s}.jsonl" for s in cfg.seeds])
    write_aggregate(out / "aggregate.csv", rows)
    write_svg(out / "curve.svg", {label or algo.algorithm: rows}, title=f"{cfg.env} / {algo.algorithm}")
    return summary


def print_summary(summary) -> None:
    print(f"{'run':<20} {'seed':>6} {'initial':>10} {'final':>10} {'updates':>8}")
    for label, seed, first, last, updates in summary:
        print(f"{label:<20} {seed:>6} {_fmt(first):>10} {_fmt(last):>10} {updates:>8}")


def _fmt(value: float) -> str:
    return "-" if value != value else f"{value:.2f}"


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.sweep:
        return cmd_sweep(cfg, out)
    algo = cfg.algo_config()
    print_summary(run_experiment(cfg, out, algo, algo.algorithm))
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> int:
    if not cfg.sweep:
        raise ConfigError("sweep: the config has no sweep block")
    (key, values), = cfg.sweep.items()
    summary, series = [], {}
    for v in values:
        label = f"{key}={v}"
        algo = cfg.algo_config(**{key: v})
        summary += run_experiment(cfg, out / label, algo, label)
        series[label] = aggregate([out / label / f"metrics_seed{s}.jsonl" for s in cfg.seeds])
    write_svg(out / "sweep.svg", series, title=f"{cfg.env} sweep over {key}")
    print_summary(summary)
    return EXIT_OK


def cmd_eval(checkpoint, episodes: int, modes, seed: int, env_name=None, out=None) -> int:
    policies, meta = load_policies(checkpoint)
    env_name = env_name or meta.get("env", "coopnav")
    env = make_env(env_name, meta.get("env_params", {}) if env_name == meta.get("env") else {})
    check_compatible(policies, env)
    episode_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=episodes)
    report, status = {}, EXIT_OK
    for mode in modes:
        res = evaluate(policies, env, episode_seeds, mode=mode, latent_seed=seed)
        report[mode] = res
        print(f"mode={mode:<7} mean_return={res['mean_return']:.3f} +- {res['std_return']:.3f} "
              f"episodes={episodes} cross_agent_reads={res['cross_agent_reads']}")
        if res["cross_agent_reads"]:
            status = EXIT_FAIL
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "eval.json").write_text(json.dumps(report, indent=1))
    return status


def cmd_verify(seed: int, out=None, negative_control: bool = False, n_mi: int = 500, n_games: int = 100) -> int:
    results = run_suite(seed=seed, n_mi=n_mi, n_games=n_games, negative_control=negative_control)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} worst={r.worst_margin:.3e}")
    for r in failed:
        print(f"counterexample for {r.name}: {json.dumps(r.detail.get('counterexample', r.detail), default=str)}")
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "verify.json").write_text(json.dumps(
            [{"name": r.name, "passed": r.passed, "worst_margin": r.worst_margin, "detail": r.detail}
             for r in results], indent=1, default=str))
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vm3ac", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed-override", type=int, nargs="+", help="replace the config's seed list")
        p.add_argument("--out", help="output directory (overrides out_dir)")
    p = sub.add_parser("eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", help="environment name (default: the one stored in the checkpoint)")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--mode", choices=EXEC_MODES, help="latent mode; both are run when omitted")
    p.add_argument("--seed-override", type=int, default=0)
    p.add_argument("--out")
    p = sub.add_parser("verify")
    p.add_argument("--seed-override", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--negative-control", action="store_true", help="inject a gamma > 1 game that must fail")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("train", "sweep"):
            cfg = load_config(args.config)
            if args.seed_override:
                cfg.seeds = list(args.seed_override)
                cfg.validate()
            out = Path(args.out or cfg.out_dir)
            return cmd_train(cfg, out) if args.command == "train" else cmd_sweep(cfg, out)
        if args.command == "eval":
            modes = [args.mode] if args.mode else list(EXEC_MODES)
            return cmd_eval(args.checkpoint, args.episodes, modes, args.seed_override, args.env, args.out)
        return cmd_verify(args.seed_override, args.out, args.negative_control)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
