"""Algorithm configuration and the per-environment defaults."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

ALGORITHMS = ("vm3ac", "masac", "isac", "maac", "maddpg")
EXEC_MODES = ("zero", "seeded")

# (environment, number of agents) -> temperature / latent dimension
TEMPERATURE = {
    ("coopnav", 3): 0.1,
    ("predprey", 2): 0.05,
    ("predprey", 3): 0.1,
    ("predprey", 4): 0.05,
}
LATENT_DIM = {
    ("coopnav", 3): 8,
    ("predprey", 2): 4,
    ("predprey", 3): 2,
    ("predprey", 4): 4,
}


class ConfigError(ValueError):
    pass


@dataclass
class AlgoConfig:
    algorithm: str = "vm3ac"
    beta: float = 0.1
    latent_dim: int = 8
    gamma: float = 0.99
    lr: float = 3e-4
    batch_size: int = 128
    tau: float = 0.005
    buffer_size: int = 500_000
    hidden: tuple[int, ...] = (128, 128)
    mc_samples: int = 1
    sigma_q: float = 1.0
    # scales the variational sum; 0 turns VM3-AC into MA-SAC with a latent input
    var_coef: float = 1.0
    exec_latent_mode: str = "zero"
    exec_stochastic: bool = False
    warmup_steps: int = 1000
    update_every: int = 1
    updates_per_step: int = 1
    # MADDPG exploration noise, annealed linearly over the run
    noise_std: float = 0.1
    noise_std_final: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self) -> "AlgoConfig":
        errors = []
        if self.algorithm not in ALGORITHMS:
            errors.append(f"algorithm: {self.algorithm!r} not in {ALGORITHMS}")
        if self.beta < 0:
            errors.append("beta: must be >= 0")
        if self.latent_dim < 0:
            errors.append("latent_dim: must be >= 0")
        if not 0 <= self.gamma <= 1:
            errors.append("gamma: must lie in [0, 1]")
        if not 0 <= self.tau <= 1:
            errors.append("tau: must lie in [0, 1]")
        if self.batch_size <= 0:
            errors.append("batch_size: must be positive")
        if self.buffer_size < self.batch_size:
            errors.append("buffer_size: smaller than batch_size")
        if self.mc_samples != 1:
            errors.append("mc_samples: only L = 1 is supported")
        if self.sigma_q <= 0:
            errors.append("sigma_q: must be positive")
        if self.exec_latent_mode not in EXEC_MODES:
            errors.append(f"exec_latent_mode: {self.exec_latent_mode!r} not in {EXEC_MODES}")
        if self.update_every <= 0 or self.updates_per_step < 0:
            errors.append("update_every / updates_per_step: must be positive")
        if self.algorithm in ("maddpg", "maac") and self.beta != 0:
            errors.append(f"beta: {self.algorithm} has no entropy term, beta must be 0")
        if self.algorithm in ("maddpg", "maac", "masac", "isac") and self.latent_dim != 0:
            errors.append(f"latent_dim: {self.algorithm} takes no latent input, must be 0")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlgoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown algorithm fields: {sorted(unknown)}")
        return cls(**d)


def for_env(env_name: str, n_agents: int, algorithm: str = "vm3ac", **overrides) -> AlgoConfig:
    """Defaults for one environment, with the baseline-specific constraints applied."""
    beta = TEMPERATURE.get((env_name, n_agents), 0.1)
    latent = LATENT_DIM.get((env_name, n_agents), 8)
    if algorithm in ("maddpg", "maac"):
        beta = 0.0
    if algorithm != "vm3ac":
        latent = 0
    cfg = AlgoConfig(algorithm=algorithm, beta=beta, latent_dim=latent)
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown algorithm field {key!r}")
        setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg.validate()
