"""Learners, losses, replay, training loop and decentralized execution."""
from .buffer import Batch, ReplayBuffer, Transition
from .config import ALGORITHMS, EXEC_MODES, AlgoConfig, ConfigError, for_env
from .learner import LatentAudit, MaddpgLearner, SoftLearner, make_learner

__all__ = ["ALGORITHMS", "EXEC_MODES", "AlgoConfig", "Batch", "ConfigError", "LatentAudit",
           "MaddpgLearner", "ReplayBuffer", "SoftLearner", "Transition", "for_env", "make_learner"]
