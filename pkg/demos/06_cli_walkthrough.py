"""
Command-line runner
===================

``vm3ac train|sweep|eval|verify``. Here the verbs are called through
``main`` on a tiny config; from a shell use ``python -m vm3ac ...``.
"""
import tempfile
from pathlib import Path

import yaml

from vm3ac.cli import main

work = Path(tempfile.mkdtemp())
config = {
    "env": "coopnav",
    "algo": {"algorithm": "vm3ac", "hidden": [32, 32], "warmup_steps": 200, "batch_size": 64},
    "seeds": [0, 1],
    "total_steps": 1000,
    "eval_interval": 500,
    "eval_episodes": 3,
    "out_dir": str(work / "run"),
}
(work / "cfg.yaml").write_text(yaml.safe_dump(config))

main(["train", "--config", str(work / "cfg.yaml")])
print((work / "run" / "aggregate.csv").read_text())

main(["eval", "--checkpoint", str(work / "run" / "checkpoint_seed0.json"), "--episodes", "3"])

config["sweep"] = {"beta": [0.05, 0.2]}
config["seeds"] = [0]
(work / "sweep.yaml").write_text(yaml.safe_dump(config))
main(["sweep", "--config", str(work / "sweep.yaml"), "--out", str(work / "sweep")])

code = main(["verify", "--out", str(work)])
print("verify exit code:", code)
