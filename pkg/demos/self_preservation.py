"""The full pipeline on a world where short-term reward costs users.

Trap items are accepted often but end the session with probability 0.7.
The pipeline learns states from the log alone, fits the behavior policy,
builds a lifetime-value target (LSTDQ at the data discount) and a myopic
policy (LSTDQ at 0), and compares them with bootstrap plus a signed-rank
test.  Takes about a minute.

    python3 demos/self_preservation.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from ltvrec import simulator as sim
from ltvrec.pipeline import RunConfig, run_all
from ltvrec.report import render_text

workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="ltv_"))
workdir.mkdir(parents=True, exist_ok=True)

world = sim.self_preservation_world(seed=0)
log = sim.generate_log(world, np.zeros(3 * world.k + 1), 20_000, seed=0)
log.save(workdir / "log.csv", workdir / "truth.json")
print(f"simulated {len(log.records)} interactions into {workdir}")

cfg = RunConfig(input=str(workdir / "log.csv"), workdir=str(workdir / "run"),
                min_interactions=1, k=4, cv_methods="svd,mean")
report = run_all(cfg)
print(render_text(report))

truth = sim.truth_for(world, report["metadata"]["gamma"])
print("scripted reference policies (rollouts):",
      {name: round(t["J"], 3) for name, t in truth.items()})
