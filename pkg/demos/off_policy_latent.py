"""Off-policy LSTD on the latent simulator.

A logging policy and a nearby target (mean KL <= 0.5) act on true user
vectors.  The importance-weighted LSTD estimate of the target is compared
with the value obtained by actually running the target.

    python3 demos/off_policy_latent.py
"""
import numpy as np

from ltvrec import simulator as sim
from ltvrec import stats
from ltvrec.estimators import LSTDValueEvaluator, importance_ratios, state_batch
from ltvrec.policies import mean_kl

gamma = 0.9
world = sim.linear_world(seed=3)
k = world.k
rng = np.random.default_rng(3)

wb = np.zeros(3 * k + 1)
wb[k:2 * k] = rng.normal(0, 3, k)
wt = wb.copy()
wt[k:2 * k] += 0.5 * rng.normal(0, 3, k)

log = sim.generate_log(world, wb, 5000, seed=3)
traj = log.trajectories()
print(f"{traj.n_steps} logged steps, KL(target || behavior) = {mean_kl(wt, wb, traj.states, world.V):.3f}")

rho = importance_ratios(traj, world.V, wt, wb)
ev = LSTDValueEvaluator(traj, state_batch(traj).with_rho(rho), gamma, kind="offpolicy")
print("importance-ratio diagnostics:", ev.fit().diagnostics)
boot = stats.bootstrap_value(traj.n_trajectories, ev, B=200, seed=0)

# Truth, weighted like the evaluator's state sample.
L = traj.lengths
weight = np.repeat(np.minimum(5, L) / L, L)
mc = sim.rollout_returns(world, wt, traj.states, gamma, seed=1, n_rollouts=4)
truth = np.sum(weight * mc) / np.sum(weight)
lo, hi = boot.interval
print(f"estimate {boot.mean:.4f} +- {boot.half_width:.4f}; target run on-policy {truth:.4f}; "
      f"covered: {lo <= truth <= hi}")
