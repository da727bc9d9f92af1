"""Linear TD estimates on a small tabular MDP against the exact answer.

With one-hot features the expected-model LSTD solution is the exact value
function, and LSTDQ with indicator features is the exact Q-function.  A
sampled log gets close, and a greedy step on the exact Q improves J.

    python3 demos/tabular_lstd.py
"""
import numpy as np

from ltvrec import simulator as sim
from ltvrec.estimators import lstd, lstdq, monte_carlo_value

mdp = sim.TabularMDP.random(4, 2, gamma=0.9, seed=0)
pi = np.full((4, 2), 0.5)

V, J = sim.exact_value(mdp, pi)
theta = lstd(sim.expected_state_batch(mdp, pi), mdp.gamma, epsilon=0.0).theta
print("exact V      ", np.round(V, 6))
print("LSTD theta   ", np.round(theta, 6))

Q = sim.exact_q(mdp, pi)
theta_q = lstdq(sim.expected_q_batch(mdp, pi), mdp.gamma, epsilon=0.0).theta
print("max |Q - theta_Q|", np.abs(Q.reshape(-1) - theta_q).max())

# Episodes end with probability 1 - gamma after each step, so undiscounted
# returns estimate the discounted J.
log = sim.generate_tabular_log(mdp, pi, 20_000, seed=1)
print(f"J exact {J:.4f}   Monte-Carlo {monte_carlo_value(log.trajectories(), 1.0):.4f}")

greedy = sim.greedy_policy(Q)
print(f"J after one greedy step {sim.exact_value(mdp, greedy)[1]:.4f}")
