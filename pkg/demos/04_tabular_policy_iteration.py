"""
Modified policy iteration on tabular games
==========================================

The Bellman operator with entropy and variational bonuses is a
gamma-contraction; iterating it reaches the linear-solve fixed point. An
improvement step for one agent never lowers its Q-function.
"""
import numpy as np

from vm3ac.envs import random_game
from vm3ac.verify import (bellman_apply, contraction_iterations, exact_value, improvement_step,
                          random_policy, random_q)

rng = np.random.default_rng(0)
game = random_game(rng, 3, (2, 3), gamma=0.9)
policy = random_policy(rng, 3, (2, 3), n_latent=2)
q = random_q(rng, 3, (2, 3))
beta = 0.1

v, q_star = exact_value(game, policy, q, beta)
print("exact V:", np.round(v, 4))

Q = np.zeros_like(q_star)
for k in range(1, 301):
    Q = bellman_apply(game, policy, q, beta, Q)
    if k in (1, 10, 50, 100, 300):
        print(f"sweep {k:3d}: sup error {np.abs(Q - q_star).max():.2e}")
print("sweeps the contraction bound asks for at gamma 0.99:",
      contraction_iterations(0.99, float(np.abs(q_star).max())))

for it in range(4):
    policy, q, report = improvement_step(game, policy, q, beta, i=it % 2, resolution=4)
    print(f"improve agent {it % 2}: min dQ {report.min_delta_q:+.4f}, "
          f"mean V {exact_value(game, policy, q, beta)[0].mean():.4f}")
