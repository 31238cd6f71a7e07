"""
Particle environments
=====================

Cooperative navigation (3 agents, 3 landmarks) and predator-prey (predators
on a fixed prey lattice). Same seed, same trajectory.
"""
import numpy as np

from vm3ac.envs import make_env, predator_prey_preset

rng = np.random.default_rng(0)

env = make_env("coopnav")
obs = env.reset(seed=1)
print("coopnav obs dims:", env.obs_dims, "action dims:", env.action_dims)
total, done = 0.0, False
while not done:
    obs, r, done = env.step([rng.uniform(-1, 1, 2) for _ in range(env.n_agents)])
    total += r
print(f"random-policy return over {env.config.horizon} steps: {total:.1f}")

# agents that head straight for the landmark assigned to them do much better
obs = env.reset(seed=1)
total, done = 0.0, False
while not done:
    actions = [np.clip(5 * (env.landmarks[i] - env.pos[i]), -1, 1) for i in range(env.n_agents)]
    obs, r, done = env.step(actions)
    total += r
print(f"greedy-assignment return: {total:.1f}")

for n in (2, 3, 4):
    cfg = predator_prey_preset(n)
    print(f"predator-prey N={n}: quota {cfg.capture_quota}, {cfg.n_preys} prey")

env = make_env("predprey", {"capture_radius": 0.3})
env.reset(seed=2)
rewards = []
done = False
while not done:
    _, r, done = env.step([rng.uniform(-1, 1, 2) for _ in range(env.n_agents)])
    rewards.append(r)
print("predator-prey random return:", sum(rewards), "captured this round:", env.n_captured)
