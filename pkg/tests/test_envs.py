import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vm3ac.envs import (CoopNavConfig, CooperativeNavigation, DiscreteGame, EpisodeDone, PredatorPrey,
                        PredatorPreyConfig, coopnav_reward, find_captures, make_env, pp_reward,
                        predator_prey_preset, prey_lattice, random_game)


def rollout(env, seed, n_steps, action_seed=0):
    rng = np.random.default_rng(action_seed)
    obs = [env.reset(seed)]
    rewards = []
    for _ in range(n_steps):
        o, r, done = env.step([rng.uniform(-1, 1, 2) for _ in range(env.n_agents)])
        obs.append(o)
        rewards.append(r)
        if done:
            break
    return obs, rewards


@pytest.mark.parametrize("name", ["coopnav", "predprey"])
def test_same_seed_same_trajectory(name):
    o1, r1 = rollout(make_env(name), 7, 40)
    o2, r2 = rollout(make_env(name), 7, 40)
    assert np.array_equal(np.array(o1), np.array(o2)) and r1 == r2


def test_different_seed_different_start():
    env = make_env("coopnav")
    assert not np.array_equal(env.reset(1)[0], env.reset(2)[0])


def test_coopnav_observation_layout():
    env = CooperativeNavigation()
    obs = env.reset(3)
    assert env.obs_dims == [4 + 2 * 2 + 2 * 3] * 3
    o = obs[1]
    np.testing.assert_array_equal(o[:2], env.pos[1])
    np.testing.assert_array_equal(o[2:4], env.vel[1])
    np.testing.assert_allclose(o[4:6], env.pos[0] - env.pos[1])
    np.testing.assert_allclose(o[6:8], env.pos[2] - env.pos[1])
    np.testing.assert_allclose(o[8:].reshape(3, 2), env.landmarks - env.pos[1])


def test_predprey_lattice_is_four_by_four():
    env = PredatorPrey()
    env.reset(0)
    lat = env.prey_pos
    assert lat.shape == (16, 2)
    assert len(np.unique(lat[:, 0])) == 4 and len(np.unique(lat[:, 1])) == 4


def test_perfect_square_required():
    with pytest.raises(ValueError, match="perfect square"):
        PredatorPreyConfig(n_preys=15)


def test_step_after_done_rejected():
    env = make_env("coopnav", {"horizon": 2})
    env.reset(0)
    env.step([np.zeros(2)] * 3)
    _, _, done = env.step([np.zeros(2)] * 3)
    assert done and env.truncated and not env.terminated
    with pytest.raises(EpisodeDone):
        env.step([np.zeros(2)] * 3)


def test_out_of_range_actions_are_clipped_and_counted():
    env = make_env("coopnav")
    env.reset(0)
    env.step([np.array([3.0, 0.0]), np.zeros(2), np.array([-2.0, 5.0])])
    assert env.clip_count == 3


def test_walls_clamp_positions():
    env = make_env("coopnav")
    env.reset(0)
    for _ in range(50):
        env.step([np.ones(2)] * 3)
    assert np.all(np.abs(env.pos) <= 1.0)


def test_trajectory_dump(tmp_path):
    env = make_env("coopnav", record=True)
    env.reset(0)
    for _ in range(3):
        env.step([np.zeros(2)] * 3)
    env.dump_trajectory(tmp_path / "t.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert [x["t"] for x in lines] == [1, 2, 3]


# -- rewards -----------------------------------------------------------------


def test_all_landmarks_occupied_gives_bonus():
    lm = np.array([[0.0, 0.0], [0.5, 0.5], [-0.5, 0.5]])
    assert coopnav_reward(lm.copy(), lm, CoopNavConfig()) == 1.0


def test_collision_costs_ten():
    lm = np.array([[0.9, 0.9], [-0.9, 0.9], [0.9, -0.9]])
    agents = np.array([[0.0, 0.0], [0.05, 0.0], [-0.8, -0.8]])
    no_collision = agents.copy()
    no_collision[1] = [0.0, 0.5]
    cfg = CoopNavConfig()
    d_coll = np.linalg.norm(agents[:, None] - lm[None], axis=-1).min(0).sum()
    assert coopnav_reward(agents, lm, cfg) == pytest.approx(-d_coll - 10.0)
    assert coopnav_reward(no_collision, lm, cfg) > coopnav_reward(agents, lm, cfg)


def test_equal_nearest_distance_gives_minus_l_d():
    lm = np.array([[0.0, 0.0], [0.6, 0.0], [-0.6, 0.0]])
    d = 0.3
    agents = lm + np.array([0.0, d])
    assert coopnav_reward(agents, lm, CoopNavConfig()) == pytest.approx(-3 * d, abs=1e-12)


def test_pp_reward_doubles_per_round():
    cfg = PredatorPreyConfig()
    assert pp_reward(1, 1, cfg) == 20.0
    assert pp_reward(0, 3, cfg) == 0.0
    assert pp_reward(np.array([True, False, True]), 0, cfg) == 20.0


def test_capture_needs_quota():
    prey = np.array([[0.0, 0.0]])
    alive = np.array([True])
    one_close = np.array([[0.05, 0.0], [0.8, 0.8]])
    assert not find_captures(one_close, prey, alive, 0.1, 2).any()
    both_close = np.array([[0.05, 0.0], [-0.05, 0.0]])
    assert find_captures(both_close, prey, alive, 0.1, 2).all()


def test_presets_follow_quota_table():
    assert [predator_prey_preset(n).capture_quota for n in (2, 3, 4)] == [2, 1, 2]


def test_full_clear_respawns_and_doubles():
    cfg = PredatorPreyConfig(n_predators=2, n_preys=4, capture_quota=1, capture_radius=5.0)
    env = PredatorPrey(cfg)
    env.reset(0)
    _, r0, _ = env.step([np.zeros(2)] * 2)
    assert r0 == 4 * 10.0 and env.round == 1 and env.alive.all()
    _, r1, _ = env.step([np.zeros(2)] * 2)
    assert r1 == 4 * 20.0 and env.round == 2


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_prey_count_plus_captured_is_constant(seed):
    env = PredatorPrey(PredatorPreyConfig(capture_radius=0.3))
    rng = np.random.default_rng(seed)
    env.reset(seed)
    captured_this_round = 0
    for _ in range(100):
        round_before = env.round
        _, r, done = env.step([rng.uniform(-1, 1, 2) for _ in range(2)])
        if env.round == round_before:
            captured_this_round = env.n_captured
            assert int(env.alive.sum()) + captured_this_round == 16
        else:
            assert env.alive.sum() == 16
        if done:
            break


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rewards_finite_and_bounded(seed):
    for env in (CooperativeNavigation(), PredatorPrey()):
        rng = np.random.default_rng(seed)
        env.reset(seed)
        done = False
        while not done:
            bound = env.reward_bound()
            _, r, done = env.step([rng.uniform(-1, 1, 2) for _ in range(env.n_agents)])
            assert np.isfinite(r) and abs(r) <= bound


def test_lattice_positions_fixed():
    cfg = PredatorPreyConfig()
    np.testing.assert_array_equal(prey_lattice(cfg), prey_lattice(cfg))
    assert np.abs(prey_lattice(cfg)).max() == pytest.approx(cfg.lattice_half_width)


# -- tabular games -------------------------------------------------------------


def test_discrete_game_rows_must_normalize():
    t = np.full((1, 4, 1), 1.0)
    DiscreteGame(t, np.zeros((1, 4)), (2, 2), 0.9)
    with pytest.raises(ValueError, match="probability"):
        DiscreteGame(t * 0.9, np.zeros((1, 4)), (2, 2), 0.9)


def test_random_game_valid():
    g = random_game(np.random.default_rng(0), 3, (2, 3), 0.9)
    assert g.transition.shape == (3, 6, 3) and g.n_agents == 2
    np.testing.assert_allclose(g.transition.sum(-1), 1.0, atol=1e-12)


def test_unknown_env_rejected():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("multiwalker")
