import json
import math

import numpy as np
import pytest

from vm3ac import diffcore as dc
from vm3ac.envs import make_env
from vm3ac.marl import AlgoConfig, ConfigError, LatentAudit, ReplayBuffer, SoftLearner, Transition, for_env
from vm3ac.marl import losses as L
from vm3ac.marl.execution import DecentralizedExecutor, ObservationBoard, act_exec, evaluate
from vm3ac.marl.learner import MaddpgLearner, make_learner, make_streams
from vm3ac.marl.training import TrainingAborted, check_compatible, load_policies, read_metrics, train


def small_config(algorithm="vm3ac", **kw):
    base = dict(algorithm=algorithm, beta=0.0 if algorithm in ("maac", "maddpg") else 0.1,
                latent_dim=3 if algorithm == "vm3ac" else 0, hidden=(8, 8), batch_size=8,
                buffer_size=200, warmup_steps=20)
    base.update(kw)
    return AlgoConfig(**base)


def filled(learner, n=32, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        obs = [rng.normal(size=d) for d in learner.obs_dims]
        act = [rng.uniform(-1, 1, size=d) for d in learner.act_dims]
        nxt = [rng.normal(size=d) for d in learner.obs_dims]
        learner.store(obs, act, float(rng.normal()), nxt, bool(rng.random() < 0.1))
    return learner


def copy_params(dst, src):
    for a, b in zip(dst.agents, src.agents):
        a.policy.trunk.copy_from(b.policy.trunk)
        for name in ("q1", "q2", "v", "v_target"):
            getattr(a.critics, name).copy_from(getattr(b.critics, name))


# -- buffer and config ---------------------------------------------------------------


def test_buffer_ring_overwrites_oldest():
    buf = ReplayBuffer(3, 1, 1)
    for k in range(5):
        buf.add(Transition([np.array([k])], [np.array([0.0])], float(k), [np.array([k])], False))
    assert len(buf) == 3
    assert sorted(buf.r.tolist()) == [2.0, 3.0, 4.0]


def test_buffer_rejects_non_finite_and_empty_sample():
    buf = ReplayBuffer(3, 1, 1)
    with pytest.raises(ValueError, match="empty"):
        buf.sample(np.random.default_rng(0), 2)
    with pytest.raises(ValueError, match="non-finite"):
        buf.add(Transition([np.array([np.nan])], [np.zeros(1)], 0.0, [np.zeros(1)], False))


def test_truncation_is_not_termination():
    buf = ReplayBuffer(2, 1, 1)
    buf.add(Transition([np.zeros(1)], [np.zeros(1)], 0.0, [np.zeros(1)], False, truncated=True))
    assert buf.sample(np.random.default_rng(0), 1).done[0] == 0.0


@pytest.mark.parametrize("kw,field", [
    ({"algorithm": "maac", "beta": 0.1, "latent_dim": 0}, "beta"),
    ({"algorithm": "masac", "latent_dim": 8}, "latent_dim"),
    ({"mc_samples": 2}, "mc_samples"),
    ({"tau": 1.5}, "tau"),
    ({"algorithm": "ppo"}, "algorithm"),
])
def test_config_errors_name_the_field(kw, field):
    with pytest.raises(ConfigError, match=field):
        AlgoConfig(**kw).validate()


def test_for_env_defaults():
    assert (for_env("coopnav", 3).beta, for_env("coopnav", 3).latent_dim) == (0.1, 8)
    assert for_env("predprey", 3, "vm3ac").latent_dim == 2
    assert for_env("coopnav", 3, "maddpg").beta == 0.0
    with pytest.raises(ConfigError, match="unknown"):
        AlgoConfig.from_dict({"alpha": 1})


def test_streams_are_independent_and_reproducible():
    a, b = make_streams(4), make_streams(4)
    draws = {k: a[k].random() for k in a}
    assert draws == {k: b[k].random() for k in b}
    assert len(set(draws.values())) == len(draws)


# -- shared latent -------------------------------------------------------------------


def test_act_train_shares_one_latent():
    learner = SoftLearner(small_config(), [4] * 3, [2] * 3, seed=0)
    seen = []
    for agent in learner.agents:
        orig = agent.policy.sample_numpy
        agent.policy.sample_numpy = lambda o, z, e, orig=orig: (seen.append(z), orig(o, z, e))[1]
    learner.act_train([np.zeros(4)] * 3)
    assert seen[0] is seen[1] is seen[2]
    assert learner.audit.summary() == {"draws": 1, "violations": 0}


def test_audit_flags_each_kind_of_misuse():
    audit = LatentAudit(2)
    z = np.zeros(2)
    audit.draw("k", z)
    audit.hand_out("k", 0, z)
    audit.hand_out("k", 1, z.copy())
    audit.close("k")
    assert "different latent" in audit.violations[0]
    audit.draw("k", z)
    audit.hand_out("k", 0, z)
    audit.close("k")
    assert any("twice" in v for v in audit.violations)
    assert any("expected each agent once" in v for v in audit.violations)
    audit.hand_out("missing", 0, z)
    assert any("outside a draw" in v for v in audit.violations)


def test_update_draws_one_latent_per_batch():
    learner = filled(SoftLearner(small_config(), [4] * 3, [2] * 3, seed=0))
    for _ in range(3):
        learner.update()
    assert learner.audit.summary() == {"draws": 3, "violations": 0}


def test_act_train_is_deterministic():
    runs = []
    for _ in range(2):
        learner = SoftLearner(small_config(), [4] * 3, [2] * 3, seed=5)
        runs.append(np.concatenate([np.concatenate(learner.act_train([np.ones(4)] * 3)) for _ in range(5)]))
    assert runs[0].tobytes() == runs[1].tobytes()


# -- value target oracle ---------------------------------------------------------------


def test_value_target_scalar_oracle():
    # constant-output networks: every quantity reduces to a hand formula
    cfg = small_config(latent_dim=1, beta=0.3, var_coef=1.0)
    learner = SoftLearner(cfg, [1, 1], [1, 1], seed=0)
    mus, lss, c1, c2, m0 = [0.2, -0.4], [-0.5, 0.1], 1.3, 0.7, 0.25
    for k, agent in enumerate(learner.agents):
        for net in (agent.policy.trunk, agent.critics.q1, agent.critics.q2, agent.predictor.trunk):
            for p in net.params:
                p.data[...] = 0.0
        agent.policy.trunk.params[-1].data[...] = [mus[k], lss[k]]
        agent.critics.q1.params[-1].data[...] = c1
        agent.critics.q2.params[-1].data[...] = c2
        agent.predictor.trunk.params[-1].data[...] = m0
    from vm3ac.marl.buffer import Batch
    batch = Batch(np.array([[0.5, -0.5]]), np.zeros((1, 2)), np.zeros(1), np.zeros((1, 2)), np.zeros(1))
    eps = [0.6, -1.1]
    noise = L.Noise(np.array([[0.9]]), [np.array([[e]]) for e in eps])
    v_hat = L.value_target(learner, batch, 0, noise)[0]

    a = [math.tanh(m + math.exp(s) * e) for m, s, e in zip(mus, lss, eps)]
    lp0 = -0.5 * eps[0] ** 2 - lss[0] - 0.5 * math.log(2 * math.pi) - math.log(1 + 1e-6 - a[0] ** 2)
    var0 = -math.log(2 * math.pi) - 0.5 * (a[0] - m0) ** 2 - 0.5 * (a[1] - m0) ** 2
    expected = min(c1, c2) - 0.3 * lp0 + 0.3 / 2 * var0
    assert abs(v_hat - expected) < 1e-10


# -- reduction lattice -----------------------------------------------------------------


def paired(a_cfg, b_cfg, seed=3):
    a = filled(SoftLearner(a_cfg, [4] * 3, [2] * 3, seed=seed))
    b = filled(SoftLearner(b_cfg, [4] * 3, [2] * 3, seed=seed))
    copy_params(b, a)
    batch = a.sample_batch()
    noise = a.draw_noise(len(batch))
    return a, b, batch, noise


def test_zero_variational_coefficient_reduces_to_masac():
    a, b, batch, noise = paired(small_config("vm3ac", latent_dim=0, var_coef=0.0), small_config("masac"))
    for i in range(3):
        for la, lb in zip(L.losses(a, batch, i, noise), L.losses(b, batch, i, noise)):
            assert abs(la.item() - lb.item()) < 1e-10
    ma, mb = a.update(batch, noise), b.update(batch, noise)
    for k in ("loss_v", "loss_q", "loss_pi"):
        assert abs(ma[k] - mb[k]) < 1e-10
    for pa, pb in zip(a.agents[0].policy.params, b.agents[0].policy.params):
        np.testing.assert_allclose(pa.data, pb.data, atol=1e-10)


def test_zero_temperature_reduces_masac_to_maac():
    a, b, batch, noise = paired(small_config("masac", beta=0.0), small_config("maac"))
    for i in range(3):
        for la, lb in zip(L.losses(a, batch, i, noise), L.losses(b, batch, i, noise)):
            assert abs(la.item() - lb.item()) < 1e-10


def test_isac_critic_sees_only_own_data():
    learner = SoftLearner(small_config("isac"), [4] * 3, [2] * 3)
    assert learner.agents[0].critics.q1.spec.input_dim == 6
    assert learner.agents[0].critics.v.spec.input_dim == 4


def test_empty_batch_rejected():
    learner = filled(SoftLearner(small_config(), [4] * 3, [2] * 3))
    batch = learner.sample_batch()
    empty = type(batch)(batch.x[:0], batch.a[:0], batch.r[:0], batch.x_next[:0], batch.done[:0])
    with pytest.raises(ValueError, match="empty"):
        L.losses(learner, empty, 0, learner.draw_noise(0))


# -- updates ---------------------------------------------------------------------


def test_update_is_noop_before_a_full_batch():
    learner = SoftLearner(small_config(), [4] * 3, [2] * 3)
    assert learner.update() is None and learner.updates == 0


@pytest.mark.parametrize("algorithm", ["vm3ac", "masac", "isac", "maac", "maddpg"])
def test_update_is_bit_reproducible(algorithm):
    runs = []
    for _ in range(2):
        learner = filled(make_learner(small_config(algorithm), [4] * 3, [2] * 3, seed=9))
        for _ in range(3):
            learner.update()
        runs.append({k: v.data.tobytes() for k, v in learner.named_params().items()})
    assert runs[0] == runs[1]


@pytest.mark.parametrize("tau", [0.0, 1.0])
def test_target_tracking_extremes(tau):
    learner = filled(SoftLearner(small_config(tau=tau), [4] * 3, [2] * 3))
    before = [p.data.copy() for p in learner.agents[0].critics.v_target.params]
    learner.update()
    c = learner.agents[0].critics
    for old, tgt, v in zip(before, c.v_target.params, c.v.params):
        np.testing.assert_array_equal(tgt.data, old if tau == 0.0 else v.data)


def test_update_changes_every_trained_net():
    learner = filled(SoftLearner(small_config(), [4] * 3, [2] * 3))
    before = {k: v.data.copy() for k, v in learner.named_params().items()}
    learner.update()
    after = learner.named_params()
    for k in before:
        if k.endswith(".w0"):
            assert not np.array_equal(before[k], after[k].data), k


def test_maddpg_noise_anneals():
    learner = MaddpgLearner(small_config("maddpg"), [4] * 2, [2] * 2)
    stds = []
    for p in (0.0, 0.5, 1.0):
        learner.progress = p
        stds.append(learner.noise_std())
    assert stds == pytest.approx([0.1, 0.055, 0.01])


def test_heterogeneous_agents_need_no_predictor_for_baselines():
    SoftLearner(small_config("masac"), [4, 5], [2, 2])
    with pytest.raises(ValueError, match="homogeneous"):
        SoftLearner(small_config("vm3ac"), [4, 5], [2, 2])


# -- decentralized execution -------------------------------------------------------------


def policies(latent=3, seed=0):
    return SoftLearner(small_config(latent_dim=latent), [4] * 3, [2] * 3, seed=seed).policies()


def test_seeded_mode_reproduces_one_stream_per_agent():
    ex = DecentralizedExecutor(policies(), mode="seeded", latent_seed=11, keep_history=True)
    obs = [np.zeros(4)] * 3
    for _ in range(1000):
        ex.act(obs)
    hist = [np.array(a.z_history) for a in ex.agents]
    assert hist[0].shape == (1000, 3)
    assert hist[0].tobytes() == hist[1].tobytes() == hist[2].tobytes()
    np.testing.assert_array_equal(hist[0], np.random.default_rng(11).standard_normal((1000, 3)))


def test_zero_mode_feeds_zero_latent():
    ex = DecentralizedExecutor(policies(), mode="zero", keep_history=True)
    ex.act([np.ones(4)] * 3)
    assert all(np.all(a.z_history[0] == 0) for a in ex.agents)
    pols = policies()
    np.testing.assert_array_equal(act_exec(pols, [np.ones(4)] * 3)[1],
                                  pols[1].mean_action_numpy(np.ones(4), np.zeros(3)))


def test_unknown_mode_rejected():
    with pytest.raises(ValueError, match="mode"):
        DecentralizedExecutor(policies(), mode="shared")


def test_board_counts_cross_reads():
    board = ObservationBoard([np.zeros(2), np.ones(2)])
    board.read(0, 0)
    board.read(0, 1)
    assert board.cross_reads == 1 and len(board.reads) == 2


def test_evaluation_reports_zero_cross_reads():
    env = make_env("coopnav", {"horizon": 10})
    pols = SoftLearner(small_config(), env.obs_dims, env.action_dims).policies()
    res = evaluate(pols, env, [1, 2], mode="seeded", latent_seed=3)
    assert res["cross_agent_reads"] == 0 and res["reads"] == 2 * 10 * 3
    assert res == evaluate(pols, env, [1, 2], mode="seeded", latent_seed=3)


# -- training loop -----------------------------------------------------------------


def test_zero_steps_writes_header_only(tmp_path):
    res = train(small_config(), "coopnav", seed=1, total_steps=0, out_dir=tmp_path)
    header, records = read_metrics(res.metrics_path)
    assert header["format"] == "vm3ac-metrics/1" and records == []
    assert res.checkpoint.exists()


def test_short_run_records_and_checkpoint(tmp_path):
    cfg = small_config(warmup_steps=20)
    res = train(cfg, "coopnav", {"horizon": 10}, seed=2, total_steps=60, eval_interval=30,
                eval_episodes=2, out_dir=tmp_path)
    assert [r["step"] for r in res.records] == [0, 30, 60]
    assert res.records[0]["losses"]["loss_q"] is None
    assert res.records[-1]["latent_violations"] == 0
    assert res.records[-1]["latent_draws"] == 60 + res.learner.updates
    assert all(r["cross_agent_reads"] == 0 for r in res.records)
    pols, meta = load_policies(res.checkpoint)
    o = np.ones(pols[0].obs_dim)
    np.testing.assert_array_equal(pols[0].mean_action_numpy(o, np.zeros(3)),
                                  res.learner.agents[0].policy.mean_action_numpy(o, np.zeros(3)))
    with pytest.raises(dc.ShapeError, match="environment"):
        check_compatible(pols, make_env("predprey"))


def test_identical_runs_write_identical_metrics(tmp_path):
    for d in ("a", "b"):
        train(small_config(), "coopnav", {"horizon": 10}, seed=4, total_steps=50, eval_interval=25,
              eval_episodes=2, out_dir=tmp_path / d)
    assert (tmp_path / "a/metrics_seed4.jsonl").read_bytes() == (tmp_path / "b/metrics_seed4.jsonl").read_bytes()


def test_non_finite_loss_aborts_with_dump(tmp_path, monkeypatch):
    def bad_update(self, batch=None, noise=None):
        return {"loss_v": float("nan"), "loss_q": 0.0, "loss_pi": 0.0, "entropy": 0.0, "mi_proxy": 0.0}

    monkeypatch.setattr(SoftLearner, "update", bad_update)
    with pytest.raises(TrainingAborted) as info:
        train(small_config(warmup_steps=5), "coopnav", seed=0, total_steps=20, out_dir=tmp_path)
    dump = json.loads(info.value.dump_path.read_text())
    assert dump["step"] == 6 and "agent0.policy.w0" in dump["params"]


def test_non_finite_op_aborts(tmp_path, monkeypatch):
    def bad_update(self, batch=None, noise=None):
        raise dc.NonFiniteError("exp overflow")

    monkeypatch.setattr(SoftLearner, "update", bad_update)
    with pytest.raises(TrainingAborted, match="exp overflow"):
        train(small_config(warmup_steps=5), "coopnav", seed=0, total_steps=20, out_dir=tmp_path)
    assert (tmp_path / "abort_seed0.json").exists()
