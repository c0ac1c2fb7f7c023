import copy
import math

import numpy as np
import pytest

from reference_rl import ReferenceSAC, ReferenceTD3
from vmfer.agents import Agent, AgentConfig
from vmfer.envs import PendulumEnv, ToyLandscape, DoubleIntegratorEnv
from vmfer.errors import ConfigurationError
from vmfer.replay import ReplayBuffer

HID = (16, 16)


def make_agent(env=None, seed=0, **kw):
    env = env or PendulumEnv(seed=seed)
    defaults = dict(hidden=HID, batch_size=32, warmup_steps=20, buffer_capacity=2000)
    defaults.update(kw)
    return Agent(AgentConfig(**defaults), env.obs_dim, env.act_dim, env.action_high, seed=seed), env


def run(agent, env, steps, start=0):
    recs = []
    for t in range(start, start + steps):
        recs.append(agent.train_step(env, t))
    return recs


# ------------------------------------------------------------------ config
def test_config_validation():
    with pytest.raises(ConfigurationError):
        AgentConfig(eval_ensemble=3, uncertainty_ensemble=2)
    with pytest.raises(ConfigurationError):
        AgentConfig(eval_ensemble=1, uncertainty_ensemble=1)
    with pytest.raises(ConfigurationError):
        AgentConfig(tau=0.0)
    with pytest.raises(ConfigurationError):
        AgentConfig(algorithm="DDPG")
    assert AgentConfig().policy_delay == 2 and AgentConfig(algorithm="SAC").policy_delay == 1
    assert AgentConfig(algorithm="SAC").actor_lr == 3e-4 and AgentConfig().actor_lr == 1e-3
    cfg = AgentConfig(resampling="per_rank")
    assert cfg.per


def test_config_roundtrip():
    cfg = AgentConfig(algorithm="SAC", resampling="vmfer_rank", hidden=(8, 8), uncertainty_ensemble=4)
    assert AgentConfig.from_dict(cfg.to_dict()) == cfg


# --------------------------------------------------------------------- act
def test_act_deterministic():
    agent, env = make_agent()
    s = env.reset()
    np.testing.assert_array_equal(agent.act(s), agent.act(s))


def test_act_zero_sigma_matches_greedy():
    agent, env = make_agent(exploration_sigma=0.0)
    s = env.reset()
    np.testing.assert_array_equal(agent.act(s, explore=True), agent.act(s, explore=False))


@pytest.mark.parametrize("algo", ["TD3", "SAC"])
def test_act_within_bounds(algo):
    agent, env = make_agent(algorithm=algo, exploration_sigma=5.0)
    rng = np.random.default_rng(0)
    states = rng.normal(scale=10, size=(500, 3))
    for explore in (True, False):
        a = agent.act(states, explore=explore)
        assert np.all(np.abs(a) <= 2.0)


def test_act_dimension_mismatch():
    agent, _ = make_agent()
    with pytest.raises(ValueError):
        agent.act(np.zeros(4))


# ------------------------------------------------------------- critic update
def test_terminal_and_zero_discount_targets():
    agent, env = make_agent()
    run(agent, env, 30)
    batch = agent.buffer.sample_uniform(16, 0)
    batch.dones[:] = True
    np.testing.assert_array_equal(agent.td_target(batch), batch.rewards)
    agent.config.gamma = 0.0
    batch.dones[:] = False
    np.testing.assert_array_equal(agent.td_target(batch), batch.rewards)


def test_duplicate_critics_min_equals_either():
    agent, env = make_agent()
    run(agent, env, 5)
    ens = agent.ensemble
    ens.critics[1].set_flat(ens.critics[0].get_flat())
    ens.targets[1].set_flat(ens.targets[0].get_flat())
    batch = agent.buffer.sample_uniform(8, 0)
    q = ens.q_values(batch.next_states, batch.actions, target=True)
    np.testing.assert_array_equal(q.min(axis=0), q[0])
    np.testing.assert_array_equal(q.min(axis=0), q[1])


def test_critic_update_empty_batch():
    agent, env = make_agent()
    run(agent, env, 5)
    with pytest.raises(ValueError):
        agent.critic_update(agent.buffer.batch(np.zeros(0, dtype=int)))


# -------------------------------------------------------------- actor update
@pytest.mark.parametrize("mode", ["vmfer_uncertainty", "vmfer_rank"])
def test_at_most_b_factors_change(mode):
    agent, env = make_agent(resampling=mode, uncertainty_ensemble=3)
    run(agent, env, 60)
    before = agent.buffer.factors.copy()
    info = agent.actor_update_vmfer(16)
    changed = np.flatnonzero(agent.buffer.factors != before)
    assert len(changed) <= 16
    assert set(changed) <= set(info["indices"].tolist())


@pytest.mark.parametrize("algo", ["TD3", "SAC"])
def test_identical_critics_give_factor_e(algo):
    agent, env = make_agent(algorithm=algo, resampling="vmfer_uncertainty", uncertainty_ensemble=3)
    run(agent, env, 40)
    ens = agent.ensemble
    for i in (1, 2):
        ens.critics[i].set_flat(ens.critics[0].get_flat())
    info = agent.actor_update_vmfer(32)
    np.testing.assert_allclose(agent.buffer.factors[info["indices"]], math.e, rtol=1e-15)


def test_actor_needs_two_critics():
    agent, env = make_agent(resampling="vmfer_uncertainty")
    run(agent, env, 30)
    agent.ensemble.critics = agent.ensemble.critics[:1]
    with pytest.raises(ConfigurationError):
        agent.actor_update_vmfer()


def test_sac_index_selection_rule():
    agent, env = make_agent(algorithm="SAC", resampling="vmfer_uncertainty", uncertainty_ensemble=4)
    run(agent, env, 40)
    for _ in range(5):
        info = agent.actor_update_vmfer(32)
        q, e = info["q_values"], info["critic_index"]
        cols = np.arange(q.shape[1])
        np.testing.assert_array_equal(q[e, cols], q[:2].min(axis=0))


def test_td3_index_is_first_critic():
    agent, env = make_agent(resampling="vmfer_rank", uncertainty_ensemble=3)
    run(agent, env, 40)
    info = agent.actor_update_vmfer(32)
    assert np.all(info["critic_index"] == 0)


def test_uniform_mode_leaves_factors_alone():
    agent, env = make_agent(uncertainty_ensemble=3)
    run(agent, env, 100)
    np.testing.assert_array_equal(agent.buffer.factors[:len(agent.buffer)], 1.0)


def test_ema_factor_mode():
    agent, env = make_agent(resampling="vmfer_uncertainty", factor_update="ema")
    run(agent, env, 40)
    before = agent.buffer.factors.copy()
    info = agent.actor_update_vmfer(8)
    idx = np.unique(info["indices"])
    assert np.all(agent.buffer.factors[idx] > 0)
    # EMA moves at most 10% of the way from the previous value towards [1/e, e]
    assert np.all(np.abs(agent.buffer.factors[idx] - before[idx]) <= 0.1 * (math.e - 1 / math.e) + 1e-12)


# ---------------------------------------------------------- temperature
def test_temperature_fixed_point():
    agent, _ = make_agent(algorithm="SAC")
    a0 = agent.alpha
    assert agent.sac_temperature_update(np.full(10, -agent.target_entropy)) == a0


def test_temperature_rises_when_entropy_low():
    agent, _ = make_agent(algorithm="SAC")
    a0 = agent.alpha
    # entropy -logpi = -5 is below the target -1
    assert agent.sac_temperature_update(np.full(10, 5.0)) > a0
    agent2, _ = make_agent(algorithm="SAC")
    assert agent2.sac_temperature_update(np.full(10, -5.0)) < a0


def test_temperature_gradient_sign_by_finite_difference():
    logpi = np.array([0.3, 1.2, -0.4])
    H = -1.0

    def J(log_alpha):
        return -np.mean(math.exp(log_alpha) * (logpi + H))

    la, h = math.log(0.2), 1e-6
    fd = (J(la + h) - J(la - h)) / (2 * h)
    # the step on log alpha follows -dJ/dlog(alpha)
    agent, _ = make_agent(algorithm="SAC")
    before = agent.log_alpha[0]
    agent.sac_temperature_update(logpi)
    assert np.sign(agent.log_alpha[0] - before) == -np.sign(fd)


def test_temperature_stays_positive():
    agent, _ = make_agent(algorithm="SAC")
    rng = np.random.default_rng(0)
    for _ in range(100_000):
        agent.sac_temperature_update(rng.normal(-50, 30, size=2))
    assert agent.alpha > 0.0 and np.isfinite(agent.alpha)


def test_temperature_td3_error():
    agent, _ = make_agent()
    with pytest.raises(ConfigurationError):
        agent.sac_temperature_update(np.zeros(3))


# ------------------------------------------------------------- train_step
def test_policy_delay_two():
    agent, env = make_agent(policy_delay=2)
    recs = run(agent, env, 40)
    learn = [r["actor_updated"] for r in recs if r["critic_updates"]]
    assert learn == [0, 1] * 10


def test_utd_three():
    agent, env = make_agent(utd_ratio=3)
    run(agent, env, 20)
    before = agent.critic_updates
    rec = agent.train_step(env, 20)
    assert rec["critic_updates"] == 3 and agent.critic_updates - before == 3


@pytest.mark.parametrize("algo,mode", [("TD3", "vmfer_uncertainty"), ("SAC", "vmfer_rank"), ("TD3", "per_rank")])
def test_metrics_finite(algo, mode):
    agent, env = make_agent(algorithm=algo, resampling=mode, uncertainty_ensemble=3)
    for rec in run(agent, env, 80):
        assert all(math.isfinite(v) for v in rec.values())


def test_polyak_exact_after_update():
    agent, env = make_agent(policy_delay=1)
    run(agent, env, 25)
    tgt = [t.get_flat().copy() for t in agent.ensemble.targets]
    at = agent.actor_target.get_flat().copy()
    agent.update()
    tau = agent.config.tau
    for prev, t, c in zip(tgt, agent.ensemble.targets, agent.ensemble.critics):
        np.testing.assert_array_equal(t.get_flat(), tau * c.get_flat() + (1 - tau) * prev)
    np.testing.assert_array_equal(agent.actor_target.get_flat(), tau * agent.actor.get_flat() + (1 - tau) * at)


# ------------------------------------------------------- baseline reduction
@pytest.mark.parametrize("algo", ["TD3", "SAC"])
def test_uniform_mode_matches_reference_bitwise(algo):
    env_a, env_b = PendulumEnv(seed=5), PendulumEnv(seed=5)
    agent, _ = make_agent(env_a, seed=3, algorithm=algo)
    Ref = ReferenceTD3 if algo == "TD3" else ReferenceSAC
    kw = dict(batch=32, warmup=20)
    ref = Ref(3, 1, 2.0, 3, HID, **kw)
    for t in range(100):
        agent.train_step(env_a, t)
        ref.step(env_b, t)
    assert agent.actor.get_flat().tobytes() == ref.actor.get_flat().tobytes()
    for mine, theirs in zip(agent.ensemble.critics, ref.q):
        assert mine.get_flat().tobytes() == theirs.get_flat().tobytes()
    if algo == "SAC":
        assert agent.log_alpha[0] == ref.log_alpha[0]


# ---------------------------------------------------- decoupled ensemble
def _targets_trace(n, mode, steps):
    agent, env = make_agent(seed=4, resampling=mode, uncertainty_ensemble=n)
    ys = []
    for t in range(steps):
        agent.train_step(env, t)
        if agent.last_td_target is not None:
            ys.append(agent.last_td_target.copy())
    return agent, ys


def test_extra_critics_never_change_td_target_uniform():
    a2, y2 = _targets_trace(2, "uniform", 80)
    a5, y5 = _targets_trace(5, "uniform", 80)
    assert len(y2) == len(y5) > 0
    for u, v in zip(y2, y5):
        np.testing.assert_array_equal(u, v)
    np.testing.assert_array_equal(a2.actor.get_flat(), a5.actor.get_flat())


def test_extra_critics_only_change_factors_vmfer():
    a2, y2 = _targets_trace(2, "vmfer_uncertainty", 21)
    a5, y5 = _targets_trace(5, "vmfer_uncertainty", 21)
    # the first TD target precedes any actor update and must agree exactly
    np.testing.assert_array_equal(y2[0], y5[0])
    for i in range(2):
        np.testing.assert_array_equal(a2.ensemble.critics[i].get_flat(), a5.ensemble.critics[i].get_flat())
    # fixed RNG, same transitions: only the factor values differ
    a2.actor_update_vmfer(32)
    a5.actor_update_vmfer(32)
    np.testing.assert_array_equal(a2.buffer.states, a5.buffer.states)
    assert not np.array_equal(a2.buffer.factors, a5.buffer.factors)


# ---------------------------------------------------------- checkpointing
@pytest.mark.parametrize("algo,mode", [("TD3", "vmfer_rank"), ("SAC", "vmfer_uncertainty")])
def test_checkpoint_bit_exact_resume(tmp_path, algo, mode):
    agent, env = make_agent(algorithm=algo, resampling=mode, uncertainty_ensemble=3, per=True)
    run(agent, env, 60)
    agent.save(tmp_path / "ckpt")
    env_copy = copy.deepcopy(env)
    restored = Agent.load(tmp_path / "ckpt")
    run(agent, env, 40, start=60)
    run(restored, env_copy, 40, start=60)
    assert restored.actor.get_flat().tobytes() == agent.actor.get_flat().tobytes()
    for a, b in zip(restored.ensemble.targets, agent.ensemble.targets):
        assert a.get_flat().tobytes() == b.get_flat().tobytes()
    np.testing.assert_array_equal(restored.buffer.factors, agent.buffer.factors)
    assert restored.alpha == agent.alpha


# --------------------------------------- selected-batch concentration (toy)
def _toy_buffer_angle(mode, seed, iters=200, b=64):
    """Mean g1/g2 angle of actor batches drawn from a buffer of toy transitions."""
    rng = np.random.default_rng(seed)
    land = ToyLandscape(rng=rng)
    buf = ReplayBuffer(4096, 2, 2)
    for a in rng.normal([0.5, 0.5], 1.0, size=(4096, 2)):
        buf.insert([-0.5, -0.5], a, 0.0, [-0.5, -0.5], True)
    angles = []
    for _ in range(iters):
        batch = buf.sample_uniform(b, rng) if mode == "uniform" else buf.resample_vmfer(b, mode, rng)
        g1, g2 = land.gradients(batch.actions)
        grads = -np.stack([g1, g2])  # gradients of l_i = -Q_i
        c = np.einsum("ij,ij->i", g1, g2) / (np.linalg.norm(g1, axis=1) * np.linalg.norm(g2, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(c, -1, 1))).mean())
        if mode != "uniform":
            buf.update_factors(batch.indices, grads, 0)
    return float(np.mean(angles[iters // 2:]))


def test_selected_batch_concentration_on_toy():
    uni = np.mean([_toy_buffer_angle("uniform", s) for s in range(5)])
    unc = np.mean([_toy_buffer_angle("vmfer_uncertainty", s) for s in range(5)])
    assert unc < uni
