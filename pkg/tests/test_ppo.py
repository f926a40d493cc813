import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constraint_aware import geom, ppo, world
from constraint_aware.nn import Adam, MlpSpec, PolicyNet
from constraint_aware.ppo import NoiseConfig, RolloutBuffer, TrainConfig

QUIET = NoiseConfig(0.0, 0.0)


def quiet_cfg(**kw):
    return TrainConfig(noise=QUIET, **kw).validate()


# -- environment -------------------------------------------------------------


def test_reset_zero_offset_takes_dead_zone_path():
    env, s0 = ppo.reset_training_env(np.random.default_rng(0), quiet_cfg(), offset_deg=0.0)
    assert np.allclose(env.d, env.joint.axis)
    assert np.array_equal(s0[:3], np.zeros(3))
    assert np.allclose(s0[3:], env.joint.axis)


def test_reset_offset_30():
    env, s0 = ppo.reset_training_env(np.random.default_rng(1), quiet_cfg(), offset_deg=30.0)
    assert math.degrees(geom.angle_between(env.d, env.joint.axis)) == pytest.approx(30.0, abs=1e-9)
    assert np.linalg.norm(s0[:3]) == pytest.approx(1.0, abs=1e-6)


def ks_uniform(samples, lo, hi):
    x = np.sort((np.asarray(samples) - lo) / (hi - lo))
    n = len(x)
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(0, n) / n
    return max(np.max(ecdf_hi - x), np.max(x - ecdf_lo))


def test_reset_offsets_uniform():
    cfg = quiet_cfg()
    rng = np.random.default_rng(2)
    offsets = []
    z = np.array([0, 0, 1.0])
    for _ in range(1000):
        env, _ = ppo.reset_training_env(rng, cfg)
        offsets.append(math.degrees(geom.signed_angle(env.joint.axis, env.d, z)))
    assert max(map(abs, offsets)) <= 45.0
    # 1% critical value of the one-sample KS statistic
    assert ks_uniform(offsets, -45, 45) < 1.63 / math.sqrt(1000)


def test_batch_reset_offsets_uniform():
    env = ppo.BatchEnv(1000, quiet_cfg(), np.random.default_rng(3))
    env.reset()
    z = np.array([0, 0, 1.0])
    offsets = [math.degrees(geom.signed_angle(a, d, z)) for a, d in zip(env.axis, env.d)]
    assert ks_uniform(offsets, -45, 45) < 1.63 / math.sqrt(1000)


def test_env_step_examples():
    cfg = quiet_cfg()
    env, _ = ppo.reset_training_env(np.random.default_rng(4), cfg, offset_deg=0.0)
    _, r, done = ppo.env_step(env, np.zeros(3))
    assert r == 0.0 and not done
    env, _ = ppo.reset_training_env(np.random.default_rng(4), cfg, offset_deg=30.0)
    _, r, _ = ppo.env_step(env, np.zeros(3))
    assert r == pytest.approx(-1000 * 0.01 * math.sin(math.radians(30)), abs=1e-12)


def test_env_episode_length_and_reward_sign():
    cfg = quiet_cfg()
    env, _ = ppo.reset_training_env(np.random.default_rng(5), cfg)
    rng = np.random.default_rng(6)
    for t in range(cfg.episode_len):
        _, r, done = ppo.env_step(env, np.tanh(rng.normal(size=3)))
        assert r <= 0.0
        assert done == (t == cfg.episode_len - 1)


@given(st.floats(1.0, 80.0), st.floats(0.05, 0.95))
def test_reward_improves_when_rotating_toward_axis(offset, frac):
    cfg = quiet_cfg()
    rng = np.random.default_rng(0)
    env_a, _ = ppo.reset_training_env(rng, cfg, offset_deg=offset, heading=0.3)
    env_b, _ = ppo.reset_training_env(rng, cfg, offset_deg=offset, heading=0.3)
    _, r_stay, _ = ppo.env_step(env_a, np.zeros(3))
    z = np.array([0, 0, 1.0])
    target = geom.rotate_about(env_b.d, z, -math.radians(offset) * frac)
    _, r_turn, _ = ppo.env_step(env_b, target - env_b.d)
    assert r_turn > r_stay


def test_batch_env_matches_world_step():
    cfg = quiet_cfg()
    env = ppo.BatchEnv(50, cfg, np.random.default_rng(7))
    env.reset()
    rng = np.random.default_rng(8)
    for _ in range(3):
        d_before = env.d.copy()
        acts = np.tanh(rng.normal(size=(50, 3)))
        _, reward, _ = env.step(acts)
        for i in range(50):
            joint = world.JointConstraint.prismatic(env.axis[i])
            d = geom.update_direction(d_before[i], acts[i])
            out = world.step(joint, world.initial_state(joint, np.zeros(3)), d, cfg.step_len, cfg.stiffness)
            assert np.allclose(out.constraint_force, env.force[i], atol=1e-12)
            assert reward[i] == pytest.approx(-geom.norm(out.constraint_force), abs=1e-12)


@given(st.floats(1e-3, 1e3), st.tuples(*[st.floats(-10, 10)] * 3), st.tuples(*[st.floats(-1, 1)] * 3))
def test_observation_scale_invariant(c, f, d):
    f = np.array(f)
    if geom.norm(f) < 1e-3:
        return
    d = np.array(d)
    assert np.array_equal(ppo.observe(f, d, 0.0), ppo.observe(c * f, d, 0.0))


# -- GAE ----------------------------------------------------------------------


def buffer(rewards, values, dones):
    n = len(rewards)
    return RolloutBuffer(np.zeros((n, 6)), np.zeros((n, 3)), np.zeros(n), np.asarray(rewards, float),
                         np.asarray(values, float), np.asarray(dones, bool))


def test_gae_lambda_one_gamma_one_is_return_minus_value():
    r, v = [1.0, -2.0, 0.5, 3.0], [0.3, 0.1, -0.4, 2.0]
    buf = ppo.compute_gae(buffer(r, v, [0, 0, 0, 1]), 1.0, 1.0, normalize=False)
    ret = np.cumsum(r[::-1])[::-1]
    assert np.allclose(buf.advantages, ret - np.array(v), atol=1e-12)
    assert np.allclose(buf.returns, ret, atol=1e-12)


def test_gae_lambda_zero_is_td_error():
    r, v = [1.0, -2.0, 0.5, 3.0], [0.3, 0.1, -0.4, 2.0]
    g = 0.9
    buf = ppo.compute_gae(buffer(r, v, [0, 0, 0, 1]), g, 0.0, normalize=False)
    nxt = v[1:] + [0.0]
    assert np.allclose(buf.advantages, np.array(r) + g * np.array(nxt) - np.array(v), atol=1e-12)


def brute_gae(r, v, gamma, lam):
    n = len(r)
    delta = [r[t] + gamma * (v[t + 1] if t + 1 < n else 0.0) - v[t] for t in range(n)]
    return [sum((gamma * lam) ** (k - t) * delta[k] for k in range(t, n)) for t in range(n)]


def test_gae_matches_brute_force_on_random_episodes():
    rng = np.random.default_rng(9)
    for _ in range(50):
        n_ep = rng.integers(1, 5)
        r = rng.normal(size=5 * n_ep)
        v = rng.normal(size=5 * n_ep)
        dones = np.tile([0, 0, 0, 0, 1], n_ep)
        gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
        buf = ppo.compute_gae(buffer(r, v, dones), gamma, lam, normalize=False)
        want = np.concatenate([brute_gae(r[i:i + 5], v[i:i + 5], gamma, lam) for i in range(0, len(r), 5)])
        assert np.max(np.abs(buf.advantages - want)) < 1e-12


def test_gae_normalization():
    rng = np.random.default_rng(10)
    buf = ppo.compute_gae(buffer(rng.normal(size=20), rng.normal(size=20), np.tile([0, 0, 0, 0, 1], 4)), 0.99, 0.95)
    assert abs(buf.advantages.mean()) < 1e-12
    assert buf.advantages.std() == pytest.approx(1.0, abs=1e-6)


# -- PPO update ---------------------------------------------------------------


def small_setup(n=8, seed=0):
    net = PolicyNet(MlpSpec(6, (16, 16), 3))
    rng = np.random.default_rng(seed)
    params = net.init_params(rng)
    states = rng.normal(size=(n, 6))
    fwd = net.forward(params, states)
    u = fwd.mean + np.exp(fwd.log_std) * rng.normal(size=fwd.mean.shape)
    lp = ppo.gaussian_log_prob(u, fwd.mean, fwd.log_std)
    buf = RolloutBuffer(states, u, lp, rng.normal(size=n), fwd.value.copy(), np.tile([0, 0, 0, 1], n // 4).astype(bool))
    return net, params, buf


def test_zero_advantage_leaves_policy_unchanged():
    net, params, buf = small_setup()
    buf.advantages = np.zeros(len(buf))
    buf.returns = buf.values + 1.0
    cfg = TrainConfig(minibatch_size=4, epochs_per_batch=3, entropy_coef=0.0)
    new, _ = ppo.ppo_update(net, params.copy(), buf, cfg, Adam(net.n_params, 1e-3), np.random.default_rng(0))
    mask = net.policy_mask()
    assert np.array_equal(new[mask], params[mask])
    assert not np.array_equal(new[~mask], params[~mask])


def test_positive_advantage_raises_log_prob():
    net, params, buf = small_setup(n=4)
    idx = np.array([0])
    one = RolloutBuffer(buf.states[idx], buf.actions[idx], buf.log_probs[idx], buf.rewards[idx],
                        buf.values[idx], np.array([True]), advantages=np.array([1.0]), returns=buf.values[idx])
    cfg = TrainConfig(minibatch_size=1, epochs_per_batch=1)
    new, _ = ppo.ppo_update(net, params.copy(), one, cfg, Adam(net.n_params, 1e-3), np.random.default_rng(0))
    f0, f1 = net.forward(params, one.states), net.forward(new, one.states)
    lp0 = ppo.gaussian_log_prob(one.actions, f0.mean, f0.log_std)
    lp1 = ppo.gaussian_log_prob(one.actions, f1.mean, f1.log_std)
    assert lp1[0] > lp0[0]


def test_clipped_ratio_gives_zero_policy_gradient():
    net, params, buf = small_setup(n=4)
    # old log-probs far below the current ones: ratio >> 1 + eps
    buf.log_probs = buf.log_probs - 1.0
    buf.advantages = np.ones(4)
    buf.returns = buf.values.copy()
    cfg = TrainConfig(entropy_coef=0.0)
    _, grad, stats = ppo.ppo_loss_grad(net, params, buf, np.arange(4), cfg)
    assert stats["clip_frac"] == 1.0
    assert np.array_equal(grad[net.policy_mask()], np.zeros(net.policy_mask().sum()))


@pytest.mark.parametrize("min_std", [0.0, 0.3])
def test_loss_gradient_matches_finite_differences(min_std):
    net, params, buf = small_setup(n=8, seed=3)
    buf.advantages = np.random.default_rng(1).normal(size=8)
    buf.returns = buf.values + 0.5
    params = params + 0.05 * np.random.default_rng(2).normal(size=net.n_params)
    sl = net.slice("log_std")
    params[sl] = np.log([0.2, 0.5, 0.29])  # with the 0.3 floor: one floored, two free
    cfg = TrainConfig(entropy_coef=0.01, clip_eps=10.0, min_std=min_std)  # every ratio unclipped
    idx = np.arange(8)
    _, grad, _ = ppo.ppo_loss_grad(net, params, buf, idx, cfg)
    if min_std:
        assert grad[sl][0] == 0.0 and grad[sl][2] == 0.0 and grad[sl][1] != 0.0
    h = 1e-6
    rng = np.random.default_rng(4)
    picks = np.concatenate([rng.choice(net.n_params, 60, replace=False), np.arange(net.n_params)[sl]])
    for i in picks:
        p1, p2 = params.copy(), params.copy()
        p1[i] += h
        p2[i] -= h
        fd = (ppo.ppo_loss_grad(net, p1, buf, idx, cfg)[0] - ppo.ppo_loss_grad(net, p2, buf, idx, cfg)[0]) / (2 * h)
        assert fd == pytest.approx(grad[i], rel=1e-4, abs=1e-8)


def test_nonfinite_loss_raises():
    net, params, buf = small_setup()
    buf.advantages = np.full(len(buf), np.nan)
    buf.returns = buf.values.copy()
    with pytest.raises(ppo.NonFiniteLoss):
        ppo.ppo_update(net, params, buf, TrainConfig(minibatch_size=4), Adam(net.n_params, 1e-3),
                       np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.floats(-3, 3)] * 3), st.tuples(*[st.floats(-2, 2)] * 3), st.floats(-2, 0.5))
def test_squash_log_prob_change_of_variables(u, mean, log_std):
    u, mean = np.array(u), np.array(mean)
    ls = np.full(3, log_std)
    direct = ppo.gaussian_log_prob(u, mean, ls) - np.sum(np.log(1 - np.tanh(u) ** 2))
    assert ppo.squash_log_prob(u, mean, ls) == pytest.approx(direct, rel=1e-9, abs=1e-9)


# -- training loop ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=3).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="cosine").validate()


def test_linear_lr_schedule_decays_to_zero(monkeypatch):
    seen = []
    real = ppo.ppo_update

    def spy(net, params, buf, cfg, opt, rng):
        seen.append(opt.lr)
        return real(net, params, buf, cfg, opt, rng)

    monkeypatch.setattr(ppo, "ppo_update", spy)
    cfg = TrainConfig(total_steps=24_000, hidden=(8, 8), lr=1e-3, lr_schedule="linear")
    ppo.train(cfg)
    assert seen == pytest.approx([1e-3, 0.75e-3, 0.5e-3, 0.25e-3])


def test_convergence_metric():
    flat = np.full(5000, -3.0)
    c = ppo.convergence(flat)
    assert c.plateaued and not c.improved
    rising = np.concatenate([np.full(1000, -20.0), np.full(9000, -5.0)])
    c = ppo.convergence(rising)
    assert c.gain_fraction == pytest.approx(0.75) and c.converged


@pytest.fixture(scope="module")
def smoke_run():
    cfg = TrainConfig(total_steps=20_000, seed=7)
    return cfg, ppo.train(cfg)


def test_smoke_training_improves(smoke_run):
    cfg, res = smoke_run
    r = res.episode_rewards
    assert res.steps >= cfg.total_steps
    assert np.all(r <= 0)
    assert r[-1000:].mean() > r[:1000].mean()
    assert np.all(np.isfinite(res.params))


def test_training_is_deterministic(smoke_run, tmp_path):
    cfg, res = smoke_run
    again = ppo.train(TrainConfig(total_steps=20_000, seed=7))
    assert np.array_equal(res.params, again.params)
    assert np.array_equal(res.episode_rewards, again.episode_rewards)
    a = ppo.save_training(tmp_path / "a", res, cfg)
    b = ppo.save_training(tmp_path / "b", again, cfg)
    for key in ("weights", "meta", "curve"):
        assert a[key].read_bytes() == b[key].read_bytes()


def test_learning_curve_round_trip(smoke_run, tmp_path):
    _, res = smoke_run
    path = ppo.write_learning_curve(tmp_path / "lc.csv", res)
    assert np.array_equal(ppo.read_learning_curve(path), res.episode_rewards)
    header = path.read_text().splitlines()[0]
    assert header == "episode_index,steps,episode_reward,mean_reward_100"
