import numpy as np
import pytest

from equicrl import autodiff as ad
from equicrl.autodiff import Adam
from equicrl.envs import TaskEnv, make_task, task_orbit
from equicrl.policy import make_bundle
from equicrl.ppo import (
    PpoConfig,
    RolloutBuffer,
    Transition,
    clip_loss,
    collect_episode,
    compute_gae,
    explained_variance,
    update,
)


def test_config_defaults_and_validation():
    cfg = PpoConfig()
    assert cfg.clip_eps == 0.2
    assert cfg.gamma == 0.99
    assert cfg.gae_lambda == 0.95
    assert cfg.epochs == 8
    assert cfg.batch_size == 64
    assert cfg.learning_rate == 3e-4
    assert cfg.entropy_coef == 0.001
    assert cfg.max_kl == 0.05
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)


def test_gae_zero_case():
    adv, ret = compute_gae([0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0], 0.99, 0.95)
    assert np.array_equal(adv, [0.0, 0.0])
    assert np.array_equal(ret, [0.0, 0.0])


def test_gae_gamma_zero_collapses():
    rng = np.random.default_rng(0)
    r = rng.standard_normal(5)
    v = rng.standard_normal(6)
    adv, _ = compute_gae(r, v, [0, 0, 0, 0, 1], gamma=0.0, lam=0.7)
    assert np.allclose(adv, r - v[:-1], atol=1e-12)


def test_gae_hand_unrolled_example():
    # gamma = lambda = 0.5, V = 0, rewards 1,1,1, terminal end
    adv, ret = compute_gae([1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0],
                           [0.0, 0.0, 1.0], 0.5, 0.5)
    assert np.allclose(adv, [1.3125, 1.25, 1.0], atol=1e-12)
    assert np.allclose(ret, adv, atol=1e-12)


def test_gae_truncation_bootstraps():
    # identical rewards; truncated episode bootstraps V of the next state
    adv_term, _ = compute_gae([1.0], [0.0, 5.0], [1.0], 0.9, 0.9)
    adv_trunc, _ = compute_gae([1.0], [0.0, 5.0], [0.0], 0.9, 0.9)
    assert adv_term[0] == 1.0
    assert adv_trunc[0] == pytest.approx(1.0 + 0.9 * 5.0)


def test_gae_length_validation():
    with pytest.raises(ValueError):
        compute_gae([1.0], [0.0], [0.0], 0.9, 0.9)


def _fake_transition(obs, reward=1.0, value=0.0, logp=-1.0, t=0, done=False):
    return Transition(obs=obs, action=np.zeros(4), pre_squash=np.zeros(4),
                      reward=reward, log_prob_old=logp, value_old=value,
                      done=done, t=t)


def test_transition_validation():
    with pytest.raises(ValueError):
        _fake_transition(None, reward=np.inf)


def test_buffer_advantage_normalization():
    obs = TaskEnv(make_task("reach")).reset(seed=0)
    buf = RolloutBuffer()
    rng = np.random.default_rng(1)
    for _ in range(3):
        for t in range(10):
            buf.add(_fake_transition(obs, reward=float(rng.standard_normal()),
                                     value=float(rng.standard_normal()), t=t))
        buf.end_episode(0.0)
    buf.finalize(0.99, 0.95)
    assert buf.advantages.mean() == pytest.approx(0.0, abs=1e-9)
    assert buf.advantages.std() == pytest.approx(1.0, rel=1e-6)
    assert len(buf) == 30 and buf.n_episodes == 3


def test_buffer_rejects_empty_and_unclosed():
    buf = RolloutBuffer()
    with pytest.raises(ValueError):
        buf.finalize(0.99, 0.95)
    obs = TaskEnv(make_task("reach")).reset(seed=0)
    buf.add(_fake_transition(obs))
    with pytest.raises(ValueError):
        buf.finalize(0.99, 0.95)


def _collect_buffer(bundle, task, seeds, rng):
    buf = RolloutBuffer()
    env = TaskEnv(task)
    rewards = []
    for s in seeds:
        transitions, total, info = collect_episode(env, bundle, s, rng)
        buf.add_episode(transitions, info["bootstrap_value"])
        rewards.append(total)
    return buf, rewards


def test_clip_loss_trivial_ratio_values():
    # rho = 1 cases exercised through hand-made log-ratio data
    bundle = make_bundle(2)
    task = make_task("reach", horizon=12)
    buf, _ = _collect_buffer(bundle, task, [0, 1], np.random.default_rng(3))
    buf.finalize(0.99, 0.95)
    transitions = buf.transitions()
    idx = np.arange(len(transitions))
    from equicrl.ppo import _batch_dict
    batch = _batch_dict(bundle, transitions, idx, buf.advantages, buf.returns)
    _, diag = clip_loss(batch, bundle, PpoConfig())
    # at the behavior parameters the surrogate equals the mean advantage
    assert diag["surrogate"] == pytest.approx(float(buf.advantages.mean()), abs=1e-9)
    assert diag["kl"] == pytest.approx(0.0, abs=1e-9)


def test_clip_arithmetic_cases():
    # min(rho*A, clip(rho)*A) spot values under eps = 0.2
    eps = 0.2
    for rho, a, expected in [(1.0, 1.0, 1.0), (2.0, 1.0, 1.2), (0.5, -1.0, -0.8)]:
        clipped = np.clip(rho, 1 - eps, 1 + eps)
        assert min(rho * a, clipped * a) == expected


def test_update_improves_logprob_of_positive_advantage_action():
    bundle = make_bundle(5)
    task = make_task("reach", horizon=10)
    rng = np.random.default_rng(7)
    env = TaskEnv(task)
    transitions, _, info = collect_episode(env, bundle, 0, rng)
    tr = transitions[0]
    # hand-build a buffer where this single action gets a positive advantage
    buf = RolloutBuffer()
    buf.add_episode([tr], bootstrap_value=0.0)
    buf.finalize(0.99, 0.95)
    buf.advantages = np.array([1.0])
    buf.returns = np.array([tr.value_old])
    images, vectors = bundle.batch_arrays([tr.obs])
    with ad.no_grad():
        pre, _ = bundle.forward_batch(images, vectors)
    lp_before = bundle.log_prob_batch(pre, tr.pre_squash[None]).values[0]
    update(bundle, buf, PpoConfig(epochs=4, batch_size=8, learning_rate=1e-3),
           np.random.default_rng(0))
    with ad.no_grad():
        pre, _ = bundle.forward_batch(images, vectors)
    lp_after = bundle.log_prob_batch(pre, tr.pre_squash[None]).values[0]
    assert lp_after > lp_before


def test_update_zero_advantage_moves_value_only():
    bundle = make_bundle(6)
    task = make_task("press", horizon=8)
    buf, _ = _collect_buffer(bundle, task, [0, 1], np.random.default_rng(11))
    buf.finalize(0.99, 0.95)
    buf.advantages = np.zeros(len(buf))
    cfg = PpoConfig(epochs=1, batch_size=256, entropy_coef=0.0)
    before_policy = bundle.store["policy.out.coef"].values.copy()
    before_value = bundle.store["value.out.w"].values.copy()
    stats = update(bundle, buf, cfg, np.random.default_rng(0))
    # zero advantages kill the surrogate gradient; the value head still learns
    assert np.allclose(bundle.store["policy.out.coef"].values, before_policy,
                       atol=1e-12)
    assert not np.allclose(bundle.store["value.out.w"].values, before_value)
    assert stats.n_minibatches >= 1


def test_update_changes_value_predictions():
    bundle = make_bundle(8)
    task = make_task("reach", horizon=10)
    buf, _ = _collect_buffer(bundle, task, range(4), np.random.default_rng(13))
    env = TaskEnv(task)
    obs = env.reset(seed=0)
    v_before = bundle.value(obs)
    update(bundle, buf, PpoConfig(epochs=2), np.random.default_rng(0))
    assert bundle.value(obs) != v_before


def test_update_empty_buffer_errors():
    bundle = make_bundle(9)
    with pytest.raises(ValueError):
        update(bundle, RolloutBuffer(), PpoConfig(), np.random.default_rng(0))


def test_update_reproducible():
    def run():
        bundle = make_bundle(10)
        task = make_task("slide", horizon=15)
        buf, _ = _collect_buffer(bundle, task, range(3), np.random.default_rng(17))
        stats = update(bundle, buf, PpoConfig(epochs=3), np.random.default_rng(21))
        return stats, bundle.store["log_std"].values.copy()
    s1, p1 = run()
    s2, p2 = run()
    assert s1 == s2
    assert np.array_equal(p1, p2)


def test_kl_early_stop_with_huge_lr():
    bundle = make_bundle(12)
    task = make_task("reach", horizon=10)
    buf, _ = _collect_buffer(bundle, task, range(4), np.random.default_rng(19))
    cfg = PpoConfig(epochs=8, learning_rate=3e-2)  # 100x the default
    stats = update(bundle, buf, cfg, np.random.default_rng(0))
    assert stats.early_stopped
    assert stats.epochs_run <= cfg.epochs


def test_update_direction_matches_vanilla_policy_gradient():
    """With a huge clip range and one epoch, the first-step gradient equals
    the plain policy-gradient direction (cosine > 0.999)."""
    bundle = make_bundle(14)
    task = make_task("press", horizon=10)
    buf, _ = _collect_buffer(bundle, task, range(3), np.random.default_rng(23))
    buf.finalize(0.99, 0.95)
    transitions = buf.transitions()
    idx = np.arange(len(transitions))
    from equicrl.ppo import _batch_dict
    batch = _batch_dict(bundle, transitions, idx, buf.advantages, buf.returns)
    cfg = PpoConfig(clip_eps=1e9, epochs=1, entropy_coef=0.0, value_coef=0.0)
    loss, _ = clip_loss(batch, bundle, cfg)
    bundle.store.zero_grad()
    loss.backward()
    g_ppo = np.concatenate([t.grad.ravel().copy() if t.grad is not None
                            else np.zeros(t.values.size)
                            for _, t in bundle.store.items()])
    # independent vanilla policy gradient: -mean(logpi * A)
    pre_mean, _ = bundle.forward_batch(batch["images"], batch["vectors"])
    logp = bundle.log_prob_batch(pre_mean, batch["pre_squash"])
    pg_loss = ad.mul(ad.constant(-1.0),
                     ad.mean(ad.mul(logp, ad.constant(batch["advantages"]))))
    bundle.store.zero_grad()
    pg_loss.backward()
    g_pg = np.concatenate([t.grad.ravel().copy() if t.grad is not None
                           else np.zeros(t.values.size)
                           for _, t in bundle.store.items()])
    cos = g_ppo @ g_pg / (np.linalg.norm(g_ppo) * np.linalg.norm(g_pg))
    assert cos > 0.999


def test_training_transfers_exactly_to_orbit_siblings():
    """Deterministic evaluation returns are bitwise equal across the orbit."""
    bundle = make_bundle(15)
    cfg = PpoConfig(epochs=2)
    base = make_task("reach", horizon=30)
    rng = np.random.default_rng(29)
    opt = Adam(bundle.store, lr=cfg.learning_rate)
    for round_ in range(3):
        buf, _ = _collect_buffer(bundle, base, range(round_ * 5, round_ * 5 + 5), rng)
        update(bundle, buf, cfg, rng, optimizer=opt)
    returns = []
    for task in task_orbit(base):
        env = TaskEnv(task)
        _, total, info = collect_episode(env, bundle, 1234, rng, deterministic=True)
        returns.append((total, info["success"], info["episode_len"]))
    assert all(r == returns[0] for r in returns[1:])


def test_explained_variance():
    ret = np.array([1.0, 2.0, 3.0])
    assert explained_variance(ret, ret) == pytest.approx(1.0)
    assert explained_variance(ret, np.zeros(3)) < 1.0
    assert explained_variance(np.ones(3), np.ones(3)) == 0.0
