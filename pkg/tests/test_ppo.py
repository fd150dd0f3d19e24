import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import gae_bruteforce
from quadftc.env import EnvConfig, InvalidConfig
from quadftc.nn import checkpoint
from quadftc.ppo import (LOG_STD_MAX, LOG_STD_MIN, Collector, LengthMismatch, NonFiniteLoss, PpoConfig,
                         clipped_surrogate, gae, gaussian_log_prob, init_policy, make_batch,
                         normalize_advantages, policy_forward, policy_sample, ppo_loss, ppo_update,
                         train_phase1)
from quadftc.nn import AdamState

OBS = np.zeros((1, 22), np.float32)
Z = np.zeros((1, 8), np.float32)


def test_config_validation():
    PpoConfig().validate()
    for bad in (dict(gamma=0.0), dict(gae_lambda=1.5), dict(clip_eps=0.0), dict(lr_schedule="cosine"),
                dict(rollout_steps=10, num_envs=3)):
        with pytest.raises(InvalidConfig):
            PpoConfig(**bad).validate()


# ---- gae -------------------------------------------------------------------

def test_gae_examples():
    assert gae([1.0], [0.0], [1.0], 0.99, 0.95)[0] == pytest.approx([1.0])
    adv, ret = gae([1, 1, 1], [0, 0, 0], [0, 0, 1], 1.0, 1.0)
    assert np.array_equal(adv, [3, 2, 1]) and np.array_equal(ret, adv)


def test_gae_lambda_zero_is_td0():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=12), rng.normal(size=12)
    d = (rng.random(12) < 0.3).astype(float)
    adv, _ = gae(r, v, d, 0.9, 0.0, last_value=0.7)
    v_next = np.append(v[1:], 0.7)
    assert np.allclose(adv, r + 0.9 * v_next * (1 - d) - v, atol=1e-14)


def test_gae_length_mismatch():
    with pytest.raises(LengthMismatch):
        gae([1.0, 2.0], [0.0], [0.0, 0.0], 0.99, 0.95)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 32), st.floats(0.5, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_bruteforce(seed, T, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=T) * 5, rng.normal(size=T) * 5
    d = (rng.random(T) < 0.2).astype(float)
    last = float(rng.normal())
    adv, ret = gae(r, v, d, gamma, lam, last)
    a_ref, r_ref = gae_bruteforce(r, v, d, gamma, lam, last)
    assert np.max(np.abs(adv - a_ref)) < 1e-10
    assert np.max(np.abs(ret - r_ref)) < 1e-10


def test_gae_batched_columns_independent():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    d = (rng.random((20, 3)) < 0.2).astype(float)
    last = rng.normal(size=3)
    adv, _ = gae(r, v, d, 0.99, 0.95, last)
    for j in range(3):
        assert np.allclose(adv[:, j], gae(r[:, j], v[:, j], d[:, j], 0.99, 0.95, last[j])[0], atol=1e-14)


# ---- objective pieces ------------------------------------------------------

def test_clip_arithmetic():
    assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)


def test_log_prob_of_mean():
    ls = np.full(4, np.log(0.3))
    # closed form -4 ln(0.3 sqrt(2 pi)) = 1.1401
    assert gaussian_log_prob(np.full(4, 0.5), np.full(4, 0.5), ls) == pytest.approx(
        -4 * np.log(0.3 * np.sqrt(2 * np.pi)), abs=1e-12)
    assert gaussian_log_prob(np.full(4, 0.5), np.full(4, 0.5), ls) == pytest.approx(1.1401, abs=1e-4)


def test_policy_outputs_and_std_limit():
    p = init_policy(0)
    mean, log_std, value = policy_forward(p, OBS, Z)
    assert mean.shape == (1, 4) and value.shape == (1,)
    assert np.all((mean >= 0) & (mean <= 1))
    p["log_std"][:] = -50.0
    _, ls, _ = policy_forward(p, OBS, Z)
    assert np.all(ls == LOG_STD_MIN)
    p["log_std"][:] = 50.0
    assert np.all(policy_forward(p, OBS, Z)[1] == LOG_STD_MAX)
    p["log_std"][:] = -50.0
    a, _, _ = policy_sample(p, OBS, Z, np.random.default_rng(0))
    assert np.max(np.abs(a - mean)) < 0.05  # std = e^-5


def test_policy_sample_deterministic_and_clamped():
    p = init_policy(0)
    p["log_std"][:] = 1.0
    a1, l1, _ = policy_sample(p, np.tile(OBS, (50, 1)), np.tile(Z, (50, 1)), np.random.default_rng(3))
    a2, l2, raw = policy_sample(p, np.tile(OBS, (50, 1)), np.tile(Z, (50, 1)), np.random.default_rng(3))
    assert np.array_equal(a1, a2) and np.array_equal(l1, l2)
    assert np.all((a1 >= 0) & (a1 <= 1)) and np.any((raw < 0) | (raw > 1))
    mean, ls, _ = policy_forward(p, np.tile(OBS, (50, 1)), np.tile(Z, (50, 1)))
    assert np.allclose(l1, gaussian_log_prob(raw, mean, ls))


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=200).filter(lambda x: np.std(x) > 1e-3))
def test_normalize_advantages(xs):
    a = normalize_advantages(xs)
    assert abs(a.mean()) < 1e-6
    assert abs(a.std() - 1.0) < 1e-4


# ---- rollouts and update ---------------------------------------------------

CFG_SMALL = PpoConfig(rollout_steps=256, num_envs=2, minibatch_size=64, epochs=2, total_steps=256)


def test_identity_ratio_and_zero_kl():
    p = init_policy(0, CFG_SMALL)
    coll = Collector(EnvConfig(), 2, seed=0)
    batch = make_batch(coll.collect(p, 128, np.random.default_rng(0)), CFG_SMALL)
    _, _, _, stats = ppo_loss(p, batch, CFG_SMALL, grad=False)
    assert stats["approx_kl"] == pytest.approx(0.0, abs=1e-6)
    assert stats["clip_frac"] == 0.0
    # with unit ratios the surrogate is the mean normalized advantage, which is zero
    assert stats["policy_loss"] == pytest.approx(0.0, abs=1e-5)


def test_collect_shapes_and_resets():
    p = init_policy(0, CFG_SMALL)
    p["pi2.b"][:] = -10.0  # motors off: the vehicle falls and crashes
    p["log_std"][:] = LOG_STD_MIN
    coll = Collector(EnvConfig(), 1, seed=0)
    traj = coll.collect(p, 200, np.random.default_rng(0))
    assert traj.obs.shape == (200, 1, 22) and len(traj) == 200
    d = np.flatnonzero(traj.dones[:, 0])
    assert len(d) >= 1 and traj.episode_crashed[0]
    t = d[0]
    assert traj.rewards[t, 0] < -9.0
    # the step after a crash starts a fresh task hovering near the target
    assert np.all(np.abs(traj.obs[t + 1, 0, 0:3]) <= 0.5 + 1e-6)


def test_collect_no_termination():
    p = init_policy(0, CFG_SMALL)
    coll = Collector(EnvConfig(), 1, seed=0)
    traj = coll.collect(p, 10, np.random.default_rng(0))
    assert len(traj) == 10 and not traj.dones.any()


def test_collect_deterministic():
    p = init_policy(0, CFG_SMALL)
    a = Collector(EnvConfig(), 2, seed=4).collect(p, 128, np.random.default_rng(9))
    b = Collector(EnvConfig(), 2, seed=4).collect(p, 128, np.random.default_rng(9))
    for k in ("obs", "ext", "actions", "log_probs", "rewards", "values", "dones"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_update_moves_mu_and_rejects_nonfinite():
    p = init_policy(0, CFG_SMALL)
    coll = Collector(EnvConfig(), 2, seed=0)
    batch = make_batch(coll.collect(p, 256, np.random.default_rng(0)), CFG_SMALL)
    opt = AdamState.for_params(p, lr=1e-3)
    new, opt2, stats = ppo_update(batch, p, opt, CFG_SMALL, np.random.default_rng(1))
    assert opt2.step == 2 * 4
    for k in ("mu0.w", "pi0.w", "v0.w", "log_std"):
        assert not np.array_equal(new[k], p[k])
    batch.advantages[0] = np.nan
    with pytest.raises(NonFiniteLoss):
        ppo_update(batch, p, opt, CFG_SMALL, np.random.default_rng(1))


def test_train_smoke_is_bit_reproducible(tmp_path):
    a = train_phase1(CFG_SMALL, EnvConfig(), 3, tmp_path / "a")
    b = train_phase1(CFG_SMALL, EnvConfig(), 3, tmp_path / "b")
    assert checkpoint.content_hash(a) == checkpoint.content_hash(b)
    rows = (tmp_path / "a" / "train_phase1.csv").read_text().splitlines()
    assert len(rows) == 2  # header + exactly one update cycle
    params, meta = checkpoint.load(a)
    assert meta["kind"] == "phase1" and set(params) >= {"mu0.w", "pi0.w", "v0.w", "log_std"}
