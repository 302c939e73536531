import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsule.errors import ConfigError, DataError, FormatError, ShapeError, VersionError
from capsule.trpo import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    GaussianPolicy,
    TrajectoryBatch,
    TrpoConfig,
    _surrogate,
    compute_gae,
    conjugate_gradient,
    fisher_vector_product,
    kl_grad,
    load_policy,
    load_value,
    log_prob,
    make_policy,
    make_value,
    mean_kl,
    normalize_advantages,
    policy_from_bytes,
    policy_sample,
    policy_to_bytes,
    save_policy,
    save_value,
    surrogate_grad,
    trpo_update,
    value_fit,
    value_from_bytes,
    value_to_bytes,
)


def batch_of(rewards, values, next_values, dones=None, truncated=None):
    n = len(rewards)
    z = np.zeros(n)
    return TrajectoryBatch(np.zeros((n, 1)), np.zeros((n, 1)), np.zeros((n, 1)), np.asarray(rewards, float), z,
                           z if dones is None else np.asarray(dones, float),
                           z if truncated is None else np.asarray(truncated, float), z,
                           values=np.asarray(values, float), next_values=np.asarray(next_values, float))


def fd_grad(fn, theta, eps=1e-6):
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (fn(theta + e) - fn(theta - e)) / (2 * eps)
    return g


def assert_rel(g, fd, rtol):
    big = np.abs(fd) > 1e-7
    rel = np.abs(g - fd) / np.maximum(1e-8, np.abs(g) + np.abs(fd))
    assert np.max(rel[big], initial=0) <= rtol
    assert np.max(np.abs(g - fd)[~big], initial=0) <= 1e-8


class TestPolicy:
    def test_floor_sample_mean(self):
        p = make_policy(2, 1, (8,), init_log_std=-5.0, seed=1)
        s = np.array([0.3, -0.4])
        n = 10_000
        a, _ = policy_sample(p, np.tile(s, (n, 1)), np.random.default_rng(0))
        assert abs(a.mean() - p.mean(s)[0]) <= 3 * math.exp(-5) / math.sqrt(n)

    def test_logp_at_mode(self):
        p = make_policy(2, 3, (8,), init_log_std=-0.7, seed=2)
        s = np.array([0.1, 0.2])
        expected = -3 * (-0.7 + 0.5 * math.log(2 * math.pi))
        assert log_prob(p, s, p.mean(s)) == pytest.approx(expected, abs=1e-12)

    def test_sample_logp_matches_density(self):
        p = make_policy(2, 2, (8,), init_log_std=0.2)
        S = np.random.default_rng(1).normal(size=(5, 2))
        a, lp = policy_sample(p, S, np.random.default_rng(3))
        np.testing.assert_allclose(lp, log_prob(p, S, a), atol=1e-12)

    def test_same_seed_same_sample(self):
        p = make_policy(2, 1)
        a1, _ = policy_sample(p, np.zeros(2), np.random.default_rng(5))
        a2, _ = policy_sample(p, np.zeros(2), np.random.default_rng(5))
        assert np.array_equal(a1, a2)

    def test_log_std_clamped(self):
        p = make_policy(2, 2, (4,))
        q = GaussianPolicy(p.mean_net, np.array([-50.0, 50.0]))
        np.testing.assert_array_equal(q.log_std, [LOG_STD_MIN, LOG_STD_MAX])

    def test_flat_round_trip(self):
        p = make_policy(3, 2, (5,), init_log_std=-0.3)
        q = p.with_flat(p.flat())
        assert np.array_equal(q.flat(), p.flat())


class TestGAE:
    def test_lambda_zero_is_td(self, rng):
        r, v, nv = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
        d = np.array([0, 0, 1, 0, 0, 1], float)
        adv, ret = compute_gae(batch_of(r, v, nv, d), 0.9, 0.0)
        np.testing.assert_allclose(adv, r + 0.9 * nv * (1 - d) - v, atol=1e-14)
        np.testing.assert_allclose(ret, adv + v)

    def test_zero_rewards_zero_values(self):
        adv, _ = compute_gae(batch_of(np.zeros(5), np.zeros(5), np.zeros(5)), 0.99, 0.95)
        assert not adv.any()

    def test_hand_recursion(self):
        adv, _ = compute_gae(batch_of([1, 1, 1], [0, 0, 0], [0, 0, 0], [0, 0, 1]), 1.0, 1.0)
        np.testing.assert_allclose(adv, [3, 2, 1])

    def test_lambda_one_is_discounted_return_minus_value(self, rng):
        r, v = rng.normal(size=5), rng.normal(size=5)
        nv = np.r_[v[1:], 0.0]
        adv, _ = compute_gae(batch_of(r, v, nv, [0, 0, 0, 0, 1]), 0.9, 1.0)
        mc = np.array([sum(0.9**k * r[t + k] for k in range(5 - t)) for t in range(5)])
        np.testing.assert_allclose(adv, mc - v, atol=1e-12)

    def test_episode_boundary_resets(self):
        adv, _ = compute_gae(batch_of([1, 1, 5, 5], np.zeros(4), np.zeros(4), [0, 1, 0, 1]), 1.0, 1.0)
        np.testing.assert_allclose(adv, [2, 1, 10, 5])

    def test_truncation_bootstraps_but_cuts(self):
        adv, _ = compute_gae(batch_of([1, 1, 5], [0, 0, 0], [0, 7, 0], None, [0, 1, 1]), 1.0, 1.0)
        np.testing.assert_allclose(adv, [9, 8, 5])

    def test_needs_values(self):
        b = batch_of([1.0], [0.0], [0.0])
        b.values = None
        with pytest.raises(DataError):
            compute_gae(b, 0.99, 0.95)
        with pytest.raises(ConfigError):
            compute_gae(batch_of([1.0], [0.0], [0.0]), 1.5, 0.9)

    def test_normalize(self, rng):
        x = normalize_advantages(rng.normal(3, 5, 100))
        assert abs(x.mean()) < 1e-12 and x.std() == pytest.approx(1.0)
        assert not normalize_advantages(np.full(4, 2.0)).any()

    def test_batch_validation(self):
        with pytest.raises(ShapeError):
            TrajectoryBatch(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((3, 1)), *(np.zeros(3),) * 5)


class TestKL:
    def test_identity(self, rng):
        p = make_policy(2, 2, (8,), seed=3)
        assert mean_kl(p, p, rng.normal(size=(10, 2))) == 0.0

    @pytest.mark.parametrize("ratio", [0.5, 1.3, 3.0])
    def test_std_ratio_closed_form(self, ratio):
        p = make_policy(2, 3, (8,), init_log_std=-0.2)
        q = GaussianPolicy(p.mean_net, p.log_std + math.log(ratio))
        expected = 3 * (math.log(ratio) + 1 / (2 * ratio**2) - 0.5)
        assert mean_kl(p, q, np.zeros((4, 2))) == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p = make_policy(2, 2, (8,), seed=seed % 100)
        q = p.with_flat(p.flat() + rng.normal(size=len(p.flat())) * 0.3)
        assert mean_kl(p, q, rng.normal(size=(8, 2))) >= 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_kl_grad_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        p = make_policy(3, 2, (6,), init_log_std=-0.4, seed=seed)
        q = p.with_flat(p.flat() + rng.normal(size=len(p.flat())) * 0.2)
        S = rng.normal(size=(9, 3))
        fd = fd_grad(lambda th: mean_kl(p, q.with_flat(th), S), q.flat())
        assert_rel(kl_grad(p, q, S), fd, 1e-4)

    @pytest.mark.parametrize("seed", range(5))
    def test_fisher_matches_kl_grad_difference(self, seed):
        rng = np.random.default_rng(seed)
        p = make_policy(3, 2, (6,), init_log_std=-0.4, seed=seed)
        S = rng.normal(size=(9, 3))
        v = rng.normal(size=len(p.flat()))
        eps = 1e-5
        fd = (kl_grad(p, p.with_flat(p.flat() + eps * v), S) - kl_grad(p, p.with_flat(p.flat() - eps * v), S)) / (2 * eps)
        assert_rel(fisher_vector_product(p, S, v), fd, 1e-3)

    @pytest.mark.parametrize("seed", range(5))
    def test_surrogate_grad_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        p = make_policy(3, 2, (6,), init_log_std=-0.2, seed=seed)
        S = rng.normal(size=(9, 3))
        A, lp = policy_sample(p, S, rng)
        adv = rng.normal(size=9)
        q = p.with_flat(p.flat() + rng.normal(size=len(p.flat())) * 0.05)
        fd = fd_grad(lambda th: _surrogate(q.with_flat(th), S, A, lp, adv), q.flat())
        assert_rel(surrogate_grad(q, S, A, lp, adv), fd, 1e-4)

    def test_conjugate_gradient_solves_spd(self, rng):
        M = rng.normal(size=(6, 6))
        M = M @ M.T + 6 * np.eye(6)
        b = rng.normal(size=6)
        np.testing.assert_allclose(conjugate_gradient(lambda x: M @ x, b, iters=30), np.linalg.solve(M, b), atol=1e-8)


def bandit_batch(p, v, rng, n=1000):
    S = np.ones((n, 1))
    A, lp = policy_sample(p, S, rng)
    r = -((A[:, 0] - 1.0) ** 2)
    z = np.zeros(n)
    b = TrajectoryBatch(S, A, A, r, z, np.ones(n), z, lp, values=v(S), next_values=z)
    b.advantages, b.returns = compute_gae(b, 0.99, 0.95)
    return b


class TestUpdate:
    CFG = TrpoConfig(hidden_dims=(16,), value_epochs=5)

    def test_zero_advantage_unchanged(self, rng):
        p, v = make_policy(1, 1, (16,)), make_value(1, (16,))
        b = bandit_batch(p, v, rng)
        b.advantages = np.zeros(len(b))
        q, _, diag = trpo_update(p, v, b, 0.01, self.CFG, rng)
        assert np.array_equal(q.flat(), p.flat()) and diag.status == "zero_gradient"

    def test_requires_advantages(self, rng):
        p, v = make_policy(1, 1, (16,)), make_value(1, (16,))
        b = bandit_batch(p, v, rng)
        b.advantages = None
        with pytest.raises(DataError):
            trpo_update(p, v, b, 0.01, self.CFG, rng)

    def test_bandit_converges_and_respects_trust_region(self):
        rng = np.random.default_rng(0)
        p, v = make_policy(1, 1, (16,), seed=1), make_value(1, (16,), seed=2)
        start = p.mean(np.ones(1))[0]
        n_acc = 0
        for _ in range(50):
            b = bandit_batch(p, v, rng)
            q, v, diag = trpo_update(p, v, b, 0.01, self.CFG, rng)
            if diag.accepted:
                n_acc += 1
                assert mean_kl(p, q, b.states) <= 1.5 * 0.01
                assert diag.surrogate_gain >= 0.0
            else:
                assert np.array_equal(q.flat(), p.flat())
            p = q
        assert abs(start - 1.0) > 0.5
        assert abs(p.mean(np.ones(1))[0] - 1.0) <= 0.2
        assert n_acc >= 25

    def test_tiny_trust_region_still_bounded(self):
        rng = np.random.default_rng(1)
        p, v = make_policy(1, 1, (16,)), make_value(1, (16,))
        b = bandit_batch(p, v, rng)
        q, _, diag = trpo_update(p, v, b, 1e-5, self.CFG, rng)
        assert mean_kl(p, q, b.states) <= 1.5e-5

    def test_value_fit_reduces_loss(self, rng):
        v = make_value(2, (16,))
        S = rng.normal(size=(256, 2))
        y = S[:, 0] - 2 * S[:, 1]
        before = float(np.mean((v(S) - y) ** 2))
        v2, loss = value_fit(v, S, y, 30, 64, 1e-2, rng)
        assert loss < before and v2(S).shape == (256,)


class TestCheckpoints:
    def test_policy_round_trip(self, tmp_path):
        p = make_policy(3, 2, (5,), init_log_std=-1.2, seed=8)
        save_policy(p, tmp_path / "p.capp")
        q = load_policy(tmp_path / "p.capp")
        assert np.array_equal(q.flat(), p.flat())
        assert (tmp_path / "p.capp").read_bytes()[:4] == b"CAPP"

    def test_value_round_trip(self, tmp_path, rng):
        v = make_value(3, (5,), seed=4)
        save_value(v, tmp_path / "v.capv")
        S = rng.normal(size=(3, 3))
        assert np.array_equal(load_value(tmp_path / "v.capv")(S), v(S))

    def test_corrupt(self):
        raw = policy_to_bytes(make_policy(2, 1, (4,)))
        with pytest.raises(FormatError):
            policy_from_bytes(raw[:-2])
        with pytest.raises(VersionError):
            policy_from_bytes(raw[:4] + b"\x05" + raw[5:])
        with pytest.raises(FormatError):
            value_from_bytes(raw)
        vraw = value_to_bytes(make_value(2, (4,)))
        with pytest.raises(FormatError):
            value_from_bytes(vraw + b"\x00")
