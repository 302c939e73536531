import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsule.compensator import (
    CompBuffer,
    CompensatorConfig,
    CompensatorNet,
    comp_predict,
    comp_train,
    compensator_from_bytes,
    compensator_to_bytes,
    load_compensator,
    make_compensator,
    save_compensator,
)
from capsule.errors import ConfigError, FormatError, ShapeError, VersionError
from capsule.nn import Mlp, MlpSpec, mlp_init


def filled_buffer(rng, n, target, state_dim=2):
    buf = CompBuffer(1000, state_dim, 1)
    S = rng.normal(size=(n, state_dim))
    buf.add(S, np.broadcast_to(target, (n, 1)))
    return buf, S


class TestPredict:
    def test_zero_weight_net(self, rng):
        c = CompensatorNet(Mlp(MlpSpec(2, (8,), 1), np.zeros(MlpSpec(2, (8,), 1).n_params)), np.array([0.4]))
        assert not comp_predict(c, rng.normal(size=(5, 2))).any()

    def test_fresh_compensator_is_zero(self, rng):
        c = make_compensator(3, [-1.0], [1.0], seed=4)
        assert not comp_predict(c, rng.normal(size=(10, 3)) * 10).any()
        np.testing.assert_allclose(c.c_max, [0.4])

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_bounded(self, seed, scale):
        net = Mlp(MlpSpec(2, (8,), 2), np.random.default_rng(seed).normal(size=MlpSpec(2, (8,), 2).n_params) * 5)
        c = CompensatorNet(net, np.array([0.3, 1.5]))
        out = comp_predict(c, np.random.default_rng(seed + 1).normal(size=(20, 2)) * scale)
        assert np.all(np.abs(out) <= c.c_max)

    def test_deterministic(self, rng):
        c = make_compensator(2, [-1.0], [1.0])
        c = CompensatorNet(c.net.with_params(rng.normal(size=c.net.spec.n_params)), c.c_max)
        s = rng.normal(size=2)
        assert np.array_equal(comp_predict(c, s), comp_predict(c, s))

    def test_c_max_validation(self):
        net = Mlp(MlpSpec(2, (4,), 1), np.zeros(MlpSpec(2, (4,), 1).n_params))
        with pytest.raises(ConfigError):
            CompensatorNet(net, np.array([0.0]))
        with pytest.raises(ConfigError):
            CompensatorNet(net, np.array([1.0, 1.0]))


class TestTrain:
    def test_constant_target(self, rng):
        c = make_compensator(2, [-1.0], [1.0], seed=1)
        buf, S = filled_buffer(rng, 100, 0.25)
        c = comp_train(c, buf, 200, CompensatorConfig(), np.random.default_rng(0))
        assert np.max(np.abs(comp_predict(c, S) - 0.25)) <= 0.05

    def test_zero_target(self, rng):
        # Glorot init with a live output layer, so the starting output is non-zero
        c = CompensatorNet(mlp_init(MlpSpec(2, (64, 64), 1, "tanh", 1)), np.array([0.4]))
        buf, S = filled_buffer(rng, 100, 0.0)
        assert np.max(np.abs(comp_predict(c, S))) > 0.05
        c = comp_train(c, buf, 200, CompensatorConfig(), np.random.default_rng(0))
        assert np.max(np.abs(comp_predict(c, S))) <= 0.01

    def test_zero_epochs(self, rng):
        c = make_compensator(2, [-1.0], [1.0], seed=1)
        buf, _ = filled_buffer(rng, 100, 0.2)
        assert np.array_equal(comp_train(c, buf, 0, CompensatorConfig(), rng).net.params, c.net.params)

    def test_empty_buffer_warns(self, caplog, rng):
        c = make_compensator(2, [-1.0], [1.0])
        with caplog.at_level(logging.WARNING):
            out = comp_train(c, CompBuffer(10, 2, 1), 5, CompensatorConfig(), rng)
        assert out is c
        assert "empty" in caplog.text

    def test_loss_decreases(self, rng):
        c = make_compensator(2, [-1.0], [1.0], seed=2)
        buf = CompBuffer(1000, 2, 1)
        S = rng.normal(size=(4096, 2))
        buf.add(S, 0.3 * np.tanh(S[:, :1] - S[:, 1:]))
        hist = []
        comp_train(c, buf, 40, CompensatorConfig(), np.random.default_rng(1), history=hist)
        assert len(hist) == 40
        assert np.sum(np.diff(hist) > 0) <= 0.05 * 39 and hist[-1] < hist[0]

    def test_deterministic(self, rng):
        c = make_compensator(2, [-1.0], [1.0], seed=2)
        buf, _ = filled_buffer(rng, 300, 0.1)
        a = comp_train(c, buf, 3, CompensatorConfig(), np.random.default_rng(9))
        b = comp_train(c, buf, 3, CompensatorConfig(), np.random.default_rng(9))
        assert np.array_equal(a.net.params, b.net.params)


class TestBuffer:
    def test_ring_overwrites_oldest(self):
        buf = CompBuffer(3, 1, 1)
        buf.add(np.arange(5.0)[:, None], np.arange(5.0)[:, None] * 10)
        S, T = buf.arrays()
        np.testing.assert_array_equal(S[:, 0], [2, 3, 4])
        np.testing.assert_array_equal(T[:, 0], [20, 30, 40])
        assert len(buf) == 3 and buf.total_added == 5

    def test_partial(self):
        buf = CompBuffer(10, 2, 1)
        buf.add(np.ones(2), np.ones(1))
        assert len(buf) == 1 and buf.arrays()[0].shape == (1, 2)

    def test_errors(self):
        with pytest.raises(ConfigError):
            CompBuffer(0, 2, 1)
        with pytest.raises(ShapeError):
            CompBuffer(5, 2, 1).add(np.zeros((3, 2)), np.zeros((2, 1)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        c = make_compensator(2, [-2.0, 0.0], [2.0, 1.0], seed=3)
        c = CompensatorNet(c.net.with_params(rng.normal(size=c.net.spec.n_params)), c.c_max)
        save_compensator(c, tmp_path / "c.capc")
        back = load_compensator(tmp_path / "c.capc")
        s = rng.normal(size=(4, 2))
        assert np.array_equal(comp_predict(back, s), comp_predict(c, s))
        assert (tmp_path / "c.capc").read_bytes()[:4] == b"CAPC"

    def test_corrupt(self):
        raw = compensator_to_bytes(make_compensator(2, [-1.0], [1.0]))
        with pytest.raises(FormatError):
            compensator_from_bytes(raw[:-1])
        with pytest.raises(FormatError):
            compensator_from_bytes(b"XXXX" + raw[4:])
        with pytest.raises(VersionError):
            compensator_from_bytes(raw[:4] + b"\x07" + raw[5:])
