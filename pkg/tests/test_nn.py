import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsule.errors import ConfigError, FormatError, NumericError, ShapeError, VersionError
from capsule.nn import (
    Mlp,
    MlpSpec,
    OptState,
    StackedMlp,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_from_bytes,
    mlp_init,
    mlp_jvp,
    mlp_to_bytes,
)

from oracles import rel_err


def reference_forward(net, x):
    h = np.asarray(x, dtype=float)
    layers = net.layers()
    for i, (W, b) in enumerate(layers):
        z = np.array([sum(W[o, j] * h[j] for j in range(len(h))) + b[o] for o in range(len(b))])
        if i < len(layers) - 1:
            h = np.tanh(z) if net.spec.activation == "tanh" else np.maximum(z, 0)
        else:
            h = z
    return h


def random_net(rng, activation="tanh", dims=(3, (5, 4), 2)):
    spec = MlpSpec(dims[0], dims[1], dims[2], activation, int(rng.integers(0, 2**31)))
    net = mlp_init(spec)
    return net.with_params(net.params + 0.3 * rng.standard_normal(spec.n_params))


class TestInit:
    def test_scalar_linear_net(self):
        net = mlp_init(MlpSpec(1, (), 1, "tanh", 7))
        assert net.params.shape == (2,)
        assert net.params[1] == 0.0

    def test_deterministic(self):
        spec = MlpSpec(4, (8, 8), 3, "relu", 99)
        assert np.array_equal(mlp_init(spec).params, mlp_init(spec).params)

    def test_size_arithmetic(self):
        assert MlpSpec(3, (8,), 2).n_params == 3 * 8 + 8 + 8 * 2 + 2 == 50

    def test_glorot_bounds_and_zero_bias(self):
        net = mlp_init(MlpSpec(10, (20,), 5, "tanh", 3))
        (W1, b1), (W2, b2) = net.layers()
        assert np.all(np.abs(W1) <= np.sqrt(6 / 30)) and np.all(np.abs(W2) <= np.sqrt(6 / 25))
        assert not b1.any() and not b2.any()

    @pytest.mark.parametrize("kw", [dict(input_dim=0), dict(output_dim=0), dict(hidden_dims=(4, 0)),
                                    dict(activation="sigmoid")])
    def test_invalid_spec(self, kw):
        base = dict(input_dim=2, hidden_dims=(3,), output_dim=1, activation="tanh")
        base.update(kw)
        with pytest.raises(ConfigError):
            MlpSpec(**base)

    def test_wrong_param_length(self):
        with pytest.raises(ShapeError):
            Mlp(MlpSpec(2, (), 1), np.zeros(5))


class TestForward:
    def test_zero_weights_give_last_bias(self):
        spec = MlpSpec(3, (4,), 2)
        net = Mlp(spec, np.zeros(spec.n_params))
        p = net.params.copy()
        p[-2:] = (0.7, -1.2)
        np.testing.assert_array_equal(mlp_forward(net.with_params(p), np.ones(3)), [0.7, -1.2])

    def test_linear_case(self, rng):
        net = random_net(rng, dims=(3, (), 2))
        (W, c), = net.layers()
        x = rng.standard_normal(3)
        np.testing.assert_allclose(mlp_forward(net, x), W @ x + c, rtol=1e-14)

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_matches_reference(self, rng, act):
        for _ in range(5):
            net = random_net(rng, act)
            x = rng.standard_normal(3)
            np.testing.assert_allclose(mlp_forward(net, x), reference_forward(net, x), rtol=1e-12, atol=1e-14)

    def test_batched_equals_rows(self, rng):
        net = random_net(rng)
        X = rng.standard_normal((6, 3))
        out = mlp_forward(net, X)
        for i in range(6):
            np.testing.assert_allclose(out[i], mlp_forward(net, X[i]), rtol=1e-14, atol=1e-15)

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            mlp_forward(random_net(rng), np.zeros(4))

    def test_bitwise_determinism(self, rng):
        net = random_net(rng)
        x = rng.standard_normal(3)
        assert mlp_forward(net, x).tobytes() == mlp_forward(net, x).tobytes()

    def test_affine_in_last_layer(self, rng):
        net = random_net(rng)
        x = rng.standard_normal(3)
        n_last = 4 * 2 + 2
        d1, d2 = np.zeros(net.spec.n_params), np.zeros(net.spec.n_params)
        d1[-n_last:], d2[-n_last:] = rng.standard_normal(n_last), rng.standard_normal(n_last)
        f = lambda d: mlp_forward(net.with_params(net.params + d), x)
        np.testing.assert_allclose(f(0.3 * d1 + 0.7 * d2), 0.3 * f(d1) + 0.7 * f(d2), atol=1e-12)


def fd_grads(net, x, u, h=1e-5):
    gp = np.zeros(net.spec.n_params)
    for i in range(net.spec.n_params):
        p1, p2 = net.params.copy(), net.params.copy()
        p1[i] += h
        p2[i] -= h
        gp[i] = (u @ mlp_forward(net.with_params(p1), x) - u @ mlp_forward(net.with_params(p2), x)) / (2 * h)
    gx = np.zeros(len(x))
    for i in range(len(x)):
        x1, x2 = x.copy(), x.copy()
        x1[i] += h
        x2[i] -= h
        gx[i] = (u @ mlp_forward(net, x1) - u @ mlp_forward(net, x2)) / (2 * h)
    return gp, gx


class TestBackward:
    def test_zero_upstream(self, rng):
        net = random_net(rng)
        gp, gx = mlp_backward(net, rng.standard_normal(3), np.zeros(2))
        assert not gp.any() and not gx.any()

    def test_linear_case(self, rng):
        net = random_net(rng, dims=(3, (), 2))
        (W, _), = net.layers()
        x, u = rng.standard_normal(3), rng.standard_normal(2)
        gp, gx = mlp_backward(net, x, u)
        np.testing.assert_allclose(gx, W.T @ u)
        np.testing.assert_allclose(gp[:6].reshape(2, 3), np.outer(u, x))
        np.testing.assert_allclose(gp[6:], u)

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_finite_difference(self, rng, act):
        for _ in range(10):
            net = random_net(rng, act, dims=(3, (5, 4), 2))
            x, u = rng.standard_normal(3), rng.standard_normal(2)
            gp, gx = mlp_backward(net, x, u)
            fp, fx = fd_grads(net, x, u)
            assert rel_err(gp, fp).max() <= 1e-4
            assert rel_err(gx, fx).max() <= 1e-4

    def test_batched_sums_over_rows(self, rng):
        net = random_net(rng)
        X, U = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        gp, gx = mlp_backward(net, X, U)
        rows = [mlp_backward(net, X[i], U[i]) for i in range(4)]
        np.testing.assert_allclose(gp, sum(r[0] for r in rows), atol=1e-12)
        np.testing.assert_allclose(gx, np.stack([r[1] for r in rows]), atol=1e-12)

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            mlp_backward(random_net(rng), np.zeros(3), np.zeros(3))

    def test_jvp_matches_directional_difference(self, rng):
        net = random_net(rng)
        x, t = rng.standard_normal((5, 3)), rng.standard_normal(net.spec.n_params)
        h = 1e-6
        fd = (mlp_forward(net.with_params(net.params + h * t), x)
              - mlp_forward(net.with_params(net.params - h * t), x)) / (2 * h)
        np.testing.assert_allclose(mlp_jvp(net, x, t), fd, rtol=1e-6, atol=1e-8)


class TestAdam:
    def test_zero_grad(self):
        net = mlp_init(MlpSpec(2, (3,), 1, init_seed=1))
        new, st_ = adam_step(net, np.zeros(net.spec.n_params), OptState.zeros(net.spec.n_params))
        np.testing.assert_array_equal(new.params, net.params)
        assert st_.step_count == 1

    def test_first_step_magnitude(self):
        net = Mlp(MlpSpec(1, (), 1), np.zeros(2))
        new, _ = adam_step(net, np.array([1.0, 0.0]), OptState.zeros(2, lr=0.1))
        assert new.params[0] == pytest.approx(-0.1, abs=1e-8)

    def test_deterministic(self, rng):
        net = random_net(rng)
        g = rng.standard_normal(net.spec.n_params)
        s = OptState.zeros(net.spec.n_params)
        a, b = adam_step(net, g, s), adam_step(net, g, s)
        assert np.array_equal(a[0].params, b[0].params)
        assert np.array_equal(a[1].second_moment, b[1].second_moment)

    def test_non_finite_grad_names_index(self, rng):
        net = random_net(rng)
        g = np.zeros(net.spec.n_params)
        g[7] = np.nan
        with pytest.raises(NumericError) as exc:
            adam_step(net, g, OptState.zeros(net.spec.n_params))
        assert exc.value.index == 7

    def test_invalid_betas(self):
        with pytest.raises(ConfigError):
            OptState.zeros(3, beta1=1.0)


class TestSerialization:
    def test_round_trip(self, rng):
        net = random_net(rng, "relu")
        buf = mlp_to_bytes(net)
        assert buf[:4] == b"CAPN"
        back, end = mlp_from_bytes(buf)
        assert end == len(buf)
        assert back.spec == net.spec
        assert np.array_equal(back.params, net.params)

    def test_truncation_names_offset(self, rng):
        buf = mlp_to_bytes(random_net(rng))
        with pytest.raises(FormatError, match="offset"):
            mlp_from_bytes(buf[:-3])

    def test_version_mismatch(self, rng):
        buf = bytearray(mlp_to_bytes(random_net(rng)))
        buf[4] = 9
        with pytest.raises(VersionError):
            mlp_from_bytes(bytes(buf))

    def test_bad_magic(self, rng):
        buf = b"XXXX" + mlp_to_bytes(random_net(rng))[4:]
        with pytest.raises(FormatError):
            mlp_from_bytes(buf)


def test_stacked_matches_members(rng):
    spec = MlpSpec(3, (6,), 2, "tanh", 0)
    nets = [mlp_init(MlpSpec(3, (6,), 2, "tanh", s)) for s in range(3)]
    X = rng.standard_normal((5, 3))
    out = StackedMlp(nets)(X)
    for k, n in enumerate(nets):
        np.testing.assert_allclose(out[k], mlp_forward(n, X), atol=1e-13)
    assert spec.n_params == nets[0].spec.n_params


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 5), max_size=2), st.integers(1, 3), st.integers(0, 2**40))
def test_param_count_matches_layers(n_in, hidden, n_out, seed):
    net = mlp_init(MlpSpec(n_in, tuple(hidden), n_out, "tanh", seed))
    total = sum(W.size + b.size for W, b in net.layers())
    assert total == net.spec.n_params == len(net.params)
