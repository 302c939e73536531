"""Minimal multilayer perceptrons with hand-written reverse- and forward-mode derivatives.

Parameters live in one flat float64 vector. Layer ``l`` contributes its weight
matrix ``W_l`` (shape ``fan_out x fan_in``, row-major) followed by its bias
``b_l``. Inputs may be a single vector ``(in,)`` or a batch ``(N, in)``; batched
backward passes return parameter gradients *summed* over rows, so callers
divide by ``N`` to average.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError, VersionError

ACTIVATIONS = ("tanh", "relu")

MLP_MAGIC = b"CAPN"
MLP_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) != d or d < 1 for d in dims):
            raise ConfigError(f"all layer sizes must be positive integers, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))


@lru_cache(maxsize=None)
def _offsets(layer_dims: tuple[int, ...]) -> tuple[tuple[int, int, int, int, int], ...]:
    """(w_start, w_end, b_end, fan_out, fan_in) per layer."""
    out = []
    pos = 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        w_end = pos + fan_in * fan_out
        b_end = w_end + fan_out
        out.append((pos, w_end, b_end, fan_out, fan_in))
        pos = b_end
    return tuple(out)


@dataclass(frozen=True, eq=False)
class Mlp:
    spec: MlpSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        params = np.ascontiguousarray(self.params, dtype=np.float64)
        if params.shape != (self.spec.n_params,):
            raise ShapeError(
                f"params length {params.shape} does not match spec ({self.spec.n_params},)"
            )
        object.__setattr__(self, "params", params)

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        p = self.params if params is None else params
        return [
            (p[ws:we].reshape(fo, fi), p[we:be])
            for ws, we, be, fo, fi in _offsets(self.spec.layer_dims)
        ]

    def with_params(self, params: np.ndarray) -> "Mlp":
        return Mlp(self.spec, params)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)


def mlp_init(spec: MlpSpec) -> Mlp:
    """Glorot-uniform weights, zero biases, reproducible from ``spec.init_seed``."""
    rng = np.random.default_rng(spec.init_seed % 2**64)
    params = np.zeros(spec.n_params)
    for ws, we, _be, fo, fi in _offsets(spec.layer_dims):
        limit = np.sqrt(6.0 / (fi + fo))
        params[ws:we] = rng.uniform(-limit, limit, size=fo * fi)
    return Mlp(spec, params)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_deriv(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    return (z > 0.0).astype(np.float64)


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != dim:
        raise ShapeError(f"{what} has shape {x.shape}, expected (..., {dim})")
    return xb, single


def _forward_cache(net: Mlp, xb: np.ndarray, params: np.ndarray | None = None):
    act = net.spec.activation
    layers = net.layers(params)
    zs, hs = [], [xb]
    h = xb
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        if i < len(layers) - 1:
            zs.append(z)
            h = _act(act, z)
            hs.append(h)
        else:
            h = z
    return h, zs, hs


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(x, net.spec.input_dim, "input")
    out, _, _ = _forward_cache(net, xb)
    return out[0] if single else out


def mlp_backward(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * net(x))`` w.r.t. the flat params and the input."""
    xb, single = _as_batch(x, net.spec.input_dim, "input")
    ub, _ = _as_batch(upstream, net.spec.output_dim, "upstream")
    if ub.shape[0] != xb.shape[0]:
        raise ShapeError(f"upstream batch {ub.shape[0]} != input batch {xb.shape[0]}")
    _, zs, hs = _forward_cache(net, xb)
    grads, delta = _backprop(net, zs, hs, ub)
    return grads, (delta[0] if single else delta)


def _backprop(net: Mlp, zs, hs, ub: np.ndarray, need_input: bool = True):
    layers = net.layers()
    offs = _offsets(net.spec.layer_dims)
    grads = np.empty_like(net.params)
    delta = ub
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        ws, we, be, _, _ = offs[i]
        grads[ws:we] = (delta.T @ hs[i]).ravel()
        grads[we:be] = delta.sum(axis=0)
        if i == 0 and not need_input:
            return grads, None
        delta = delta @ W
        if i > 0:
            delta = delta * _act_deriv(net.spec.activation, zs[i - 1], hs[i])
    return grads, delta


def forward_with_cache(net: Mlp, xb: np.ndarray):
    """Batched forward returning ``(output, cache)`` for a later ``backward_from_cache``."""
    out, zs, hs = _forward_cache(net, xb)
    return out, (zs, hs)


def backward_from_cache(net: Mlp, cache, upstream: np.ndarray) -> np.ndarray:
    """Parameter gradient only (input gradient skipped)."""
    zs, hs = cache
    return _backprop(net, zs, hs, upstream, need_input=False)[0]


def mlp_jvp(net: Mlp, x: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Directional derivative of ``net(x)`` along a parameter-space ``tangent``."""
    xb, single = _as_batch(x, net.spec.input_dim, "input")
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.shape != net.params.shape:
        raise ShapeError(f"tangent shape {tangent.shape} != params shape {net.params.shape}")
    layers = net.layers()
    dlayers = net.layers(tangent)
    act = net.spec.activation
    h, dh = xb, np.zeros_like(xb)
    for i, ((W, b), (dW, db)) in enumerate(zip(layers, dlayers)):
        z = h @ W.T + b
        dz = h @ dW.T + dh @ W.T + db
        if i < len(layers) - 1:
            h = _act(act, z)
            dh = dz * _act_deriv(act, z, h)
        else:
            h, dh = z, dz
    return dh[0] if single else dh


# ---------------------------------------------------------------------------
# Adaptive-moment optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OptState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0 or self.eps_stab <= 0:
            raise ConfigError("lr and eps_stab must be positive")

    @classmethod
    def zeros(cls, n: int, **hyper) -> "OptState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)


def adam_update(params: np.ndarray, grads: np.ndarray, state: OptState) -> tuple[np.ndarray, OptState]:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ShapeError(f"grads shape {grads.shape} != params shape {params.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise NumericError("non-finite gradient", index=int(np.flatnonzero(bad)[0]))
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_stab)
    new_state = OptState(m, v, t, state.lr, state.beta1, state.beta2, state.eps_stab)
    return new_params, new_state


def adam_step(net: Mlp, grads: np.ndarray, state: OptState) -> tuple[Mlp, OptState]:
    params, state = adam_update(net.params, grads, state)
    return net.with_params(params), state


# ---------------------------------------------------------------------------
# Member-stacked evaluation (ensembles share one spec)
# ---------------------------------------------------------------------------


class StackedMlp:
    """Evaluates K same-spec networks on one input batch in a single pass."""

    def __init__(self, nets: list[Mlp]):
        if not nets:
            raise ConfigError("cannot stack zero networks")
        spec = nets[0].spec
        if any(n.spec.layer_dims != spec.layer_dims or n.spec.activation != spec.activation for n in nets):
            raise ConfigError("stacked networks must share layer sizes and activation")
        self.activation = spec.activation
        self.input_dim = spec.input_dim
        per_net = [n.layers() for n in nets]
        self.weights = [np.stack([layers[i][0] for layers in per_net]) for i in range(len(per_net[0]))]
        self.biases = [np.stack([layers[i][1] for layers in per_net])[:, None, :] for i in range(len(per_net[0]))]

    def __call__(self, xb: np.ndarray) -> np.ndarray:
        """``xb`` is ``(N, in)``; returns ``(K, N, out)``."""
        h = xb[None, :, :]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = np.matmul(h, W.transpose(0, 2, 1)) + b
            if i < last:
                h = _act(self.activation, h)
        return h


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

_MLP_HEADER = struct.Struct("<4sBIIBqI")


def mlp_to_bytes(net: Mlp) -> bytes:
    """Layout: magic, version u8, input u32, output u32, activation u8,
    init_seed i64, n_hidden u32, hidden u32 * n_hidden, n_params u64, params f64 LE."""
    s = net.spec
    head = _MLP_HEADER.pack(
        MLP_MAGIC, MLP_VERSION, s.input_dim, s.output_dim,
        ACTIVATIONS.index(s.activation), s.init_seed, len(s.hidden_dims),
    )
    hidden = struct.pack(f"<{len(s.hidden_dims)}I", *s.hidden_dims)
    body = struct.pack("<Q", s.n_params) + net.params.astype("<f8").tobytes()
    return head + hidden + body


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if offset + n > len(buf):
        raise FormatError(f"truncated {what}: need {n} bytes, have {len(buf) - offset}", offset=offset)


def mlp_from_bytes(buf: bytes, offset: int = 0) -> tuple[Mlp, int]:
    _need(buf, offset, _MLP_HEADER.size, "network header")
    magic, version, din, dout, act, seed, nh = _MLP_HEADER.unpack_from(buf, offset)
    if magic != MLP_MAGIC:
        raise FormatError(f"bad network magic {magic!r}", offset=offset)
    if version != MLP_VERSION:
        raise VersionError(f"network format version {version} unsupported (expected {MLP_VERSION})", offset=offset + 4)
    if act >= len(ACTIVATIONS):
        raise FormatError(f"unknown activation code {act}", offset=offset + 13)
    pos = offset + _MLP_HEADER.size
    _need(buf, pos, 4 * nh + 8, "network layer table")
    hidden = struct.unpack_from(f"<{nh}I", buf, pos)
    pos += 4 * nh
    (n_params,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    spec = MlpSpec(din, tuple(hidden), dout, ACTIVATIONS[act], seed)
    if n_params != spec.n_params:
        raise FormatError(f"param count {n_params} disagrees with layer sizes ({spec.n_params})", offset=pos - 8)
    _need(buf, pos, 8 * n_params, "network params")
    params = np.frombuffer(buf, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    return Mlp(spec, params), pos + 8 * n_params
