"""Learned corrective prior that imitates past safety-filter corrections."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, VersionError
from .nn import (
    Mlp,
    MlpSpec,
    OptState,
    adam_update,
    backward_from_cache,
    forward_with_cache,
    mlp_forward,
    mlp_from_bytes,
    mlp_init,
    mlp_to_bytes,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CompensatorNet:
    """Deterministic, bounded map ``s -> c_max * tanh(net(s))``."""

    net: Mlp
    c_max: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c_max, dtype=np.float64)
        if c.shape != (self.net.spec.output_dim,) or np.any(c <= 0):
            raise ConfigError("c_max needs one positive entry per action dimension")
        object.__setattr__(self, "c_max", c)


def make_compensator(state_dim: int, action_low, action_high, hidden_dims=(64, 64), activation="tanh",
                     seed: int = 0, range_fraction: float = 0.2) -> CompensatorNet:
    """Fresh compensator. The output layer starts at zero so the initial correction is 0."""
    lo, hi = np.asarray(action_low, dtype=np.float64), np.asarray(action_high, dtype=np.float64)
    net = mlp_init(MlpSpec(state_dim, tuple(hidden_dims), len(lo), activation, seed))
    params = net.params.copy()
    n_last = net.spec.layer_dims[-2] * len(lo) + len(lo)
    params[-n_last:] = 0.0
    return CompensatorNet(net.with_params(params), range_fraction * (hi - lo))


def comp_predict(c: CompensatorNet, s) -> np.ndarray:
    return c.c_max * np.tanh(mlp_forward(c.net, s))


class CompBuffer:
    """Fixed-capacity ring of ``(state, target correction)`` pairs."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity <= 0:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self._s = np.zeros((capacity, state_dim))
        self._t = np.zeros((capacity, action_dim))
        self._next = 0
        self._size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self._size

    def add(self, states, targets) -> None:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if states.shape[0] != targets.shape[0]:
            raise ShapeError("states and targets must have the same number of rows")
        for s, t in zip(states, targets):
            self._s[self._next] = s
            self._t[self._next] = t
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
        self.total_added += len(states)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Contents oldest-first."""
        if self._size < self.capacity:
            return self._s[: self._size].copy(), self._t[: self._size].copy()
        order = np.r_[self._next : self.capacity, 0 : self._next]
        return self._s[order], self._t[order]


@dataclass
class CompensatorConfig:
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    range_fraction: float = 0.2
    capacity: int = 50_000
    batch_size: int = 64
    epochs: int = 10
    lr: float = 1e-3

    def __post_init__(self):
        self.hidden_dims = tuple(self.hidden_dims)
        if not 0.0 < self.range_fraction <= 1.0:
            raise ConfigError("range_fraction must lie in (0, 1]")
        if self.capacity < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("capacity and batch_size must be positive, epochs non-negative")


def comp_mse(c: CompensatorNet, states, targets) -> float:
    d = comp_predict(c, states) - targets
    return float(np.mean(np.sum(d * d, axis=1)))


def comp_train(c: CompensatorNet, buf: CompBuffer, epochs: int, cfg: CompensatorConfig,
               rng: np.random.Generator, history: list | None = None) -> CompensatorNet:
    """Mean-squared-error regression of the compensator output onto buffered targets."""
    if len(buf) == 0:
        log.warning("compensator buffer is empty; skipping training")
        return c
    S, T = buf.arrays()
    n = len(S)
    bs = min(cfg.batch_size, n)
    params = c.net.params
    state = OptState.zeros(len(params), lr=cfg.lr)
    net = c.net
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            raw, cache = forward_with_cache(net, S[idx])
            th = np.tanh(raw)
            err = c.c_max * th - T[idx]
            upstream = 2.0 * err * c.c_max * (1.0 - th * th) / len(idx)
            params, state = adam_update(params, backward_from_cache(net, cache, upstream), state)
            net = net.with_params(params)
        if history is not None:
            history.append(comp_mse(CompensatorNet(net, c.c_max), S, T))
    return CompensatorNet(net, c.c_max)


COMP_MAGIC = b"CAPC"
COMP_VERSION = 1


def compensator_to_bytes(c: CompensatorNet) -> bytes:
    """Magic, version u8, network blob, |A| u32, c_max f64 LE."""
    return (struct.pack("<4sB", COMP_MAGIC, COMP_VERSION) + mlp_to_bytes(c.net)
            + struct.pack("<I", len(c.c_max)) + c.c_max.astype("<f8").tobytes())


def compensator_from_bytes(buf: bytes) -> CompensatorNet:
    if len(buf) < 5:
        raise FormatError("truncated compensator header", offset=len(buf))
    magic, version = struct.unpack_from("<4sB", buf, 0)
    if magic != COMP_MAGIC:
        raise FormatError(f"expected compensator magic {COMP_MAGIC!r}, found {magic!r}", offset=0)
    if version != COMP_VERSION:
        raise VersionError(f"compensator format version {version} unsupported", offset=4)
    net, pos = mlp_from_bytes(buf, 5)
    if pos + 4 > len(buf):
        raise FormatError("truncated compensator range block", offset=pos)
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + 8 * n != len(buf):
        raise FormatError("compensator range block has the wrong length", offset=pos)
    return CompensatorNet(net, np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64))


def save_compensator(c: CompensatorNet, path) -> None:
    Path(path).write_bytes(compensator_to_bytes(c))


def load_compensator(path) -> CompensatorNet:
    return compensator_from_bytes(Path(path).read_bytes())
