"""Control-affine toy environments, their exact dynamics, and offline datasets.

Both systems have state ``(position-like, velocity-like)`` and one action:

* ``point_mass``: ``(x, v)``, force input, linear drag, reward = forward progress.
* ``pendulum``: ``(theta, omega)``, torque input, quadratic regulation cost as reward.

A step costs 1 when the magnitude of the next velocity coordinate exceeds
``v_max``. Episodes never terminate early; ``done`` only marks the horizon.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError, VersionError

ENV_KINDS = ("point_mass", "pendulum")
COLLECT_POLICIES = ("uniform_random", "ou_noise")
VELOCITY_INDEX = 1
STATE_DIM = 2
ACTION_DIM = 1


def wrap_angle(theta):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "point_mass"
    dt: float = 0.05
    horizon: int = 400
    process_noise_std: tuple[float, ...] = (0.01, 0.01)
    v_max: float = 1.0
    drag: float = 0.1
    gravity: float = 9.8
    length: float = 1.0
    mass: float = 1.0
    action_low: tuple[float, ...] = (-1.0,)
    action_high: tuple[float, ...] = (1.0,)
    # Overrides the random initial-state distribution when set.
    init_state: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("process_noise_std", "action_low", "action_high"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.init_state is not None:
            object.__setattr__(self, "init_state", tuple(float(v) for v in self.init_state))
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"env kind must be one of {ENV_KINDS}, got {self.kind!r}")
        if not (self.dt > 0 and np.isfinite(self.dt * self.horizon)):
            raise ConfigError("dt must be positive and dt*horizon finite")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigError("horizon must be a positive integer")
        if not self.v_max > 0:
            raise ConfigError("v_max must be positive")
        if len(self.process_noise_std) != STATE_DIM or min(self.process_noise_std) < 0:
            raise ConfigError(f"process_noise_std needs {STATE_DIM} non-negative entries")
        if len(self.action_low) != ACTION_DIM or len(self.action_high) != ACTION_DIM:
            raise ConfigError(f"action bounds need {ACTION_DIM} entries")
        if not np.all(np.array(self.action_low) < np.array(self.action_high)):
            raise ConfigError("action_low must be strictly below action_high")
        if self.init_state is not None and len(self.init_state) != STATE_DIM:
            raise ConfigError(f"init_state needs {STATE_DIM} entries")

    @property
    def state_dim(self) -> int:
        return STATE_DIM

    @property
    def action_dim(self) -> int:
        return ACTION_DIM

    @property
    def low(self) -> np.ndarray:
        return np.array(self.action_low)

    @property
    def high(self) -> np.ndarray:
        return np.array(self.action_high)

    @property
    def angle_dims(self) -> tuple[int, ...]:
        return (0,) if self.kind == "pendulum" else ()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnvState:
    s: np.ndarray
    step_index: int = 0


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    c: float
    s_next: np.ndarray
    done: bool


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def sample_initial_states(spec: EnvSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if spec.init_state is not None:
        return np.tile(np.array(spec.init_state), (n, 1))
    if spec.kind == "point_mass":
        return np.column_stack([np.zeros(n), rng.uniform(-0.1, 0.1, size=n)])
    return np.column_stack([rng.uniform(-np.pi, np.pi, size=n), rng.uniform(-0.5, 0.5, size=n)])


def env_reset(spec: EnvSpec, seed: int) -> EnvState:
    rng = np.random.default_rng(seed)
    return EnvState(sample_initial_states(spec, rng, 1)[0], 0)


def clip_action(spec: EnvSpec, a: np.ndarray) -> np.ndarray:
    return np.clip(a, spec.action_low, spec.action_high)


def step_batch(spec: EnvSpec, S: np.ndarray, A: np.ndarray, noise: np.ndarray | None = None):
    """Advance ``(N, 2)`` states under ``(N, 1)`` actions.

    Returns ``(S_next, reward, cost)``. Actions are clipped to the box first.
    """
    A = clip_action(spec, A)
    a = A[:, 0]
    p, vel = S[:, 0], S[:, 1]
    if spec.kind == "point_mass":
        p_next = p + vel * spec.dt
        v_next = vel + (a - spec.drag * vel) * spec.dt
        reward = vel * spec.dt
    else:
        p_next = p + vel * spec.dt
        accel = -(spec.gravity / spec.length) * np.sin(p) + a / (spec.mass * spec.length**2)
        v_next = vel + accel * spec.dt
        reward = -(p * p + 0.1 * vel * vel + 0.001 * a * a) * spec.dt
    S_next = np.column_stack([p_next, v_next])
    if noise is not None:
        S_next = S_next + noise
    if spec.kind == "pendulum":
        S_next[:, 0] = wrap_angle(S_next[:, 0])
    cost = (np.abs(S_next[:, VELOCITY_INDEX]) > spec.v_max).astype(np.float64)
    return S_next, reward, cost


def draw_noise(spec: EnvSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.normal(size=(n, STATE_DIM)) * np.array(spec.process_noise_std)


def env_step(spec: EnvSpec, state: EnvState, a, rng: np.random.Generator):
    """One step; returns ``(EnvState, reward, cost, done)``."""
    a = np.asarray(a, dtype=np.float64).reshape(1, ACTION_DIM)
    s = np.asarray(state.s, dtype=np.float64)
    if s.shape != (STATE_DIM,):
        raise ShapeError(f"state shape {s.shape}, expected ({STATE_DIM},)")
    S_next, r, c = step_batch(spec, s[None, :], a, draw_noise(spec, rng, 1))
    k = state.step_index + 1
    return EnvState(S_next[0], k), float(r[0]), float(c[0]), k >= spec.horizon


def true_affine_dynamics(spec: EnvSpec, state) -> tuple[np.ndarray, np.ndarray]:
    """Exact drift ``f`` and input matrix ``g`` with ``s' - s = f + g a`` (noise-free, pre-wrap)."""
    s = np.asarray(state.s if isinstance(state, EnvState) else state, dtype=np.float64)
    f, g = TrueDynamics(spec).predict(s)[:2]
    return f, g


class TrueDynamics:
    """Ground-truth model exposing the same ``predict`` contract as a learned ensemble."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def predict(self, s: np.ndarray):
        s = np.asarray(s, dtype=np.float64)
        single = s.ndim == 1
        S = s[None, :] if single else s
        spec = self.spec
        vel = S[:, 1]
        if spec.kind == "point_mass":
            f = np.column_stack([vel * spec.dt, -spec.drag * vel * spec.dt])
            gain = spec.dt
        else:
            f = np.column_stack([vel * spec.dt, -(spec.gravity / spec.length) * np.sin(S[:, 0]) * spec.dt])
            gain = spec.dt / (spec.mass * spec.length**2)
        g = np.zeros((S.shape[0], STATE_DIM, ACTION_DIM))
        g[:, 1, 0] = gain
        sigma = np.zeros_like(f)
        if single:
            return f[0], g[0], sigma[0]
        return f, g, sigma


def state_delta(spec: EnvSpec, s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """``s_next - s`` with angular coordinates taken as the shortest signed arc."""
    d = np.asarray(s_next, dtype=np.float64) - np.asarray(s, dtype=np.float64)
    for i in spec.angle_dims:
        d[..., i] = wrap_angle(d[..., i])
    return d


def apply_delta(spec: EnvSpec, s: np.ndarray, delta: np.ndarray) -> np.ndarray:
    out = np.asarray(s, dtype=np.float64) + delta
    for i in spec.angle_dims:
        out[..., i] = wrap_angle(out[..., i])
    return out


def velocity_barriers(spec: EnvSpec, alpha: float = 0.1):
    """The two half-spaces ``|velocity| <= v_max`` as affine barriers."""
    from .safety import BarrierSpec

    return [
        BarrierSpec(w=(0.0, -1.0), b=spec.v_max, alpha=alpha, name="v_upper"),
        BarrierSpec(w=(0.0, 1.0), b=spec.v_max, alpha=alpha, name="v_lower"),
    ]


# ---------------------------------------------------------------------------
# Offline data
# ---------------------------------------------------------------------------


@dataclass
class OfflineDataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    c: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.r)
        for name in ("s", "a", "c", "s_next", "done"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"dataset column {name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.r)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), float(self.c[i]), self.s_next[i], bool(self.done[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx: np.ndarray) -> "OfflineDataset":
        return OfflineDataset(
            self.s[idx], self.a[idx], self.r[idx], self.c[idx], self.s_next[idx], self.done[idx], dict(self.meta)
        )

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    def env_spec(self) -> EnvSpec | None:
        env = self.meta.get("env")
        return EnvSpec(**env) if env else None

    def deltas(self) -> np.ndarray:
        spec = self.env_spec()
        if spec is None:
            return self.s_next - self.s
        return state_delta(spec, self.s, self.s_next)


def collect_offline(
    spec: EnvSpec,
    policy: str = "uniform_random",
    n_transitions: int = 100_000,
    seed: int = 0,
    ou_theta: float = 0.05,
    ou_sigma: float = 0.6,
) -> OfflineDataset:
    """Roll whole episodes with an exploration policy until ``n_transitions`` are gathered.

    Episodes run side by side and are stored episode-major; the last episode is
    cut short when the budget is reached. ``ou_noise`` drives the action with a
    mean-reverting process of stationary std ``ou_sigma`` (fraction of the half
    range) and per-step reversion rate ``ou_theta``.
    """
    if policy not in COLLECT_POLICIES:
        raise ConfigError(f"collection policy must be one of {COLLECT_POLICIES}, got {policy!r}")
    if n_transitions < 0:
        raise ConfigError("n_transitions must be non-negative")
    meta = {"env": spec.to_dict(), "seed": int(seed), "policy": policy, "ou_theta": ou_theta, "ou_sigma": ou_sigma}
    rng = np.random.default_rng(seed)
    n_ep = -(-n_transitions // spec.horizon)
    T = spec.horizon
    S_all = np.empty((T, n_ep, STATE_DIM))
    A_all = np.empty((T, n_ep, ACTION_DIM))
    R_all = np.empty((T, n_ep))
    C_all = np.empty((T, n_ep))
    N_all = np.empty((T, n_ep, STATE_DIM))
    S = sample_initial_states(spec, rng, n_ep)
    mid = (spec.high + spec.low) / 2.0
    half = (spec.high - spec.low) / 2.0
    ou = np.zeros((n_ep, ACTION_DIM))
    for t in range(T):
        if policy == "uniform_random":
            A = rng.uniform(spec.low, spec.high, size=(n_ep, ACTION_DIM))
        else:
            ou = ou - ou_theta * ou + ou_sigma * np.sqrt(2.0 * ou_theta) * rng.normal(size=ou.shape)
            A = mid + half * np.clip(ou, -1.0, 1.0)
        S_next, r, c = step_batch(spec, S, A, draw_noise(spec, rng, n_ep))
        S_all[t], A_all[t], R_all[t], C_all[t], N_all[t] = S, A, r, c, S_next
        S = S_next
    done = np.zeros((T, n_ep))
    done[-1] = 1.0

    def flat(x):
        return np.swapaxes(x, 0, 1).reshape(n_ep * T, *x.shape[2:])[:n_transitions]

    return OfflineDataset(flat(S_all), flat(A_all), flat(R_all), flat(C_all), flat(N_all), flat(done), meta)


DATASET_MAGIC = b"CAPD"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sBBIIQqI")


def dataset_save(ds: OfflineDataset, path: str | Path) -> None:
    """Layout (little-endian): magic, version u8, env-kind u8, |S| u32, |A| u32,
    count u64, seed i64, metadata length u32, metadata UTF-8 JSON, then one row of
    f64 per transition in field order (s, a, r, c, s_next, done)."""
    env = ds.meta.get("env") or {}
    kind = ENV_KINDS.index(env.get("kind", ENV_KINDS[0]))
    meta = json.dumps(ds.meta, sort_keys=True).encode("utf-8")
    head = _DS_HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, kind, ds.state_dim, ds.action_dim, len(ds), int(ds.meta.get("seed", 0)), len(meta)
    )
    rows = np.column_stack([ds.s, ds.a, ds.r, ds.c, ds.s_next, ds.done]).astype("<f8")
    Path(path).write_bytes(head + meta + rows.tobytes())


def dataset_load(path: str | Path) -> OfflineDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _DS_HEADER.size:
        raise FormatError(f"truncated dataset header in {path}", offset=len(buf))
    magic, version, kind, ds_s, ds_a, count, _seed, meta_len = _DS_HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path} is not a dataset file (magic {magic!r})", offset=0)
    if version != DATASET_VERSION:
        raise VersionError(f"dataset version {version} unsupported (expected {DATASET_VERSION})", offset=4)
    if kind >= len(ENV_KINDS):
        raise FormatError(f"unknown env kind code {kind}", offset=5)
    pos = _DS_HEADER.size
    if pos + meta_len > len(buf):
        raise FormatError("truncated dataset metadata", offset=len(buf))
    try:
        meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt dataset metadata: {exc}", offset=pos) from exc
    pos += meta_len
    width = 2 * ds_s + ds_a + 3
    need = 8 * width * count
    if pos + need > len(buf):
        complete = (len(buf) - pos) // (8 * width)
        raise FormatError(
            f"truncated transition block: {count} records declared, {complete} complete",
            offset=pos + complete * 8 * width,
        )
    if pos + need != len(buf):
        raise FormatError("trailing bytes after transition block", offset=pos + need)
    rows = np.frombuffer(buf, dtype="<f8", count=width * count, offset=pos).astype(np.float64).reshape(count, width)
    cols = np.cumsum([0, ds_s, ds_a, 1, 1, ds_s, 1])
    return OfflineDataset(
        rows[:, cols[0] : cols[1]],
        rows[:, cols[1] : cols[2]],
        rows[:, cols[2]],
        rows[:, cols[3]],
        rows[:, cols[4] : cols[5]],
        rows[:, cols[5]],
        meta,
    )


def require_nonempty(ds: OfflineDataset) -> None:
    if len(ds) == 0:
        raise DataError("dataset is empty; collect transitions before training")
