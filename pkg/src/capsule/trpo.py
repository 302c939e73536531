"""Trust-region policy optimization with a diagonal Gaussian policy."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError, VersionError
from .nn import (
    Mlp,
    MlpSpec,
    OptState,
    adam_update,
    backward_from_cache,
    forward_with_cache,
    mlp_backward,
    mlp_forward,
    mlp_from_bytes,
    mlp_init,
    mlp_jvp,
    mlp_to_bytes,
)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    mean_net: Mlp
    log_std: np.ndarray

    def __post_init__(self):
        ls = np.asarray(self.log_std, dtype=np.float64).reshape(-1)
        if ls.shape != (self.mean_net.spec.output_dim,):
            raise ShapeError(f"log_std has {ls.size} entries, policy outputs {self.mean_net.spec.output_dim}")
        object.__setattr__(self, "log_std", np.clip(ls, LOG_STD_MIN, LOG_STD_MAX))

    @property
    def state_dim(self) -> int:
        return self.mean_net.spec.input_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.spec.output_dim

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mean_net.params, self.log_std])

    def with_flat(self, theta: np.ndarray) -> "GaussianPolicy":
        n = self.mean_net.spec.n_params
        return GaussianPolicy(self.mean_net.with_params(theta[:n]), theta[n:])

    def mean(self, s) -> np.ndarray:
        return mlp_forward(self.mean_net, s)


def make_policy(state_dim: int, action_dim: int, hidden_dims=(64, 64), activation="tanh",
                init_log_std: float = 0.0, seed: int = 0) -> GaussianPolicy:
    net = mlp_init(MlpSpec(state_dim, tuple(hidden_dims), action_dim, activation, seed))
    return GaussianPolicy(net, np.full(action_dim, init_log_std))


def gaussian_log_prob(mu, log_std, a) -> np.ndarray:
    z = (a - mu) * np.exp(-log_std)
    return -np.sum(0.5 * z * z + log_std + _HALF_LOG_2PI, axis=-1)


def log_prob(p: GaussianPolicy, s, a) -> np.ndarray:
    return gaussian_log_prob(p.mean(s), p.log_std, np.asarray(a, dtype=np.float64))


def policy_sample(p: GaussianPolicy, s, rng: np.random.Generator):
    """Draw ``a = mean(s) + exp(log_std) * z``; works for one state or a batch."""
    mu = p.mean(s)
    a = mu + np.exp(p.log_std) * rng.standard_normal(mu.shape)
    return a, gaussian_log_prob(mu, p.log_std, a)


def _kl_terms(mu_o, ls_o, mu_n, ls_n) -> np.ndarray:
    var_ratio = np.exp(2.0 * (ls_o - ls_n))
    sq = (mu_o - mu_n) ** 2 * np.exp(-2.0 * ls_n)
    return np.sum(ls_n - ls_o + 0.5 * (var_ratio + sq) - 0.5, axis=-1)


def mean_kl(p_old: GaussianPolicy, p_new: GaussianPolicy, states) -> float:
    """Average closed-form KL(old || new) over ``states``."""
    S = np.atleast_2d(states)
    return float(np.mean(_kl_terms(p_old.mean(S), p_old.log_std, p_new.mean(S), p_new.log_std)))


def kl_grad(p_old: GaussianPolicy, p_new: GaussianPolicy, states) -> np.ndarray:
    """Gradient of ``mean_kl(p_old, p_new)`` with respect to the flat parameters of ``p_new``."""
    S = np.atleast_2d(states)
    n = len(S)
    mu_o, mu_n = p_old.mean(S), p_new.mean(S)
    inv_var = np.exp(-2.0 * p_new.log_std)
    g_mean, _ = mlp_backward(p_new.mean_net, S, (mu_n - mu_o) * inv_var / n)
    sq = np.exp(2.0 * p_old.log_std) + (mu_o - mu_n) ** 2
    g_ls = np.mean(1.0 - sq * inv_var, axis=0)
    return np.concatenate([g_mean, g_ls])


def fisher_vector_product(p: GaussianPolicy, states, v: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """KL Hessian at ``p`` times ``v``, computed exactly as ``J^T diag(1/sigma^2) J v``."""
    S = np.atleast_2d(states)
    n_mean = p.mean_net.spec.n_params
    jv = mlp_jvp(p.mean_net, S, v[:n_mean])
    fv_mean, _ = mlp_backward(p.mean_net, S, jv * np.exp(-2.0 * p.log_std) / len(S))
    return np.concatenate([fv_mean, 2.0 * v[n_mean:]]) + damping * v


def conjugate_gradient(matvec, b: np.ndarray, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < tol:
            break
        Ad = matvec(d)
        alpha = rr / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        rr_new = r @ r
        d = r + (rr_new / rr) * d
        rr = rr_new
    return x


# ---------------------------------------------------------------------------
# Value function
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ValueNet:
    net: Mlp
    opt: OptState | None = None

    def __call__(self, s) -> np.ndarray:
        out = mlp_forward(self.net, s)
        return out[..., 0]


def make_value(state_dim: int, hidden_dims=(64, 64), activation="tanh", seed: int = 0) -> ValueNet:
    return ValueNet(mlp_init(MlpSpec(state_dim, tuple(hidden_dims), 1, activation, seed)))


def value_fit(v: ValueNet, states, targets, epochs: int, batch_size: int, lr: float,
              rng: np.random.Generator) -> tuple[ValueNet, float]:
    """Mini-batch squared-error regression; returns the net and its final full-batch loss."""
    S = np.atleast_2d(states)
    T = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    n = len(S)
    bs = min(batch_size, n)
    opt = v.opt if v.opt is not None else OptState.zeros(v.net.spec.n_params, lr=lr)
    net, params = v.net, v.net.params
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            out, cache = forward_with_cache(net, S[idx])
            params, opt = adam_update(params, backward_from_cache(net, cache, 2.0 * (out - T[idx]) / bs), opt)
            net = net.with_params(params)
    resid = mlp_forward(net, S) - T
    return ValueNet(net, opt), float(np.mean(resid * resid))


# ---------------------------------------------------------------------------
# Trajectory batches and advantage estimation
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryBatch:
    """Flat on-policy batch. Episodes are contiguous; a segment boundary carries done or truncated."""

    states: np.ndarray
    actions_rl: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    logp: np.ndarray
    values: np.ndarray | None = None
    next_values: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.states)
        for name in ("actions_rl", "actions", "rewards", "costs", "dones", "truncated", "logp"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"batch field {name} has length {len(getattr(self, name))}, expected {n}")
        for name in ("values", "next_values", "advantages", "returns"):
            x = getattr(self, name)
            if x is not None and len(x) != n:
                raise ShapeError(f"batch field {name} has length {len(x)}, expected {n}")

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def concat(cls, parts: list["TrajectoryBatch"]) -> "TrajectoryBatch":
        def cat(name):
            xs = [getattr(b, name) for b in parts]
            return None if any(x is None for x in xs) else np.concatenate(xs)

        names = [f for f in cls.__dataclass_fields__]
        return cls(**{f: cat(f) for f in names})


def compute_gae(batch: TrajectoryBatch, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets.

    ``dones`` stop bootstrapping; ``truncated`` keeps the bootstrap from
    ``next_values`` but stops the recursion from crossing into the next segment.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ConfigError("gamma and lambda must lie in [0, 1]")
    if batch.values is None or batch.next_values is None:
        raise DataError("value predictions must be attached before computing advantages")
    r = np.asarray(batch.rewards, dtype=np.float64)
    live = 1.0 - np.asarray(batch.dones, dtype=np.float64)
    cont = live * (1.0 - np.asarray(batch.truncated, dtype=np.float64))
    delta = r + gamma * batch.next_values * live - batch.values
    adv = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = delta[t] + gamma * lam * cont[t] * acc
        adv[t] = acc
    return adv, adv + batch.values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


# ---------------------------------------------------------------------------
# Trust-region update
# ---------------------------------------------------------------------------


@dataclass
class TrpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    delta_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_iters: int = 10
    kl_accept_factor: float = 1.5
    value_epochs: int = 40
    value_batch_size: int = 128
    value_lr: float = 1e-3
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    init_log_std: float = 0.0
    steps_per_epoch: int = 4000

    def __post_init__(self):
        self.hidden_dims = tuple(self.hidden_dims)
        if self.delta_kl <= 0 or self.cg_damping < 0:
            raise ConfigError("delta_kl must be positive and cg_damping non-negative")
        if self.cg_iters < 1 or self.backtrack_iters < 1 or self.steps_per_epoch < 1:
            raise ConfigError("cg_iters, backtrack_iters and steps_per_epoch must be positive")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ConfigError("gamma and lam must lie in [0, 1]")


@dataclass
class UpdateDiagnostics:
    status: str
    accepted: bool = False
    kl: float = 0.0
    surrogate_gain: float = 0.0
    backtracks: int = 0
    grad_norm: float = 0.0
    value_loss: float = float("nan")
    extras: dict = field(default_factory=dict)


def _surrogate(p: GaussianPolicy, S, A, logp_old, adv) -> float:
    return float(np.mean(np.exp(log_prob(p, S, A) - logp_old) * adv))


def surrogate_grad(p: GaussianPolicy, S, A, logp_old, adv) -> np.ndarray:
    """Gradient of the importance-weighted surrogate with respect to the flat policy parameters."""
    mu = p.mean(S)
    inv_var = np.exp(-2.0 * p.log_std)
    w = np.exp(log_prob(p, S, A) - logp_old) * adv / len(S)
    diff = A - mu
    g_mean, _ = mlp_backward(p.mean_net, S, w[:, None] * diff * inv_var)
    g_ls = np.sum(w[:, None] * (diff * diff * inv_var - 1.0), axis=0)
    return np.concatenate([g_mean, g_ls])


def trpo_update(p: GaussianPolicy, v: ValueNet, batch: TrajectoryBatch, delta_kl: float,
                cfg: TrpoConfig, rng: np.random.Generator) -> tuple[GaussianPolicy, ValueNet, UpdateDiagnostics]:
    """One natural-gradient step on the policy followed by value regression."""
    if batch.advantages is None or batch.returns is None:
        raise DataError("advantages must be computed before the policy update")
    S = np.atleast_2d(batch.states)
    A = np.atleast_2d(batch.actions_rl)
    logp_old = np.asarray(batch.logp, dtype=np.float64)
    adv = normalize_advantages(np.asarray(batch.advantages, dtype=np.float64))

    new_p, diag = p, UpdateDiagnostics(status="rejected")
    g = surrogate_grad(p, S, A, logp_old, adv)
    diag.grad_norm = float(np.linalg.norm(g)) if np.all(np.isfinite(g)) else float("nan")
    if not np.all(np.isfinite(g)):
        diag.status = "non_finite"
    elif diag.grad_norm < 1e-12:
        diag.status = "zero_gradient"
    else:
        x = conjugate_gradient(lambda d: fisher_vector_product(p, S, d, cfg.cg_damping), g, cfg.cg_iters)
        shs = float(x @ fisher_vector_product(p, S, x, cfg.cg_damping))
        if not np.isfinite(shs) or shs <= 0:
            diag.status = "non_finite"
        else:
            step = math.sqrt(2.0 * delta_kl / shs) * x
            theta = p.flat()
            base = _surrogate(p, S, A, logp_old, adv)
            for i in range(cfg.backtrack_iters):
                cand = p.with_flat(theta + 0.5**i * step)
                gain = _surrogate(cand, S, A, logp_old, adv) - base
                kl = mean_kl(p, cand, S)
                if np.isfinite(gain) and np.isfinite(kl) and gain > 0 and kl <= cfg.kl_accept_factor * delta_kl:
                    new_p = cand
                    diag.status, diag.accepted = "accepted", True
                    diag.kl, diag.surrogate_gain, diag.backtracks = kl, gain, i
                    break
            else:
                diag.backtracks = cfg.backtrack_iters

    new_v, diag.value_loss = value_fit(v, S, batch.returns, cfg.value_epochs, cfg.value_batch_size,
                                       cfg.value_lr, rng)
    return new_p, new_v, diag


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

POLICY_MAGIC = b"CAPP"
VALUE_MAGIC = b"CAPV"
CKPT_VERSION = 1


def _check_head(buf: bytes, magic: bytes) -> None:
    if len(buf) < 5:
        raise FormatError("truncated checkpoint header", offset=len(buf))
    got, version = struct.unpack_from("<4sB", buf, 0)
    if got != magic:
        raise FormatError(f"expected magic {magic!r}, found {got!r}", offset=0)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} unsupported", offset=4)


def policy_to_bytes(p: GaussianPolicy) -> bytes:
    return (struct.pack("<4sB", POLICY_MAGIC, CKPT_VERSION) + mlp_to_bytes(p.mean_net)
            + struct.pack("<I", p.action_dim) + p.log_std.astype("<f8").tobytes())


def policy_from_bytes(buf: bytes) -> GaussianPolicy:
    _check_head(buf, POLICY_MAGIC)
    net, pos = mlp_from_bytes(buf, 5)
    if pos + 4 > len(buf):
        raise FormatError("truncated log-std block", offset=pos)
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + 8 * n != len(buf):
        raise FormatError("log-std block has the wrong length", offset=pos)
    return GaussianPolicy(net, np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64))


def value_to_bytes(v: ValueNet) -> bytes:
    return struct.pack("<4sB", VALUE_MAGIC, CKPT_VERSION) + mlp_to_bytes(v.net)


def value_from_bytes(buf: bytes) -> ValueNet:
    _check_head(buf, VALUE_MAGIC)
    net, pos = mlp_from_bytes(buf, 5)
    if pos != len(buf):
        raise FormatError("trailing bytes after value network", offset=pos)
    return ValueNet(net)


def save_policy(p: GaussianPolicy, path) -> None:
    Path(path).write_bytes(policy_to_bytes(p))


def load_policy(path) -> GaussianPolicy:
    return policy_from_bytes(Path(path).read_bytes())


def save_value(v: ValueNet, path) -> None:
    Path(path).write_bytes(value_to_bytes(v))


def load_value(path) -> ValueNet:
    return value_from_bytes(Path(path).read_bytes())
