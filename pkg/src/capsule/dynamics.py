"""Heteroscedastic control-affine ensembles for offline dynamics learning.

Each member predicts the state change ``Δs ~ N(f(s) + g(s) a, diag σ(s)²)``:
the mean is affine in the action and the noise scale depends on the state only.
Training happens in normalized coordinates; every public prediction is in raw
units. A fully nonlinear ensemble (mean depends jointly on ``(s, a)``) is kept
alongside as a reference for how much the affine restriction costs.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
import time
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .envs import OfflineDataset, require_nonempty
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError, VersionError
from .nn import (
    Mlp,
    MlpSpec,
    OptState,
    StackedMlp,
    adam_update,
    backward_from_cache,
    forward_with_cache,
    mlp_forward,
    mlp_from_bytes,
    mlp_init,
    mlp_to_bytes,
)

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
LOGSIG_MIN = -5.0
LOGSIG_MAX = 2.0
# Weight on the log-variance term. 0.5 is the exact Gaussian NLL (minus a
# constant) and yields calibrated sigma; 1.0 gives sigma = true std / sqrt(2).
LOGVAR_WEIGHT = 0.5


@dataclass(frozen=True, eq=False)
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    # 0 hides a state coordinate from the networks (e.g. an unbounded position).
    input_mask: np.ndarray = None

    def __post_init__(self):
        for name in ("state_mean", "state_std", "delta_mean", "delta_std", "action_low", "action_high"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        mask = np.ones_like(self.state_mean) if self.input_mask is None else np.asarray(self.input_mask, dtype=np.float64)
        object.__setattr__(self, "input_mask", mask)

    @property
    def action_mid(self) -> np.ndarray:
        return (self.action_high + self.action_low) / 2.0

    @property
    def action_half(self) -> np.ndarray:
        return (self.action_high - self.action_low) / 2.0

    def norm_state(self, s):
        return (s - self.state_mean) / self.state_std * self.input_mask

    def denorm_state(self, z):
        """Inverse of ``norm_state`` on the unmasked coordinates."""
        return z * self.state_std + self.state_mean

    def norm_action(self, a):
        return (a - self.action_mid) / self.action_half

    def norm_delta(self, d):
        return (d - self.delta_mean) / self.delta_std

    def denorm_delta(self, z):
        return z * self.delta_std + self.delta_mean

    def to_array(self) -> np.ndarray:
        return np.concatenate([
            self.state_mean, self.state_std, self.delta_mean, self.delta_std,
            self.action_low, self.action_high, self.input_mask,
        ])

    @classmethod
    def from_array(cls, arr: np.ndarray, n_s: int, n_a: int) -> "Normalizer":
        cuts = np.cumsum([0, n_s, n_s, n_s, n_s, n_a, n_a, n_s])
        return cls(*(arr[cuts[i] : cuts[i + 1]] for i in range(7)))


def fit_normalizer(
    dataset: OfflineDataset,
    action_low=None,
    action_high=None,
    ignore_state_dims=(),
) -> Normalizer:
    require_nonempty(dataset)
    deltas = dataset.deltas()
    if action_low is None:
        env = dataset.env_spec()
        action_low = env.action_low if env else dataset.a.min(axis=0)
        action_high = env.action_high if env else dataset.a.max(axis=0)
    mask = np.ones(dataset.state_dim)
    mask[list(ignore_state_dims)] = 0.0
    return Normalizer(
        dataset.s.mean(axis=0),
        np.maximum(dataset.s.std(axis=0), STD_FLOOR),
        deltas.mean(axis=0),
        np.maximum(deltas.std(axis=0), STD_FLOOR),
        np.asarray(action_low, dtype=np.float64),
        np.asarray(action_high, dtype=np.float64),
        mask,
    )


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(x)))[0])
        raise NumericError(f"non-finite {what}", index=bad)


def _batch2(x, dim: int, what: str):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != dim:
        raise ShapeError(f"{what} has shape {x.shape}, expected (..., {dim})")
    return xb, single


@dataclass(frozen=True, eq=False)
class ControlAffineModel:
    f_net: Mlp
    g_net: Mlp
    logsig_net: Mlp
    normalizer: Normalizer
    logsig_min: float = LOGSIG_MIN
    logsig_max: float = LOGSIG_MAX

    @property
    def state_dim(self) -> int:
        return self.f_net.spec.output_dim

    @property
    def action_dim(self) -> int:
        return self.g_net.spec.output_dim // self.state_dim

    def affine_terms(self, s):
        """Raw-unit ``(f, g, sigma)``; ``f`` is ``(..., S)``, ``g`` is ``(..., S, A)``."""
        S, single = _batch2(s, self.state_dim, "state")
        _check_finite(S, "state")
        nz = self.normalizer
        sn = nz.norm_state(S)
        fn = mlp_forward(self.f_net, sn)
        Gn = mlp_forward(self.g_net, sn).reshape(-1, self.state_dim, self.action_dim)
        logsig = np.clip(mlp_forward(self.logsig_net, sn), self.logsig_min, self.logsig_max)
        f, g, sigma = _to_raw(nz, fn, Gn, logsig)
        if single:
            return f[0], g[0], sigma[0]
        return f, g, sigma


def _to_raw(nz: Normalizer, fn, Gn, logsig):
    shift = nz.action_mid / nz.action_half
    f = nz.delta_mean + nz.delta_std * (fn - Gn @ shift)
    g = nz.delta_std[:, None] * Gn / nz.action_half
    return f, g, nz.delta_std * np.exp(logsig)


def predict_member(m: ControlAffineModel, s, a):
    """Mean and standard deviation of ``Δs`` in raw units."""
    a = np.asarray(a, dtype=np.float64)
    _check_finite(a, "action")
    f, g, sigma = m.affine_terms(s)
    mu = f + np.einsum("...ij,...j->...i", g, a)
    return mu, sigma


def nll_loss_and_grads(m: ControlAffineModel, batch, need_grads: bool = True,
                       logvar_weight: float = LOGVAR_WEIGHT):
    """Gaussian negative log-likelihood (normalized units) and exact gradients.

    ``batch`` is ``(states, actions, deltas)`` as arrays with a leading batch
    axis. The loss per sample is ``sum_d r_d² / (2 σ_d²) + w log σ_d²`` averaged
    over samples, with ``w = logvar_weight``. Returns ``(loss, (grad_f, grad_g, grad_logsig))``; the
    gradient tuple is ``None`` when ``need_grads`` is false.
    """
    S, A, D = (np.asarray(x, dtype=np.float64) for x in batch)
    if len(S) == 0:
        raise DataError("empty batch")
    nz = m.normalizer
    n_s, n_a = m.state_dim, m.action_dim
    sn, an, yn = nz.norm_state(S), nz.norm_action(A), nz.norm_delta(D)
    fn, cf = forward_with_cache(m.f_net, sn)
    gflat, cg = forward_with_cache(m.g_net, sn)
    raw_ls, cl = forward_with_cache(m.logsig_net, sn)
    Gn = gflat.reshape(-1, n_s, n_a)
    mu = fn + np.einsum("nij,nj->ni", Gn, an)
    inside = (raw_ls >= m.logsig_min) & (raw_ls <= m.logsig_max)
    ls = np.clip(raw_ls, m.logsig_min, m.logsig_max)
    inv_var = np.exp(-2.0 * ls)
    r = yn - mu
    N = len(S)
    loss = float(np.sum(0.5 * r * r * inv_var + 2.0 * logvar_weight * ls) / N)
    if not np.isfinite(loss):
        raise NumericError("non-finite likelihood loss")
    if not need_grads:
        return loss, None
    d_mu = -r * inv_var / N
    d_ls = (-r * r * inv_var + 2.0 * logvar_weight) * inside / N
    d_g = (d_mu[:, :, None] * an[:, None, :]).reshape(N, n_s * n_a)
    grads = (
        backward_from_cache(m.f_net, cf, d_mu),
        backward_from_cache(m.g_net, cg, d_g),
        backward_from_cache(m.logsig_net, cl, d_ls),
    )
    return loss, grads


@dataclass(frozen=True, eq=False)
class NonlinearModel:
    mu_net: Mlp
    logsig_net: Mlp
    normalizer: Normalizer
    logsig_min: float = LOGSIG_MIN
    logsig_max: float = LOGSIG_MAX

    @property
    def state_dim(self) -> int:
        return self.mu_net.spec.output_dim

    @property
    def action_dim(self) -> int:
        return self.mu_net.spec.input_dim - self.state_dim


def predict_nonlinear(m: NonlinearModel, s, a):
    S, single = _batch2(s, m.state_dim, "state")
    A, _ = _batch2(a, m.action_dim, "action")
    nz = m.normalizer
    sn = nz.norm_state(S)
    mu_n = mlp_forward(m.mu_net, np.hstack([sn, nz.norm_action(A)]))
    logsig = np.clip(mlp_forward(m.logsig_net, sn), m.logsig_min, m.logsig_max)
    mu, sigma = nz.denorm_delta(mu_n), nz.delta_std * np.exp(logsig)
    return (mu[0], sigma[0]) if single else (mu, sigma)


def nonlinear_loss_and_grads(m: NonlinearModel, batch, need_grads: bool = True,
                             logvar_weight: float = LOGVAR_WEIGHT):
    S, A, D = (np.asarray(x, dtype=np.float64) for x in batch)
    if len(S) == 0:
        raise DataError("empty batch")
    nz = m.normalizer
    sn, yn = nz.norm_state(S), nz.norm_delta(D)
    mu, cm = forward_with_cache(m.mu_net, np.hstack([sn, nz.norm_action(A)]))
    raw_ls, cl = forward_with_cache(m.logsig_net, sn)
    inside = (raw_ls >= m.logsig_min) & (raw_ls <= m.logsig_max)
    ls = np.clip(raw_ls, m.logsig_min, m.logsig_max)
    inv_var = np.exp(-2.0 * ls)
    r = yn - mu
    N = len(S)
    loss = float(np.sum(0.5 * r * r * inv_var + 2.0 * logvar_weight * ls) / N)
    if not np.isfinite(loss):
        raise NumericError("non-finite likelihood loss")
    if not need_grads:
        return loss, None
    d_mu = -r * inv_var / N
    d_ls = (-r * r * inv_var + 2.0 * logvar_weight) * inside / N
    return loss, (backward_from_cache(m.mu_net, cm, d_mu), backward_from_cache(m.logsig_net, cl, d_ls))


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


class Ensemble:
    """K control-affine members sharing one normalizer; predictions average members."""

    def __init__(self, members):
        self.members = tuple(members)
        if not self.members:
            raise ConfigError("ensemble needs at least one member")
        ref = self.members[0]
        if any(m.normalizer is not ref.normalizer and not np.array_equal(m.normalizer.to_array(), ref.normalizer.to_array())
               for m in self.members):
            raise ConfigError("ensemble members must share normalizer statistics")
        self.normalizer = ref.normalizer
        self._stacks = None

    @property
    def K(self) -> int:
        return len(self.members)

    @property
    def state_dim(self) -> int:
        return self.members[0].state_dim

    @property
    def action_dim(self) -> int:
        return self.members[0].action_dim

    def _stacked(self):
        if self._stacks is None:
            self._stacks = tuple(StackedMlp([getattr(m, name) for m in self.members])
                                 for name in ("f_net", "g_net", "logsig_net"))
        return self._stacks

    def member_terms(self, s):
        """Per-member raw ``(f, g, sigma)`` with a leading member axis, batch input only."""
        S, _ = _batch2(s, self.state_dim, "state")
        _check_finite(S, "state")
        nz = self.normalizer
        sn = nz.norm_state(S)
        f_st, g_st, l_st = self._stacked()
        ref = self.members[0]
        fn = f_st(sn)
        Gn = g_st(sn).reshape(self.K, len(S), self.state_dim, self.action_dim)
        ls = np.clip(l_st(sn), ref.logsig_min, ref.logsig_max)
        return _to_raw(nz, fn, Gn, ls)

    def predict(self, s):
        """``(f_bar, g_bar, sigma_bar)``: member means of drift, input matrix and noise scale."""
        s = np.asarray(s, dtype=np.float64)
        f, g, sigma = self.member_terms(s)
        out = f.mean(axis=0), g.mean(axis=0), sigma.mean(axis=0)
        if s.ndim == 1:
            return tuple(x[0] for x in out)
        return out

    def disagreement(self, s, a) -> np.ndarray:
        """Std across members of the predicted mean ``Δs`` (epistemic diagnostic only)."""
        f, g, _ = self.member_terms(s)
        mu = f + np.einsum("knij,nj->kni", g, np.atleast_2d(a))
        return mu.std(axis=0)


def ensemble_predict(e: Ensemble, s):
    return e.predict(s)


@dataclass
class PretrainConfig:
    K: int = 5
    epochs: int = 20
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    batch_size: int = 256
    lr: float = 1e-3
    val_fraction: float = 0.1
    logsig_min: float = LOGSIG_MIN
    logsig_max: float = LOGSIG_MAX
    ignore_state_dims: tuple[int, ...] = ()
    bootstrap: bool = True
    logvar_weight: float = LOGVAR_WEIGHT
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(self.hidden_dims)
        self.ignore_state_dims = tuple(self.ignore_state_dims)
        if self.K < 1:
            raise ConfigError("ensemble size K must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not self.logsig_min < self.logsig_max:
            raise ConfigError("logsig_min must be below logsig_max")
        if self.logvar_weight <= 0:
            raise ConfigError("logvar_weight must be positive")


@dataclass
class PretrainReport:
    model: str
    train_nll: list[list[float]] = field(default_factory=list)
    val_nll: list[list[float]] = field(default_factory=list)
    wall_seconds: float = 0.0

    def final_val(self) -> float:
        """Mean over members of the last-epoch validation loss."""
        if not self.val_nll or not self.val_nll[0]:
            return float("nan")
        return float(np.mean([v[-1] for v in self.val_nll]))

    def rows(self):
        for k, (tr, va) in enumerate(zip(self.train_nll, self.val_nll)):
            for epoch, (t, v) in enumerate(zip(tr, va), start=1):
                yield epoch, k, t, v


def report_to_csv(reports: list[PretrainReport]) -> str:
    """Columns: model, epoch, member, train_nll, val_nll (17 significant digits)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "epoch", "member", "train_nll", "val_nll"])
    for rep in reports:
        for epoch, k, t, v in rep.rows():
            w.writerow([rep.model, epoch, k, f"{t:.17g}", f"{v:.17g}"])
    return buf.getvalue()


def split_dataset(dataset: OfflineDataset, val_fraction: float, seed: int):
    require_nonempty(dataset)
    rng = np.random.default_rng([seed, 0x5EED])
    perm = rng.permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    if val_fraction > 0 and n_val == 0 and len(dataset) > 1:
        n_val = 1
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def _member_seeds(seed: int, k: int, n: int) -> list[int]:
    return [int(x) for x in np.random.default_rng([seed, k, 0xC0DE]).integers(0, 2**63 - 1, size=n)]


def _train_member(loss_fn, nets: list[Mlp], rebuild, train, val, cfg: PretrainConfig, rng):
    """Generic minibatch Adam loop over a list of nets. Returns final model and curves.

    The train curve is the mean minibatch loss seen during each epoch; the
    validation curve is a full pass after the epoch.
    """
    S, A, D = train.s, train.a, train.deltas()
    val_batch = (val.s, val.a, val.deltas()) if len(val) else None
    n = len(S)
    idx_pool = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
    states = [OptState.zeros(net.spec.n_params, lr=cfg.lr) for net in nets]
    params = [net.params for net in nets]
    model = rebuild(params)
    tr_curve, va_curve = [], []
    n_batches = n // cfg.batch_size
    for _epoch in range(cfg.epochs):
        order = idx_pool[rng.permutation(n)]
        running = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, grads = loss_fn(model, (S[idx], A[idx], D[idx]))
            running += loss
            for i, g in enumerate(grads):
                params[i], states[i] = adam_update(params[i], g, states[i])
            model = rebuild(params)
        tr_curve.append(running / n_batches)
        va_curve.append(_eval_loss(loss_fn, model, val_batch) if val_batch else float("nan"))
    return model, tr_curve, va_curve


def _eval_loss(loss_fn, model, batch, chunk: int = 65536) -> float:
    S, A, D = batch
    total = 0.0
    for i in range(0, len(S), chunk):
        sl = slice(i, i + chunk)
        total += loss_fn(model, (S[sl], A[sl], D[sl]), need_grads=False)[0] * len(S[sl])
    return total / len(S)


def _prepare(dataset: OfflineDataset, cfg: PretrainConfig):
    require_nonempty(dataset)
    train, val = split_dataset(dataset, cfg.val_fraction, cfg.seed)
    if len(train) < cfg.batch_size:
        raise DataError(f"training split has {len(train)} transitions, fewer than one batch of {cfg.batch_size}")
    nz = fit_normalizer(train, ignore_state_dims=cfg.ignore_state_dims)
    return train, val, nz


def pretrain(dataset: OfflineDataset, cfg: PretrainConfig) -> tuple[Ensemble, PretrainReport]:
    """Train the control-affine ensemble; members differ by init seed and bootstrap draw."""
    t0 = time.perf_counter()
    train, val, nz = _prepare(dataset, cfg)
    n_s, n_a = dataset.state_dim, dataset.action_dim
    members, report = [], PretrainReport("affine")
    for k in range(cfg.K):
        sf, sg, sl, sr = _member_seeds(cfg.seed, k, 4)
        nets = [
            mlp_init(MlpSpec(n_s, cfg.hidden_dims, n_s, cfg.activation, sf)),
            mlp_init(MlpSpec(n_s, cfg.hidden_dims, n_s * n_a, cfg.activation, sg)),
            mlp_init(MlpSpec(n_s, cfg.hidden_dims, n_s, cfg.activation, sl)),
        ]

        def rebuild(p, nets=nets):
            return ControlAffineModel(nets[0].with_params(p[0]), nets[1].with_params(p[1]),
                                      nets[2].with_params(p[2]), nz, cfg.logsig_min, cfg.logsig_max)

        model, tr, va = _train_member(partial(nll_loss_and_grads, logvar_weight=cfg.logvar_weight), nets, rebuild, train, val, cfg, np.random.default_rng(sr))
        members.append(model)
        report.train_nll.append(tr)
        report.val_nll.append(va)
        log.info("affine member %d: final train %.4f val %.4f", k, tr[-1] if tr else np.nan, va[-1] if va else np.nan)
    report.wall_seconds = time.perf_counter() - t0
    return Ensemble(members), report


def train_nonlinear_baseline(dataset: OfflineDataset, cfg: PretrainConfig) -> tuple[list[NonlinearModel], PretrainReport]:
    t0 = time.perf_counter()
    train, val, nz = _prepare(dataset, cfg)
    n_s, n_a = dataset.state_dim, dataset.action_dim
    members, report = [], PretrainReport("nonlinear")
    for k in range(cfg.K):
        sm, sl, sr = _member_seeds(cfg.seed + 7919, k, 3)
        nets = [
            mlp_init(MlpSpec(n_s + n_a, cfg.hidden_dims, n_s, cfg.activation, sm)),
            mlp_init(MlpSpec(n_s, cfg.hidden_dims, n_s, cfg.activation, sl)),
        ]

        def rebuild(p, nets=nets):
            return NonlinearModel(nets[0].with_params(p[0]), nets[1].with_params(p[1]), nz, cfg.logsig_min, cfg.logsig_max)

        model, tr, va = _train_member(partial(nonlinear_loss_and_grads, logvar_weight=cfg.logvar_weight), nets, rebuild, train, val, cfg, np.random.default_rng(sr))
        members.append(model)
        report.train_nll.append(tr)
        report.val_nll.append(va)
    report.wall_seconds = time.perf_counter() - t0
    return members, report


def calibration_coverage(e: Ensemble, dataset: OfflineDataset, p_delta: float, per_dim: bool = False):
    """Fraction of transitions whose next state lies inside ``mean ± p_delta * sigma_bar``.

    With ``per_dim`` the fraction is reported separately for each coordinate;
    otherwise a transition counts only if every coordinate is covered.
    """
    require_nonempty(dataset)
    f, g, sigma = e.predict(dataset.s)
    mu = f + np.einsum("nij,nj->ni", g, dataset.a)
    inside = np.abs(dataset.deltas() - mu) <= p_delta * sigma
    if per_dim:
        return inside.mean(axis=0)
    return float(inside.all(axis=1).mean())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

ENSEMBLE_MAGIC = b"CAPE"
NONLINEAR_MAGIC = b"CAPL"
ENSEMBLE_VERSION = 1
_ENS_HEADER = struct.Struct("<4sBIII")


def _pack_tail(nz: Normalizer, logsig_min: float, logsig_max: float) -> bytes:
    arr = np.concatenate([nz.to_array(), [logsig_min, logsig_max]])
    return arr.astype("<f8").tobytes()


def ensemble_to_bytes(members, magic: bytes = ENSEMBLE_MAGIC) -> bytes:
    """Header (magic, version u8, K u32, |S| u32, |A| u32), per-member network blobs,
    then the shared normalizer and the log-sigma clamp bounds as f64."""
    first = members[0]
    out = [_ENS_HEADER.pack(magic, ENSEMBLE_VERSION, len(members), first.state_dim, first.action_dim)]
    for m in members:
        nets = (m.f_net, m.g_net, m.logsig_net) if magic == ENSEMBLE_MAGIC else (m.mu_net, m.logsig_net)
        out.extend(mlp_to_bytes(n) for n in nets)
    out.append(_pack_tail(first.normalizer, first.logsig_min, first.logsig_max))
    return b"".join(out)


def ensemble_from_bytes(buf: bytes, magic: bytes = ENSEMBLE_MAGIC):
    if len(buf) < _ENS_HEADER.size:
        raise FormatError("truncated ensemble header", offset=len(buf))
    got, version, K, n_s, n_a = _ENS_HEADER.unpack_from(buf, 0)
    if got != magic:
        raise FormatError(f"expected magic {magic!r}, found {got!r}", offset=0)
    if version != ENSEMBLE_VERSION:
        raise VersionError(f"ensemble format version {version} unsupported (expected {ENSEMBLE_VERSION})", offset=4)
    pos = _ENS_HEADER.size
    per = 3 if magic == ENSEMBLE_MAGIC else 2
    nets = []
    for _ in range(K * per):
        net, pos = mlp_from_bytes(buf, pos)
        nets.append(net)
    n_tail = 5 * n_s + 2 * n_a + 2
    if pos + 8 * n_tail != len(buf):
        raise FormatError(f"normalizer block has {len(buf) - pos} bytes, expected {8 * n_tail}", offset=pos)
    tail = np.frombuffer(buf, dtype="<f8", count=n_tail, offset=pos).astype(np.float64)
    nz = Normalizer.from_array(tail[:-2], n_s, n_a)
    lo, hi = float(tail[-2]), float(tail[-1])
    if magic == ENSEMBLE_MAGIC:
        return Ensemble([ControlAffineModel(*nets[i : i + 3], nz, lo, hi) for i in range(0, len(nets), 3)])
    return [NonlinearModel(*nets[i : i + 2], nz, lo, hi) for i in range(0, len(nets), 2)]


def save_ensemble(e: Ensemble, path) -> None:
    Path(path).write_bytes(ensemble_to_bytes(e.members))


def load_ensemble(path) -> Ensemble:
    return ensemble_from_bytes(Path(path).read_bytes())


def save_nonlinear(members, path) -> None:
    Path(path).write_bytes(ensemble_to_bytes(members, NONLINEAR_MAGIC))


def load_nonlinear(path):
    return ensemble_from_bytes(Path(path).read_bytes(), NONLINEAR_MAGIC)
