"""Affine control barrier functions and the slack-relaxed CBF quadratic program.

A barrier ``h(s) = w·s + b`` defines the safe set ``{h >= 0}``. Given a model's
averaged drift ``f``, input matrix ``g`` and noise scale ``sigma`` at ``s``, the
next-state barrier value is bounded below over the ``p_delta``-sigma box by

    h_lo(u) = w·(s + f + g u) + b - p_delta * (|w|·sigma)

and the discrete-time condition ``h_lo(u) >= (1 - alpha) h(s) - eps`` is linear
in the total action ``u``. The filter finds the smallest correction ``a`` to a
base action (``u = a_base + a``) by enumerating active sets of the small dense
problem; the action box is a hard constraint on ``u``.

Two slack policies are offered:

``hard_first`` (default)
    Solve ``min |a|²`` with every barrier row hard. Only when that problem is
    infeasible fall back to ``min |a|² + k Σ eps_j²``, so slack is zero whenever
    an admissible action exists.
``penalty``
    Always solve the penalized problem; slack may be positive (of order 1/k)
    even when an admissible action exists.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import CapabilityError, ConfigError, InfeasibleError, ShapeError

MAX_ROWS = 12
SLACK_ZERO_TOL = 1e-9
SLACK_MODES = ("hard_first", "penalty")


@dataclass(frozen=True, eq=False)
class BarrierSpec:
    w: np.ndarray
    b: float
    alpha: float = 0.1
    name: str = ""

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))
        if w.ndim != 1 or not np.any(w != 0.0):
            raise ConfigError(f"barrier {self.name!r}: w must be a non-zero vector")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"barrier {self.name!r}: alpha must lie in (0, 1], got {self.alpha}")


@dataclass(frozen=True, eq=False)
class FilterConfig:
    action_low: np.ndarray
    action_high: np.ndarray
    p_delta: float = 1.96
    slack_penalty: float = 1e4
    classify_eps: float = 0.0
    slack_mode: str = "hard_first"
    # added to every barrier rhs in the model-composed paths; guards exact invariance against rounding
    margin: float = 0.0

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.action_low, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.action_high, dtype=np.float64))
        object.__setattr__(self, "action_low", lo)
        object.__setattr__(self, "action_high", hi)
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise ConfigError("action_low must be elementwise below action_high")
        if self.p_delta < 0:
            raise ConfigError("p_delta must be non-negative")
        if self.slack_penalty < 1:
            raise ConfigError("slack_penalty k must be >= 1")
        if self.classify_eps < 0:
            raise ConfigError("classify_eps must be non-negative")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        if self.slack_mode not in SLACK_MODES:
            raise ConfigError(f"slack_mode must be one of {SLACK_MODES}")


class Region(enum.Enum):
    SAFE = "safe"
    EPS_SAFE = "eps_safe"
    UNSAFE = "unsafe"


@dataclass(frozen=True)
class LinearConstraint:
    """``g_row · a >= rhs`` on the correction ``a``; relaxable by slack."""

    g_row: np.ndarray
    rhs: float


@dataclass
class FilterResult:
    a_cbf: np.ndarray
    slack: np.ndarray
    active_set: list[int] = field(default_factory=list)
    objective: float = 0.0
    feasible_without_slack: bool = True
    # "unconstrained" (zero correction admissible), "hard" or "soft"
    stage: str = "unconstrained"


def barrier_value(h: BarrierSpec, s) -> float:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != h.w.shape[0]:
        raise ShapeError(f"state has {s.shape[-1]} entries, barrier expects {h.w.shape[0]}")
    return s @ h.w + h.b


def classify(h: BarrierSpec, s, cfg: FilterConfig) -> Region:
    value = barrier_value(h, s)
    if value >= 0.0:
        return Region.SAFE
    if value >= -cfg.classify_eps / h.alpha:
        return Region.EPS_SAFE
    return Region.UNSAFE


def conservative_next_h(h: BarrierSpec, s, f_bar, g_bar, sigma_bar, p_delta: float, a) -> float:
    """Worst-case barrier value over the next-state confidence box for total action ``a``."""
    s, f_bar, sigma_bar = (np.asarray(x, dtype=np.float64) for x in (s, f_bar, sigma_bar))
    g_bar = np.asarray(g_bar, dtype=np.float64).reshape(len(h.w), -1)
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if np.any(sigma_bar < 0):
        raise ShapeError("sigma_bar must be non-negative")
    return float(h.w @ (s + f_bar + g_bar @ a) + h.b - p_delta * (np.abs(h.w) @ sigma_bar))


def as_constraint(h: BarrierSpec, s, f_bar, g_bar, sigma_bar, p_delta: float, a_base=None) -> LinearConstraint:
    """Linear form of ``h_lo(a_base + a) >= (1 - alpha) h(s)`` in the correction ``a``."""
    s, f_bar, sigma_bar = (np.asarray(x, dtype=np.float64) for x in (s, f_bar, sigma_bar))
    g_bar = np.asarray(g_bar, dtype=np.float64).reshape(len(h.w), -1)
    g_row = h.w @ g_bar
    rhs = -h.alpha * barrier_value(h, s) - h.w @ f_bar + p_delta * (np.abs(h.w) @ sigma_bar)
    if a_base is not None:
        rhs -= g_row @ np.atleast_1d(np.asarray(a_base, dtype=np.float64))
    return LinearConstraint(g_row, float(rhs))


# ---------------------------------------------------------------------------
# Dense active-set QP
# ---------------------------------------------------------------------------


def _tol(G, r, lo, hi) -> float:
    scale = 1.0 + max(np.abs(r).max(initial=0.0), np.abs(lo).max(initial=0.0), np.abs(hi).max(initial=0.0))
    return 1e-10 * scale * (1.0 + np.abs(G).max(initial=0.0))


def _box_choices(lo, hi, tol):
    # 0 free, 1 at lower bound, 2 at upper bound
    return [(1,) if hi[i] - lo[i] <= tol else (0, 1, 2) for i in range(len(lo))]


def _enumerate(G, r, lo, hi, k: float, soft: bool):
    """Least-objective feasible stationary point over all active sets, or ``None``."""
    m, n = G.shape
    tol = _tol(G, r, lo, hi)
    eye = np.eye(n)
    best = None
    best_obj = np.inf
    for box in itertools.product(*_box_choices(lo, hi, tol)):
        box = np.array(box)
        fixed = box != 0
        free = ~fixed
        a_fixed = np.where(box == 1, lo, hi)[fixed]
        for mask in range(1 << m):
            rows = np.array([(mask >> j) & 1 for j in range(m)], dtype=bool)
            a = np.zeros(n)
            a[fixed] = a_fixed
            Gs, rs = G[rows], r[rows]
            if soft:
                Q = eye + k * Gs.T @ Gs
                c = k * Gs.T @ rs
                if free.any():
                    rhs = c[free] - Q[np.ix_(free, fixed)] @ a_fixed
                    a[free] = np.linalg.solve(Q[np.ix_(free, free)], rhs)
            elif rows.any():
                A_f = Gs[:, free]
                rhs = rs - Gs[:, fixed] @ a_fixed
                if A_f.shape[0] > A_f.shape[1]:
                    continue
                M = A_f @ A_f.T
                if np.linalg.cond(M) > 1e12:
                    continue
                a[free] = A_f.T @ np.linalg.solve(M, rhs)
            if np.any(a < lo - tol) or np.any(a > hi + tol):
                continue
            resid = r - G @ a
            if soft:
                if np.any(resid[rows] < -tol) or np.any(resid[~rows] > tol):
                    continue
                eps = np.where(rows, np.maximum(resid, 0.0), 0.0)
            else:
                if np.any(resid > tol):
                    continue
                eps = np.zeros(m)
            obj = float(a @ a + k * eps @ eps)
            if obj < best_obj:
                best_obj, best = obj, (a, eps)
    return best


def _active_rows(G, r, lo, hi, a, eps, tol) -> list[int]:
    m = len(r)
    act = [j for j in range(m) if abs(G[j] @ a + eps[j] - r[j]) <= tol]
    for i in range(len(lo)):
        if abs(a[i] - lo[i]) <= tol:
            act.append(m + 2 * i)
        if abs(a[i] - hi[i]) <= tol:
            act.append(m + 2 * i + 1)
    return act


def _stack(constraints, n: int):
    m = len(constraints)
    G = np.zeros((m, n))
    r = np.zeros(m)
    for j, c in enumerate(constraints):
        g = np.atleast_1d(np.asarray(c.g_row, dtype=np.float64))
        if g.shape != (n,):
            raise ShapeError(f"constraint {j} has g_row of shape {g.shape}, expected ({n},)")
        G[j], r[j] = g, c.rhs
    return G, r


def solve_qp_arrays(G, r, cfg: FilterConfig, a_base) -> FilterResult:
    G = np.asarray(G, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    a_base = np.atleast_1d(np.asarray(a_base, dtype=np.float64))
    m, n = G.shape
    if a_base.shape != (n,) or cfg.action_low.shape != (n,):
        raise ShapeError(f"a_base {a_base.shape} / action bounds {cfg.action_low.shape} do not match |A| = {n}")
    if m + 2 * n > MAX_ROWS:
        raise CapabilityError(f"{m} barrier rows + {2 * n} box rows exceed the dense solver limit of {MAX_ROWS}")
    lo = cfg.action_low - a_base
    hi = cfg.action_high - a_base
    k = cfg.slack_penalty
    tol = _tol(G, r, lo, hi)
    if np.all(r <= 0.0) and np.all(lo <= 0.0) and np.all(hi >= 0.0):
        a, eps = np.zeros(n), np.zeros(m)
        return FilterResult(a, eps, _active_rows(G, r, lo, hi, a, eps, tol), 0.0, True, "unconstrained")
    found, stage = None, "soft"
    if cfg.slack_mode == "hard_first":
        found = _enumerate(G, r, lo, hi, k, soft=False)
        stage = "hard"
    if found is None:
        found = _enumerate(G, r, lo, hi, k, soft=True)
        stage = "soft"
    if found is None:
        raise InfeasibleError(
            f"box rows {list(range(m, m + 2 * n))} admit no action: correction bounds lo={lo}, hi={hi}"
        )
    a, eps = found
    a = np.clip(a, lo, hi)
    obj = float(a @ a + k * eps @ eps)
    feasible = bool(np.all(eps <= SLACK_ZERO_TOL))
    return FilterResult(a, eps, _active_rows(G, r, lo, hi, a, eps, tol), obj, feasible, stage)


def solve_cbf_qp(constraints: list[LinearConstraint], cfg: FilterConfig, a_base) -> FilterResult:
    """Minimum-norm correction ``a`` subject to the barrier rows and the hard action box.

    Row indices in ``active_set``: barrier ``j`` is ``j``; the lower and upper box
    rows of action dimension ``i`` are ``m + 2i`` and ``m + 2i + 1``.
    """
    a_base = np.atleast_1d(np.asarray(a_base, dtype=np.float64))
    G, r = _stack(constraints, len(a_base))
    return solve_qp_arrays(G, r, cfg, a_base)


def kkt_residual(result: FilterResult, constraints: list[LinearConstraint], cfg: FilterConfig, a_base) -> float:
    """Largest violation of primal feasibility, stationarity or complementarity.

    The problem checked is the one ``result.stage`` says was solved: the hard
    problem (no slack variables) or the penalized one over ``(a, eps)``.
    Multipliers are recovered by non-negative least squares on the tight rows.
    """
    a_base = np.atleast_1d(np.asarray(a_base, dtype=np.float64))
    G, r = _stack(constraints, len(a_base))
    m, n = G.shape
    lo, hi = cfg.action_low - a_base, cfg.action_high - a_base
    a, eps = result.a_cbf, result.slack
    k = cfg.slack_penalty
    soft = result.stage == "soft" or (result.stage == "unconstrained" and cfg.slack_mode == "penalty")
    box_rows = np.vstack([np.eye(n), -np.eye(n)])
    box_rhs = np.concatenate([lo, -hi])
    if soft:
        z = np.concatenate([a, eps])
        grad = np.concatenate([2.0 * a, 2.0 * k * eps])
        rows = np.vstack([
            np.hstack([G, np.eye(m)]),
            np.hstack([np.zeros((m, n)), np.eye(m)]),
            np.hstack([box_rows, np.zeros((2 * n, m))]),
        ])
        rhs = np.concatenate([r, np.zeros(m), box_rhs])
    else:
        z = a
        grad = 2.0 * a
        rows = np.vstack([G, box_rows])
        rhs = np.concatenate([r, box_rhs])
    gap = rows @ z - rhs
    primal = float(np.maximum(-gap, 0.0).max(initial=0.0))
    tight = np.abs(gap) <= 1e-9 * (1.0 + np.abs(rhs))
    if tight.any():
        lam, stat = nnls(rows[tight].T, grad)
        comp = float(np.max(lam * np.abs(gap[tight])))
    else:
        stat, comp = float(np.linalg.norm(grad)), 0.0
    return max(primal, float(stat), comp)


def qp_objective(a, G, r, k: float) -> float:
    """Penalized objective of a correction with the best slack for it."""
    eps = np.maximum(r - G @ a, 0.0)
    return float(a @ a + k * eps @ eps)


# ---------------------------------------------------------------------------
# Composition with the model
# ---------------------------------------------------------------------------


def barrier_arrays(barriers: list[BarrierSpec]):
    W = np.array([h.w for h in barriers], dtype=np.float64)
    b = np.array([h.b for h in barriers], dtype=np.float64)
    alpha = np.array([h.alpha for h in barriers], dtype=np.float64)
    return W, b, alpha


def batch_constraints(barriers, S, f_bar, g_bar, sigma_bar, p_delta: float, a_base):
    """Vectorized ``as_constraint`` for ``N`` states: ``G`` is ``(N, m, A)``, ``r`` is ``(N, m)``."""
    W, b, alpha = barrier_arrays(barriers)
    h = S @ W.T + b
    G = np.einsum("ms,nsa->nma", W, g_bar)
    r = -alpha * h - f_bar @ W.T + p_delta * (sigma_bar @ np.abs(W).T)
    r = r - np.einsum("nma,na->nm", G, a_base)
    return G, r


def compose_action(a_rl, a_bar, model, barriers: list[BarrierSpec], cfg: FilterConfig, s):
    """Filtered action ``a_rl + a_bar + a_cbf`` and the QP result.

    ``model.predict(s)`` must return the averaged ``(f, g, sigma)`` at ``s``.
    """
    a_base = np.atleast_1d(np.asarray(a_rl, dtype=np.float64)) + np.atleast_1d(np.asarray(a_bar, dtype=np.float64))
    f_bar, g_bar, sigma_bar = model.predict(np.asarray(s, dtype=np.float64))
    cons = [as_constraint(h, s, f_bar, g_bar, sigma_bar, cfg.p_delta, a_base) for h in barriers]
    cons = [LinearConstraint(c.g_row, c.rhs + cfg.margin) for c in cons]
    res = solve_cbf_qp(cons, cfg, a_base)
    return a_base + res.a_cbf, res


def _interval_solve(G, r, lo, hi):
    """Exact hard-stage solution for one action dimension, vectorized over rows.

    Returns the corrections and a mask of rows where the hard problem was feasible.
    """
    g, rr = G[:, :, 0], r
    with np.errstate(divide="ignore", invalid="ignore"):
        q = rr / g
    lower = np.max(np.where(g > 0, q, -np.inf), axis=1, initial=-np.inf)
    upper = np.min(np.where(g < 0, q, np.inf), axis=1, initial=np.inf)
    flat_ok = np.all((g != 0) | (rr <= 0), axis=1)
    L = np.maximum(lower, lo[:, 0])
    U = np.minimum(upper, hi[:, 0])
    ok = flat_ok & (L <= U)
    a = np.clip(0.0, L, U)
    return np.where(ok, a, 0.0)[:, None], ok


def filter_batch(a_base, model, barriers, cfg: FilterConfig, S, failures: list | None = None):
    """Filter ``N`` base actions at once.

    Returns ``(a_cbf, slack, feasible, results, (G, r))``: ``results[i]`` is the
    full ``FilterResult`` when the QP had to be solved and ``None`` when the zero
    correction was already admissible; ``G, r`` are the stacked constraint rows.

    Solver errors propagate unless ``failures`` is a list. Then the row index and
    the exception are appended to it and that row falls back to projecting the
    base action onto the box, with ``feasible`` false.
    """
    f_bar, g_bar, sigma_bar = model.predict(S)
    G, r = batch_constraints(barriers, S, f_bar, g_bar, sigma_bar, cfg.p_delta, a_base)
    r = r + cfg.margin
    N, m = r.shape
    a_cbf = np.zeros_like(a_base)
    slack = np.zeros((N, m))
    feasible = np.ones(N, dtype=bool)
    results: list[FilterResult | None] = [None] * N
    in_box = np.all((a_base >= cfg.action_low) & (a_base <= cfg.action_high), axis=1)
    trivial = np.all(r <= 0.0, axis=1) & in_box
    todo = np.flatnonzero(~trivial)
    if a_base.shape[1] == 1 and cfg.slack_mode == "hard_first" and len(todo):
        lo = cfg.action_low - a_base[todo]
        hi = cfg.action_high - a_base[todo]
        a1, ok = _interval_solve(G[todo], r[todo], lo, hi)
        for i, a, li, hi_i in zip(todo[ok], a1[ok], lo[ok], hi[ok]):
            eps = np.zeros(m)
            a_cbf[i] = a
            act = _active_rows(G[i], r[i], li, hi_i, a, eps, _tol(G[i], r[i], li, hi_i))
            results[i] = FilterResult(a, eps, act, float(a @ a), True, "hard")
        todo = todo[~ok]
    for i in todo:
        try:
            res = solve_qp_arrays(G[i], r[i], cfg, a_base[i])
        except (CapabilityError, InfeasibleError) as exc:
            if failures is None:
                raise
            failures.append((int(i), exc))
            a_cbf[i] = np.clip(a_base[i], cfg.action_low, cfg.action_high) - a_base[i]
            feasible[i] = False
            continue
        a_cbf[i], slack[i], feasible[i], results[i] = res.a_cbf, res.slack, res.feasible_without_slack, res
    return a_cbf, slack, feasible, results, (G, r)
