"""Pipeline orchestration: collection, pretraining, filtered training, evaluation and aggregation.

Every run is a pure function of ``(config, seed)``. Wall-clock time is kept out
of the metric files so they are byte-reproducible; it goes to ``timing.csv``.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compensator import (
    CompBuffer,
    CompensatorNet,
    comp_predict,
    comp_train,
    load_compensator,
    make_compensator,
    save_compensator,
)
from .config import RunConfig
from .dynamics import (
    calibration_coverage,
    load_ensemble,
    pretrain,
    report_to_csv,
    save_ensemble,
    save_nonlinear,
    split_dataset,
    train_nonlinear_baseline,
)
from .envs import (
    EnvSpec,
    TrueDynamics,
    collect_offline,
    dataset_load,
    dataset_save,
    draw_noise,
    sample_initial_states,
    step_batch,
)
from .errors import DataError, NumericError
from .safety import filter_batch
from .trpo import (
    GaussianPolicy,
    TrajectoryBatch,
    compute_gae,
    gaussian_log_prob,
    load_policy,
    make_policy,
    make_value,
    save_policy,
    save_value,
    trpo_update,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "seed",
    "epoch",
    "env_steps",
    "mean_eval_return",
    "mean_eval_cost",
    "violations_this_epoch",
    "cumulative_violations",
    "violating_episodes",
    "cumulative_violating_episodes",
    "mean_a_cbf_norm",
    "mean_slack",
    "feasible_fraction",
    "qp_failures",
    "status",
)
EVAL_COLUMNS = (
    "seed",
    "episodes",
    "mean_return",
    "std_return",
    "mean_cost",
    "std_cost",
    "violation_fraction",
    "violating_episode_fraction",
)

# stream tags keep the random draws of different consumers independent
_TAG_ROLLOUT, _TAG_EVAL, _TAG_INIT, _TAG_UPDATE = 0xA11, 0xE7A1, 0x1A1, 0x0DD


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# ---------------------------------------------------------------------------
# Artifact locations
# ---------------------------------------------------------------------------


def dataset_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.paths.dataset) if cfg.paths.dataset else out / "dataset.capd"


def ensemble_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.paths.ensemble) if cfg.paths.ensemble else out / "ensemble.cape"


def nonlinear_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.paths.nonlinear) if cfg.paths.nonlinear else out / "nonlinear.capl"


def seed_dir(out: Path, mode: str, seed: int) -> Path:
    return out / mode / f"seed_{seed}"


# ---------------------------------------------------------------------------
# collect / pretrain
# ---------------------------------------------------------------------------


def run_collect(cfg: RunConfig, out: Path) -> Path:
    d = cfg.data
    ds = collect_offline(cfg.env, d.policy, d.n_transitions, d.seed, d.ou_theta, d.ou_sigma)
    path = dataset_path(cfg, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_save(ds, path)
    log.info("wrote %d transitions to %s", len(ds), path)
    return path


@dataclass
class PretrainArtifacts:
    ensemble: Path
    report: Path
    nonlinear: Path | None
    coverage: np.ndarray
    joint_coverage: float
    p_delta: float


def _load_dataset(cfg: RunConfig, out: Path):
    path = dataset_path(cfg, out)
    if not path.is_file():
        raise DataError(f"dataset not found at {path}; create it with `capsule collect --config <file> --out {out}`")
    return dataset_load(path)


def run_pretrain(cfg: RunConfig, out: Path) -> PretrainArtifacts:
    ds = _load_dataset(cfg, out)
    pcfg = cfg.pretrain_config()
    t0 = time.perf_counter()
    ens, rep = pretrain(ds, pcfg)
    reports = [rep]
    out.mkdir(parents=True, exist_ok=True)
    ens_path = ensemble_path(cfg, out)
    save_ensemble(ens, ens_path)
    nl_path = None
    if cfg.ensemble.nonlinear_baseline:
        nl, rep_nl = train_nonlinear_baseline(ds, pcfg)
        nl_path = nonlinear_path(cfg, out)
        save_nonlinear(nl, nl_path)
        reports.append(rep_nl)
    report_path = out / "pretrain_report.csv"
    report_path.write_text(report_to_csv(reports), encoding="utf-8")
    write_csv(out / "pretrain_timing.csv", ("model", "wall_seconds"),
              [(r.model, r.wall_seconds) for r in reports] + [("total", time.perf_counter() - t0)])
    _, val = split_dataset(ds, pcfg.val_fraction, pcfg.seed)
    held_out = val if len(val) else ds
    p_delta = cfg.filter.resolved_p_delta()
    cov = calibration_coverage(ens, held_out, p_delta, per_dim=True)
    joint = calibration_coverage(ens, held_out, p_delta)
    return PretrainArtifacts(ens_path, report_path, nl_path, cov, joint, p_delta)


# ---------------------------------------------------------------------------
# The composed controller
# ---------------------------------------------------------------------------


@dataclass
class StepOut:
    a_exec: np.ndarray
    a_bar: np.ndarray
    a_cbf: np.ndarray
    slack: np.ndarray
    feasible: np.ndarray
    failures: int


@dataclass
class Controller:
    """Maps base actions to executed ones according to the run mode."""

    mode: str
    spec: EnvSpec
    barriers: list
    fcfg: object
    model: object | None
    obs_mask: np.ndarray

    def obs(self, S: np.ndarray) -> np.ndarray:
        return S * self.obs_mask

    def act(self, S: np.ndarray, a_rl: np.ndarray, comp: CompensatorNet | None) -> StepOut:
        n, m = len(S), len(self.barriers)
        if self.mode == "unfiltered":
            z = np.zeros_like(a_rl)
            return StepOut(a_rl.copy(), z, z.copy(), np.zeros((n, m)), np.ones(n, dtype=bool), 0)
        a_bar = comp_predict(comp, self.obs(S)) if comp is not None else np.zeros_like(a_rl)
        a_base = a_rl + a_bar
        fails: list = []
        a_cbf, slack, feasible, _, _ = filter_batch(a_base, self.model, self.barriers, self.fcfg, S, failures=fails)
        for i, exc in fails:
            log.warning("filter failure at row %d: %s", i, exc)
        return StepOut(a_base + a_cbf, a_bar, a_cbf, slack, feasible, len(fails))


def _obs_mask(cfg: RunConfig) -> np.ndarray:
    mask = np.ones(cfg.env.state_dim)
    mask[list(cfg.hidden_state_dims)] = 0.0
    return mask


def _run_env(cfg: RunConfig) -> EnvSpec:
    if cfg.mode == "filter_only_oracle":
        # exact dynamics means exactly known: no process noise
        return dataclasses.replace(cfg.env, process_noise_std=(0.0,) * cfg.env.state_dim)
    return cfg.env


def build_controller(cfg: RunConfig, out: Path) -> Controller:
    spec = _run_env(cfg)
    model = None
    if cfg.mode == "capsule":
        path = ensemble_path(cfg, out)
        if not path.is_file():
            raise DataError(f"ensemble checkpoint not found at {path}; run `capsule pretrain --config <file> --out {out}` first")
        model = load_ensemble(path)
    elif cfg.mode == "filter_only_oracle":
        model = TrueDynamics(spec)
    return Controller(cfg.mode, spec, cfg.barriers, cfg.filter_config(), model, _obs_mask(cfg))


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutStats:
    violations: int = 0
    violating_episodes: int = 0
    mean_a_cbf_norm: float = 0.0
    mean_slack: float = 0.0
    feasible_fraction: float = 1.0
    qp_failures: int = 0


@dataclass
class Rollout:
    batch: TrajectoryBatch
    next_states: np.ndarray
    a_bar: np.ndarray
    a_cbf: np.ndarray
    stats: RolloutStats
    trace: list = field(default_factory=list)


def _base_actions(kind: str, policy, O, rngs, spec: EnvSpec, greedy: bool):
    n = len(O)
    if kind == "random":
        a = np.stack([r.uniform(spec.low, spec.high) for r in rngs])
        return a, np.zeros(n)
    if kind == "zero":
        return np.zeros((n, spec.action_dim)), np.zeros(n)
    mu = policy.mean(O)
    if greedy:
        return mu, gaussian_log_prob(mu, policy.log_std, mu)
    z = np.stack([r.standard_normal(spec.action_dim) for r in rngs])
    a = mu + np.exp(policy.log_std) * z
    return a, gaussian_log_prob(mu, policy.log_std, a)


def rollout(ctrl: Controller, policy: GaussianPolicy | None, comp, n_envs: int, steps: int,
            seed: int, epoch: int, action_kind: str = "policy", trace: bool = False) -> Rollout:
    """``n_envs`` side-by-side workers, each with its own stream; merged worker-major."""
    spec = ctrl.spec
    rngs = [np.random.default_rng([seed, epoch, w, _TAG_ROLLOUT]) for w in range(n_envs)]
    S = np.stack([sample_initial_states(spec, r, 1)[0] for r in rngs])
    t_ep = np.zeros(n_envs, dtype=int)
    episode = np.zeros(n_envs, dtype=int)
    keys = ("s", "o", "a_rl", "a", "r", "c", "s2", "trunc", "logp", "a_bar", "a_cbf", "slack", "feas", "ep")
    rec = {k: [] for k in keys}
    fails = 0
    trace_rows = []
    for t in range(steps):
        O = ctrl.obs(S)
        a_rl, logp = _base_actions(action_kind, policy, O, rngs, spec, greedy=False)
        out = ctrl.act(S, a_rl, comp)
        fails += out.failures
        noise = np.stack([draw_noise(spec, r, 1)[0] for r in rngs])
        S2, rew, cost = step_batch(spec, S, out.a_exec, noise)
        t_ep += 1
        ended = t_ep >= spec.horizon
        trunc = ended | (t == steps - 1)
        for k, v in zip(keys, (S, O, a_rl, out.a_exec, rew, cost, S2, trunc, logp, out.a_bar, out.a_cbf,
                               out.slack, out.feasible, episode.copy())):
            rec[k].append(v)
        if trace:
            for w in range(n_envs):
                trace_rows.append((epoch, w, t, *S[w], *a_rl[w], *out.a_bar[w], *out.a_cbf[w], *out.a_exec[w],
                                   float(out.slack[w].sum()), bool(out.feasible[w]), int(cost[w])))
        S = S2.copy()
        if ended.any():
            for w in np.flatnonzero(ended):
                S[w] = sample_initial_states(spec, rngs[w], 1)[0]
            t_ep[ended] = 0
            episode[ended] += 1

    def merged(k):
        x = np.asarray(rec[k])
        return np.swapaxes(x, 0, 1).reshape(n_envs * steps, *x.shape[2:])

    m = {k: merged(k) for k in keys}
    cost = m["c"].astype(np.float64)
    batch = TrajectoryBatch(
        states=m["o"], actions_rl=m["a_rl"], actions=m["a"], rewards=m["r"], costs=cost,
        dones=np.zeros(len(cost), dtype=bool), truncated=m["trunc"], logp=m["logp"],
    )
    worker = np.repeat(np.arange(n_envs), steps)
    ep_ids = worker * (steps + 1) + m["ep"]
    stats = RolloutStats(
        violations=int(cost.sum()),
        violating_episodes=len(np.unique(ep_ids[cost > 0])),
        mean_a_cbf_norm=float(np.mean(np.linalg.norm(m["a_cbf"], axis=1))),
        mean_slack=float(np.mean(m["slack"].sum(axis=1))) if m["slack"].size else 0.0,
        feasible_fraction=float(np.mean(m["feas"])),
        qp_failures=fails,
    )
    return Rollout(batch, ctrl.obs(m["s2"]), m["a_bar"], m["a_cbf"], stats, trace_rows)


@dataclass
class EvalStats:
    returns: np.ndarray
    costs: np.ndarray
    steps: int

    @property
    def violation_fraction(self) -> float:
        return float(self.costs.sum() / self.steps)

    @property
    def violating_episode_fraction(self) -> float:
        return float(np.mean(self.costs > 0))


def evaluate(ctrl: Controller, policy, comp, episodes: int, seed: int, epoch: int, action_kind: str) -> EvalStats:
    """Greedy rollouts of whole episodes, all episodes advanced together."""
    spec = ctrl.spec
    rngs = [np.random.default_rng([seed, epoch, e, _TAG_EVAL]) for e in range(episodes)]
    S = np.stack([sample_initial_states(spec, r, 1)[0] for r in rngs])
    ret = np.zeros(episodes)
    cst = np.zeros(episodes)
    for _ in range(spec.horizon):
        a_rl, _ = _base_actions(action_kind, policy, ctrl.obs(S), rngs, spec, greedy=True)
        out = ctrl.act(S, a_rl, comp)
        noise = np.stack([draw_noise(spec, r, 1)[0] for r in rngs])
        S, rew, cost = step_batch(spec, S, out.a_exec, noise)
        ret += rew
        cst += cost
    return EvalStats(ret, cst, episodes * spec.horizon)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    rows: list
    status: str
    policy: GaussianPolicy | None = None
    compensator: CompensatorNet | None = None
    buffer_sizes: list = field(default_factory=list)
    comp_buffer_sizes: list = field(default_factory=list)


def _derived_seed(seed: int, tag: int) -> int:
    return int(np.random.default_rng([seed, tag, _TAG_INIT]).integers(0, 2**31 - 1))


def train_seed(cfg: RunConfig, ctrl: Controller, seed: int, out_dir: Path | None = None,
               trace: bool = False) -> SeedResult:
    t_cfg, c_cfg = cfg.train, cfg.compensator
    spec = ctrl.spec
    n_s, n_a = spec.state_dim, spec.action_dim
    oracle = cfg.mode == "filter_only_oracle"
    policy = make_policy(n_s, n_a, t_cfg.hidden_dims, t_cfg.activation, t_cfg.init_log_std, _derived_seed(seed, 1))
    value = make_value(n_s, t_cfg.hidden_dims, t_cfg.activation, _derived_seed(seed, 2))
    comp = None
    buf = None
    if cfg.mode == "capsule":
        comp = make_compensator(n_s, spec.low, spec.high, c_cfg.hidden_dims, c_cfg.activation,
                                _derived_seed(seed, 3), c_cfg.range_fraction)
        buf = CompBuffer(c_cfg.capacity, n_s, n_a)
    update_rng = np.random.default_rng([seed, _TAG_UPDATE])
    steps = t_cfg.steps_per_epoch // t_cfg.n_envs
    rows, timing, trace_rows = [], [], []
    res = SeedResult(seed, rows, "ok")
    cum_v = cum_ep = 0
    b_total = 0
    for epoch in range(1, t_cfg.epochs + 1):
        t0 = time.perf_counter()
        ro = rollout(ctrl, policy, comp, t_cfg.n_envs, steps, seed, epoch,
                     "random" if oracle else "policy", trace)
        st = ro.stats
        cum_v += st.violations
        cum_ep += st.violating_episodes
        b_total += len(ro.batch)
        res.buffer_sizes.append(b_total)
        trace_rows.extend(ro.trace)
        status = "ok"
        try:
            if not oracle:
                bt = ro.batch
                bt.values = value(bt.states)
                bt.next_values = value(ro.next_states)
                bt.advantages, bt.returns = compute_gae(bt, t_cfg.gamma, t_cfg.lam)
                policy, value, diag = trpo_update(policy, value, bt, t_cfg.delta_kl, t_cfg, update_rng)
                if diag.status == "non_finite":
                    raise NumericError(f"non-finite policy gradient at epoch {epoch}")
            if comp is not None:
                buf.add(ro.batch.states, ro.a_cbf + ro.a_bar)
                comp = comp_train(comp, buf, c_cfg.epochs, c_cfg, update_rng)
                res.comp_buffer_sizes.append(buf.total_added)
            ev = evaluate(ctrl, policy, comp, cfg.eval_episodes, seed, epoch, "random" if oracle else "policy")
            eval_ret, eval_cost = float(ev.returns.mean()), float(ev.costs.mean())
            if not (np.isfinite(eval_ret) and np.isfinite(eval_cost)):
                raise NumericError(f"non-finite evaluation at epoch {epoch}")
        except NumericError as exc:
            log.error("seed %d aborted: %s", seed, exc)
            status, eval_ret, eval_cost = "numeric_abort", float("nan"), float("nan")
        rows.append((seed, epoch, epoch * t_cfg.steps_per_epoch, eval_ret, eval_cost, st.violations, cum_v,
                     st.violating_episodes, cum_ep, st.mean_a_cbf_norm, st.mean_slack, st.feasible_fraction,
                     st.qp_failures, status))
        timing.append((seed, epoch, time.perf_counter() - t0))
        if status != "ok":
            res.status = status
            break
    res.policy, res.compensator = policy, comp
    if out_dir is not None:
        write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, rows)
        write_csv(out_dir / "timing.csv", ("seed", "epoch", "wall_seconds"), timing)
        if trace:
            write_csv(out_dir / "trace.csv", _trace_header(n_s, n_a), trace_rows)
        save_policy(policy, out_dir / "policy.capp")
        save_value(value, out_dir / "value.capv")
        if comp is not None:
            save_compensator(comp, out_dir / "compensator.capc")
    return res


def _trace_header(n_s: int, n_a: int) -> list[str]:
    cols = ["epoch", "worker", "step"] + [f"s_{i}" for i in range(n_s)]
    for name in ("a_rl", "a_bar", "a_cbf", "a_exec"):
        cols += [f"{name}_{i}" for i in range(n_a)]
    return cols + ["slack_sum", "feasible", "cost"]


def run_train(cfg: RunConfig, out: Path, trace: bool = False) -> list[SeedResult]:
    ctrl = build_controller(cfg, out)
    results = []
    for seed in cfg.seeds:
        d = seed_dir(out, cfg.mode, seed)
        d.mkdir(parents=True, exist_ok=True)
        results.append(train_seed(cfg, ctrl, seed, d, trace))
    return results


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def run_eval(cfg: RunConfig, out: Path) -> list[tuple]:
    ctrl = build_controller(cfg, out)
    action_kind = "random" if cfg.mode == "filter_only_oracle" else cfg.eval_policy
    if action_kind == "checkpoint":
        action_kind = "policy"
    rows = []
    for seed in cfg.seeds:
        d = seed_dir(out, cfg.mode, seed)
        policy = comp = None
        if action_kind == "policy":
            ppath = Path(cfg.paths.policy) if cfg.paths.policy else d / "policy.capp"
            if not ppath.is_file():
                raise DataError(f"policy checkpoint not found at {ppath}; run `capsule train` for seed {seed} first")
            policy = load_policy(ppath)
        if cfg.mode == "capsule":
            cpath = Path(cfg.paths.compensator) if cfg.paths.compensator else d / "compensator.capc"
            if cpath.is_file():
                comp = load_compensator(cpath)
            else:
                log.warning("no compensator at %s; evaluating with a zero correction prior", cpath)
        ev = evaluate(ctrl, policy, comp, cfg.eval_episodes, seed, 0, action_kind)
        rows.append((seed, cfg.eval_episodes, float(ev.returns.mean()), float(ev.returns.std()),
                     float(ev.costs.mean()), float(ev.costs.std()), ev.violation_fraction,
                     ev.violating_episode_fraction))
    write_csv(out / cfg.mode / "eval_summary.csv", EVAL_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------


def _metric_files(run_dirs) -> list[Path]:
    files = []
    for d in map(Path, run_dirs):
        if (d / "metrics.csv").is_file():
            files.append(d / "metrics.csv")
        elif d.is_dir():
            files.extend(sorted(d.rglob("metrics.csv")))
        else:
            raise DataError(f"run directory not found: {d}")
    if not files:
        raise DataError("no metrics.csv found under the given run directories")
    return files


def aggregate(run_dirs, out: Path) -> tuple[Path, int]:
    """Per-epoch mean and population std across seeds; epochs missing from any seed are dropped."""
    tables = []
    for path in _metric_files(run_dirs):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if rows and set(METRIC_COLUMNS) - set(rows[0]):
            raise DataError(f"{path} lacks metric columns {sorted(set(METRIC_COLUMNS) - set(rows[0]))}")
        tables.append({int(r["epoch"]): r for r in rows})
    all_epochs = sorted(set().union(*[t.keys() for t in tables]))
    kept = [e for e in all_epochs if all(e in t for t in tables)]
    dropped = len(all_epochs) - len(kept)
    if dropped:
        log.warning("dropped %d epoch(s) missing from at least one seed", dropped)
    numeric = [c for c in METRIC_COLUMNS if c not in ("seed", "epoch", "status")]
    header = ["epoch", "n_seeds"] + [f"{c}_{s}" for c in numeric for s in ("mean", "std")]
    rows = []
    for e in kept:
        row = [e, len(tables)]
        for c in numeric:
            vals = np.array([float(t[e][c]) for t in tables])
            row += [float(vals.mean()), float(vals.std())]
        rows.append(row)
    path = out / "summary.csv"
    write_csv(path, header, rows)
    return path, dropped
