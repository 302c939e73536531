"""Run configuration: a JSON tree mapped onto dataclasses, with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Any

from .compensator import CompensatorConfig
from .dynamics import PretrainConfig
from .envs import COLLECT_POLICIES, EnvSpec, velocity_barriers
from .errors import ConfigError
from .safety import BarrierSpec, FilterConfig
from .trpo import TrpoConfig

RUN_MODES = ("capsule", "unfiltered", "filter_only_oracle")
EVAL_POLICIES = ("checkpoint", "zero", "random")


@dataclass
class DataConfig:
    policy: str = "uniform_random"
    n_transitions: int = 100_000
    seed: int = 0
    ou_theta: float = 0.05
    ou_sigma: float = 0.6

    def __post_init__(self):
        if self.policy not in COLLECT_POLICIES:
            raise ConfigError(f"data.policy must be one of {COLLECT_POLICIES}, got {self.policy!r}")
        if self.n_transitions < 0:
            raise ConfigError("data.n_transitions must be non-negative")


@dataclass
class FilterSection:
    alpha: float = 0.1
    slack_penalty: float = 1e4
    p_delta: float | None = None
    delta: float | None = None
    classify_eps: float = 0.0
    slack_mode: str = "hard_first"
    margin: float = 1e-9

    def __post_init__(self):
        if self.p_delta is not None and self.delta is not None:
            raise ConfigError("give either filter.p_delta or filter.delta, not both")
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise ConfigError("filter.delta must lie in (0, 1)")

    def resolved_p_delta(self) -> float:
        if self.delta is not None:
            return NormalDist().inv_cdf(1.0 - self.delta / 2.0)
        return 1.96 if self.p_delta is None else float(self.p_delta)


@dataclass
class EnsembleSection(PretrainConfig):
    nonlinear_baseline: bool = True


@dataclass
class TrainSection(TrpoConfig):
    epochs: int = 50
    n_envs: int = 10

    def __post_init__(self):
        super().__post_init__()
        if self.epochs < 0 or self.n_envs < 1:
            raise ConfigError("train.epochs must be >= 0 and train.n_envs >= 1")
        if self.steps_per_epoch % self.n_envs:
            raise ConfigError("train.steps_per_epoch must be a multiple of train.n_envs")


@dataclass
class PathsSection:
    dataset: str | None = None
    ensemble: str | None = None
    nonlinear: str | None = None
    policy: str | None = None
    compensator: str | None = None
    out: str = "runs"


@dataclass
class RunConfig:
    env: EnvSpec
    barriers: list[BarrierSpec]
    filter: FilterSection = field(default_factory=FilterSection)
    data: DataConfig = field(default_factory=DataConfig)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    train: TrainSection = field(default_factory=TrainSection)
    compensator: CompensatorConfig = field(default_factory=CompensatorConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    mode: str = "capsule"
    paths: PathsSection = field(default_factory=PathsSection)
    eval_episodes: int = 10
    eval_policy: str = "checkpoint"
    # state coordinates hidden from every learned network (None: env default)
    hidden_state_dims: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if self.eval_policy not in EVAL_POLICIES:
            raise ConfigError(f"eval_policy must be one of {EVAL_POLICIES}")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        for h in self.barriers:
            if h.w.shape != (self.env.state_dim,):
                raise ConfigError(f"barrier {h.name!r} has {h.w.size} weights, state has {self.env.state_dim}")
        if self.hidden_state_dims is None:
            self.hidden_state_dims = (0,) if self.env.kind == "point_mass" else ()
        self.hidden_state_dims = tuple(int(i) for i in self.hidden_state_dims)
        if any(not 0 <= i < self.env.state_dim for i in self.hidden_state_dims):
            raise ConfigError("hidden_state_dims entries must index state coordinates")

    def filter_config(self) -> FilterConfig:
        f = self.filter
        return FilterConfig(self.env.action_low, self.env.action_high, self.filter.resolved_p_delta(),
                            f.slack_penalty, f.classify_eps, f.slack_mode, f.margin)

    def pretrain_config(self) -> PretrainConfig:
        fields = {f.name for f in dataclasses.fields(PretrainConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self.ensemble).items() if k in fields}
        kw["ignore_state_dims"] = self.hidden_state_dims
        return PretrainConfig(**kw)


def _build(cls, tree: Any, where: str):
    if not isinstance(tree, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(tree) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {}
    for k, v in tree.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _barrier(tree: Any, i: int, alpha: float) -> BarrierSpec:
    if not isinstance(tree, dict) or not {"w", "b"} <= set(tree):
        raise ConfigError(f"barriers[{i}] needs at least 'w' and 'b'")
    unknown = sorted(set(tree) - {"w", "b", "alpha", "name"})
    if unknown:
        raise ConfigError(f"unknown key(s) in barriers[{i}]: {', '.join(unknown)}")
    return BarrierSpec(tree["w"], tree["b"], tree.get("alpha", alpha), tree.get("name", f"h{i}"))


_SECTIONS = {
    "filter": FilterSection,
    "data": DataConfig,
    "ensemble": EnsembleSection,
    "train": TrainSection,
    "compensator": CompensatorConfig,
    "paths": PathsSection,
}
_SCALARS = ("seeds", "mode", "eval_episodes", "eval_policy", "hidden_state_dims")


def config_from_dict(tree: dict) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be an object")
    allowed = {"env", "barriers", *_SECTIONS, *_SCALARS}
    unknown = sorted(set(tree) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "env" not in tree:
        raise ConfigError("config needs an 'env' section")
    env = _build(EnvSpec, tree["env"], "env")
    sections = {k: _build(cls, tree.get(k, {}), k) for k, cls in _SECTIONS.items()}
    alpha = sections["filter"].alpha
    raw_barriers = tree.get("barriers")
    if raw_barriers is None:
        barriers = velocity_barriers(env, alpha=alpha)
    elif isinstance(raw_barriers, list):
        barriers = [_barrier(b, i, alpha) for i, b in enumerate(raw_barriers)]
    else:
        raise ConfigError("barriers must be a list")
    scalars = {k: tree[k] for k in _SCALARS if k in tree}
    if "seeds" in scalars:
        seeds = scalars["seeds"]
        if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a list of integers")
    try:
        return RunConfig(env=env, barriers=barriers, **sections, **scalars)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        tree = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(tree)
