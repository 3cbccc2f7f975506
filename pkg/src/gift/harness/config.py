"""Experiment configuration: YAML file -> nested dataclasses with full defaulting."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from gift.env import EnvSpec, make_spec
from gift.smdp import GiftRewardConfig
from gift.trainer import PpoConfig


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    id: str = "pendulum"
    reward_variant: str = "underspecified"
    dt: float = 0.02
    episode_len: int = 400
    # passed through to make_spec: constants, reward, action_bound, init_center, ...
    overrides: dict[str, Any] = field(default_factory=dict)

    def spec(self) -> EnvSpec:
        return make_spec(self.id, self.reward_variant, dt=self.dt, episode_len=self.episode_len, **dict(self.overrides))


@dataclass
class ReferenceConfig:
    n_rollouts: int = 32
    length: int = 400


@dataclass
class EvalConfig:
    episodes: int = 100
    length: int = 400
    mle_steps: int = 1000
    mle_transient: int = 100
    mle_eps: float = 1e-5
    fan_delta: float = 1e-4
    fan_trajectories: int = 10
    fan_horizon: int = 400
    bootstrap_resamples: int = 10_000
    ci_level: float = 0.95


@dataclass
class PolicyConfig:
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = 0.0


def _desk_ppo(total: int, update_obs_norm: bool = True) -> PpoConfig:
    return PpoConfig(
        gamma=0.99, epochs=10, n_minibatches=4, learning_rate=1e-3, total_timesteps=total,
        update_obs_norm=update_obs_norm,
    )


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    pretrain: PpoConfig = field(default_factory=lambda: _desk_ppo(200_000))
    finetune: PpoConfig = field(default_factory=lambda: _desk_ppo(100_000, update_obs_norm=False))
    gift: GiftRewardConfig = field(default_factory=GiftRewardConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/pendulum"

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.reference.n_rollouts < 1 or self.reference.length < 2:
            raise ConfigError("reference needs n_rollouts >= 1 and length >= 2")
        ev = self.evaluation
        if ev.episodes < 1 or ev.length < 1:
            raise ConfigError("evaluation needs at least one episode of at least one step")
        if not ev.mle_steps > ev.mle_transient >= 0:
            raise ConfigError("evaluation.mle_steps must exceed mle_transient")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["policy"]["hidden"] = list(self.policy.hidden)
        return d


_SECTIONS = {
    "env": EnvConfig,
    "pretrain": PpoConfig,
    "finetune": PpoConfig,
    "gift": GiftRewardConfig,
    "reference": ReferenceConfig,
    "evaluation": EvalConfig,
    "policy": PolicyConfig,
}


def _build(cls, base, values: dict[str, Any], where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    merged = dataclasses.asdict(base)
    merged.update(values)
    if cls is PolicyConfig:
        merged["hidden"] = tuple(int(h) for h in merged["hidden"])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def config_from_dict(raw: dict[str, Any] | None) -> ExperimentConfig:
    raw = dict(raw or {})
    defaults = ExperimentConfig()
    unknown = set(raw) - set(_SECTIONS) - {"seeds", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        kw[name] = _build(cls, getattr(defaults, name), raw.get(name) or {}, name)
    kw["seeds"] = [int(s) for s in raw.get("seeds", defaults.seeds)]
    kw["out_dir"] = str(raw.get("out_dir", defaults.out_dir))
    try:
        cfg = ExperimentConfig(**kw)
        cfg.env.spec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
