"""Run configuration: one strict JSON document fully determines a run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .. import costs, env
from .. import routes as fixtures
from ..errors import ConfigError
from ..metrics import MetricConfig
from ..policies import ILHyper, ModelSizes
from ..reward import RewardConfig
from ..router import PPOConfig

SCHEMA_VERSION = 1

# set per run from the route fixture and the density preset, never from the file
_ENV_RUNTIME_FIELDS = ("route", "pedestrian_count")


@dataclass
class ModelsConfig:
    sizes: ModelSizes = field(default_factory=ModelSizes)
    il: ILHyper = field(default_factory=ILHyper)


@dataclass
class CostsConfig:
    energy: costs.EnergyConfig = field(default_factory=costs.EnergyConfig)
    latency: costs.LatencyConfig = field(default_factory=costs.LatencyConfig)


@dataclass
class CollectConfig:
    routes: tuple = tuple(range(fixtures.ROUTE_COUNT))
    episodes: int = 30
    densities: tuple = ("low", "medium", "high", "crowd")


@dataclass
class EvalConfig:
    routes: tuple = fixtures.EVAL_ROUTES
    episodes_per_route: int = 30
    seed_base: int = 1_000_000
    train_routes: tuple = tuple(range(fixtures.ROUTE_COUNT))
    train_density: str = "high"
    metrics: MetricConfig = field(default_factory=MetricConfig)


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    env: env.WorldConfig = field(default_factory=env.WorldConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    costs: CostsConfig = field(default_factory=CostsConfig)
    collect: CollectConfig = field(default_factory=CollectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        # the env section is validated against every route it may run on
        for r in {*self.collect.routes, *self.eval.routes, *self.eval.train_routes}:
            if not 0 <= r < fixtures.ROUTE_COUNT:
                raise ConfigError(f"route index {r} out of range")
            self.world(r, 0).validate()
        self.models.sizes.validate()
        self.ppo.validate()
        self.reward.validate()
        self.costs.energy.validate()
        self.costs.latency.validate()
        self.eval.metrics.validate()
        if self.reward.m_v != self.env.m_v or self.reward.d_m != self.env.d_m:
            raise ConfigError("reward and env disagree on m_v or d_m")
        if self.eval.metrics.E_local != self.costs.energy.E_local or self.eval.metrics.E_cloud != self.costs.energy.E_cloud:
            raise ConfigError("metric normaliser and energy costs disagree")
        for name in (*self.collect.densities, self.eval.train_density):
            density_count(name)
        if self.collect.episodes < 0 or self.eval.episodes_per_route < 0:
            raise ConfigError("episode counts must be >= 0")
        if not self.eval.routes or not self.eval.train_routes:
            raise ConfigError("eval.routes and eval.train_routes must be non-empty")
        return self

    def sync_seeds(self) -> "RunConfig":
        self.ppo.seed = self.seed
        self.models.il.seed = self.seed
        return self

    def world(self, route_index: int, pedestrians: int) -> env.WorldConfig:
        return dataclasses.replace(self.env, route=fixtures.route(route_index).tolist(), pedestrian_count=pedestrians)

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        for key in _ENV_RUNTIME_FIELDS:
            d["env"].pop(key)
        d["ppo"].pop("seed")
        d["models"]["il"].pop("seed")
        return d

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def density_count(name: str) -> int:
    try:
        return env.DENSITY_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown density {name!r}; expected one of {sorted(env.DENSITY_PRESETS)}") from None


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    skip = ("seed",) if cls in (ILHyper, PPOConfig) else ()
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _nested_type(cls, name)
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (RunConfig, "env"): env.WorldConfig,
    (RunConfig, "models"): ModelsConfig,
    (RunConfig, "ppo"): PPOConfig,
    (RunConfig, "reward"): RewardConfig,
    (RunConfig, "costs"): CostsConfig,
    (RunConfig, "collect"): CollectConfig,
    (RunConfig, "eval"): EvalConfig,
    (ModelsConfig, "sizes"): ModelSizes,
    (ModelsConfig, "il"): ILHyper,
    (CostsConfig, "energy"): costs.EnergyConfig,
    (CostsConfig, "latency"): costs.LatencyConfig,
    (EvalConfig, "metrics"): MetricConfig,
}


def _nested_type(cls, name):
    return _NESTED.get((cls, name))


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    env_data = data.get("env", {})
    if isinstance(env_data, dict):
        bad = sorted(set(env_data) & set(_ENV_RUNTIME_FIELDS))
        if bad:
            raise ConfigError(f"env: keys {bad} are set per run and may not appear in the config")
    cfg = _build(RunConfig, data, "config")
    return cfg.sync_seeds().validate()


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().sync_seeds().validate()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(data)
