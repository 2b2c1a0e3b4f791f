"""Declarative experiment configuration.

Configs are YAML mappings. Every section is parsed into a frozen dataclass;
unknown keys anywhere are errors so that typos fail loudly. ``to_dict``
followed by ``from_dict`` reproduces the config exactly, and ``config_hash``
is a digest of that canonical form.

Example::

    task: {kind: bandit, name: fonseca-fleming}
    method: dime
    tradeoffs: {kind: linspace, lo: 0.05, hi: 1.0, count: 20}
    iterations: 200
    seeds: [0, 1, 2]
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .core import (
    ContractError,
    FeatureMap,
    GaussianPolicy,
    TradeOff,
    TradeOffDistribution,
)
from .improvement import ImprovementConfig
from .priors import BehaviorSpec
from .projection import MethodConfig, ProjectionConfig
from .testbeds import BanditTask, ChainMDP

METHODS = (
    "dime",
    "ls",
    "mompo",
    "dime-multi",
    "offline-bc",
    "offline-crr",
    "offline-dime-bc",
    "offline-dime-awbc",
    "kickstart-ls",
    "kickstart-dime",
)
OFFLINE_METHODS = tuple(m for m in METHODS if m.startswith("offline-"))


class ConfigError(ContractError):
    """Invalid or unreadable experiment configuration."""


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    try:
        return cls(**data)
    except ContractError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _plain(obj):
    """Dataclass -> nested dict/list of YAML-safe scalars."""
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "bandit"
    name: str = "schaffer"
    scales: tuple[float, float] = (1.0, 1.0)
    n_states: int = 5
    n_actions: int = 7
    gamma: float = 0.99

    def __post_init__(self):
        if self.kind not in ("bandit", "chain"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        self.build()

    def build(self):
        if self.kind == "bandit":
            return BanditTask(self.name, self.scales)
        return ChainMDP(int(self.n_states), int(self.n_actions), float(self.gamma))


@dataclass(frozen=True)
class TradeOffGrid:
    """Trade-offs for objective 1; objective 2 gets the complement.

    ``kind`` is ``linspace`` (``count`` points from ``lo`` to ``hi``),
    ``cubic`` (the same span, denser near the middle) or ``list`` (explicit
    ``values``). For ``cubic`` the points are ``mid + half * (w u + (1 - w) u^3)``
    for ``u`` evenly spaced in [-1, 1], with ``w = linear_weight``.
    """

    kind: str = "linspace"
    lo: float = 0.05
    hi: float = 1.0
    count: int = 20
    values: tuple[float, ...] = ()
    linear_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linspace", "cubic", "list"):
            raise ConfigError(f"unknown trade-off grid kind {self.kind!r}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        vals = self.alphas()
        if len(vals) == 0 or np.any(vals < 0) or np.any(vals > 1):
            raise ConfigError("trade-offs must be a nonempty set of values in [0, 1]")

    def alphas(self) -> np.ndarray:
        if self.kind == "list":
            return np.array(self.values, dtype=float)
        if self.count < 1:
            return np.array([])
        if self.kind == "cubic":
            u = np.linspace(-1.0, 1.0, int(self.count))
            w = self.linear_weight
            return 0.5 * (self.lo + self.hi) + 0.5 * (self.hi - self.lo) * (w * u + (1.0 - w) * u**3)
        return np.linspace(self.lo, self.hi, int(self.count))

    def tradeoffs(self) -> list[TradeOff]:
        return [TradeOff.from_scalar(a) for a in self.alphas()]


@dataclass(frozen=True)
class PolicySpec:
    mean: tuple[float, ...] = (0.0,)
    log_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in np.atleast_1d(self.mean)))

    def build(self, feature_map: FeatureMap | None = None) -> GaussianPolicy:
        return GaussianPolicy.with_features(feature_map or FeatureMap(), list(self.mean), self.log_std)


@dataclass(frozen=True)
class ConditionedSpec:
    lo: float = 0.0
    hi: float = 1.0
    degree: int = 3

    def __post_init__(self):
        TradeOffDistribution("scalar", 2, self.lo, self.hi)
        if self.degree < 1:
            raise ConfigError("conditioned policies need degree >= 1")

    def distribution(self) -> TradeOffDistribution:
        return TradeOffDistribution("scalar", 2, self.lo, self.hi)


@dataclass(frozen=True)
class OfflineSpec:
    """Dataset generator and offline-training settings.

    ``objective`` is the zero-based task objective optimized offline.
    ``methods`` lists the offline methods to train; empty means the
    config's top-level ``method``.
    """

    behavior: tuple[tuple[float, float, float], ...] = ((1.0, 2.0, 0.1),)
    size: int = 512
    objective: int = 0
    methods: tuple[str, ...] = ()
    dataset: str = ""

    def __post_init__(self):
        object.__setattr__(self, "behavior", tuple(tuple(float(x) for x in c) for c in self.behavior))
        object.__setattr__(self, "methods", tuple(self.methods))
        BehaviorSpec(self.behavior)
        bad = [m for m in self.methods if m not in OFFLINE_METHODS]
        if bad:
            raise ConfigError(f"unknown offline method(s) {bad}")
        if self.size < 1:
            raise ConfigError("dataset size must be >= 1")


@dataclass(frozen=True)
class KickstartSpec:
    """Prior policy and trade-off schedule for kickstarting.

    ``threshold`` of ``None`` means: 10% below the prior's own expected
    return. ``fixed_alphas`` are run alongside the learned schedule.
    """

    prior: PolicySpec = field(default_factory=lambda: PolicySpec((1.5,), math.log(0.5)))
    objective: int = 0
    initial_alpha: float = 0.5
    learned: bool = True
    fixed_alphas: tuple[float, ...] = (1.0,)
    threshold: float | None = None
    step_size: float = 1.0

    def __post_init__(self):
        if isinstance(self.prior, dict):
            object.__setattr__(self, "prior", _build(PolicySpec, self.prior, "kickstart.prior"))
        object.__setattr__(self, "fixed_alphas", tuple(float(a) for a in self.fixed_alphas))
        if not 0.0 <= self.initial_alpha <= 1.0 or any(not 0.0 <= a <= 1.0 for a in self.fixed_alphas):
            raise ConfigError("kickstart trade-offs must be in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    method: str = "dime"
    tradeoffs: TradeOffGrid = field(default_factory=TradeOffGrid)
    iterations: int = 200
    seeds: tuple[int, ...] = (0, 1, 2)
    batch_size: int = 16
    initial_policy: PolicySpec = field(default_factory=PolicySpec)
    improvement: ImprovementConfig = field(default_factory=ImprovementConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    conditioned: ConditionedSpec = field(default_factory=ConditionedSpec)
    offline: OfflineSpec = field(default_factory=OfflineSpec)
    kickstart: KickstartSpec = field(default_factory=KickstartSpec)
    coverage_threshold: float = 0.05
    name: str = "experiment"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {list(METHODS)}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("need at least one seed")

    def method_config(self, mode: str | None = None) -> MethodConfig:
        imp = self.improvement
        if mode is not None and mode != imp.mode:
            imp = dataclasses.replace(imp, mode=mode)
        return MethodConfig(imp, self.projection, self.batch_size)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "task": TaskSpec,
    "tradeoffs": TradeOffGrid,
    "initial_policy": PolicySpec,
    "improvement": ImprovementConfig,
    "projection": ProjectionConfig,
    "conditioned": ConditionedSpec,
    "offline": OfflineSpec,
    "kickstart": KickstartSpec,
}

# Fields stored as tuples in the dataclasses but written as YAML lists.
_TUPLE_FIELDS = {("improvement", "eta_bounds")}


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if isinstance(value, dict):
                value = {k: tuple(v) if (key, k) in _TUPLE_FIELDS else v for k, v in value.items()}
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def to_dict(config: ExperimentConfig) -> dict:
    return _plain(config)


def dumps(config: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=True, default_flow_style=None)


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return from_dict(data or {})


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]
