"""INI experiment configuration with a strict schema.

Every section maps to a dataclass below; every key to one of its fields.
Unknown sections or keys are errors. Lists are comma separated and inline
comments start with ``;`` or ``#``. The ``serialize``/``parse`` pair
round-trips exactly.
"""

from __future__ import annotations

import configparser
import hashlib
import math
import typing
from dataclasses import dataclass, field, fields, replace

from conceptope.errors import ConfigError
from conceptope.estimators import ESTIMATOR_MODES
from conceptope.interventions import CRITERION_KINDS, STRATEGIES

ESTIMATOR_DEFAULT = ("IS", "PDIS", "WIS", "PDWIS", "CIS", "CPDIS", "CWIS", "CPDWIS")


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "gridworld"
    seed: int = 0
    jobs: int = 1


@dataclass(frozen=True)
class EnvSection:
    kind: str = "gridworld"
    gamma: float = 0.99
    horizon: int = 200
    goal_reward: float = 5.0
    away_penalty: float = -0.2
    layout_csv: str = ""
    chain_states: int = 5
    chain_actions: int = 2
    chain_slip: float = 0.1


@dataclass(frozen=True)
class PolicySection:
    episodes: int = 1000
    snapshot_frac: float = 0.5
    temperature: float = 3.0
    alpha: float = 0.1
    epsilon: float = 0.1


@dataclass(frozen=True)
class DataSection:
    n_train: int = 400
    n_val: int = 50
    n_test: int = 50
    pool_size: int = 10000


@dataclass(frozen=True)
class EvalSection:
    estimators: tuple = ESTIMATOR_DEFAULT
    n_values: tuple = (100, 300, 500, 1000, 1500, 2000)
    seeds: int = 20
    bootstrap: int = 200
    concept: str = "known"
    smoothing: float = 1e-3
    pd_normalization: str = "per_step"
    mis_per_timestep: bool = False
    on_policy_rollouts: int = 100000
    fqe_sweeps: int = 100
    log_bins: int = 50


@dataclass(frozen=True)
class LearnSection:
    stages: tuple = (20, 20, 20)
    lr: float = 1e-3
    minibatch: int = 16
    n_concepts: int = 4
    hidden: int = 256
    head_hidden: int = 64
    estimator: str = "CPDIS"
    beta: float = 0.0
    output_loss: str = "mse"
    init_scale: float = 0.1
    lambda_output: float = 1.0
    lambda_interp: float = 1e-3
    lambda_div: float = 1e-2
    lambda_policy: float = 1.0
    lambda_ope: float = 1e-2
    clusters: int = 4


@dataclass(frozen=True)
class InterveneSection:
    checkpoint: str = ""
    criterion: str = "oracle_match"
    strategies: tuple = ("qualitative", "state_mle_policy", "state_policy")
    estimator: str = "CPDIS"
    corrupt_blocks: int = 2
    feature_index: int = 0
    threshold: float = 0.0
    table_csv: str = ""
    n: int = 1000
    seeds: int = 20


@dataclass(frozen=True)
class AblateSection:
    k_min: int = 2
    k_max: int = 50
    estimator: str = "CIS"
    n: int = 1000
    seeds: int = 5
    kmeans_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    env: EnvSection = field(default_factory=EnvSection)
    policy: PolicySection = field(default_factory=PolicySection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    learn: LearnSection = field(default_factory=LearnSection)
    intervene: InterveneSection = field(default_factory=InterveneSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def __post_init__(self):
        validate(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, seed=int(seed)))

    def hash(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()


def _section_types(name: str) -> dict:
    cls = _SECTION_CLASSES[name]
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


_SECTION_CLASSES = {
    "experiment": ExperimentSection, "env": EnvSection, "policy": PolicySection, "data": DataSection,
    "eval": EvalSection, "learn": LearnSection, "intervene": InterveneSection, "ablate": AblateSection,
}


def _element_type(section: str, key: str) -> type:
    default = getattr(_SECTION_CLASSES[section](), key)
    return type(default[0]) if default else str


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse_value(section: str, key: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            v = float(raw)
            if math.isnan(v):
                raise ValueError(raw)
            return v
        if typ is tuple:
            elem = _element_type(section, key)
            return tuple(elem(x.strip()) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {}
    for name in cp.sections():
        if name not in _SECTION_CLASSES:
            raise ConfigError(f"unknown config section [{name}]")
        types = _section_types(name)
        values = {}
        for key, raw in cp.items(name):
            if key not in types:
                raise ConfigError(f"unknown config key [{name}] {key}")
            values[key] = _parse_value(name, key, types[key], raw)
        sections[name] = _SECTION_CLASSES[name](**values)
    return ExperimentConfig(**sections)


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for name in _SECTION_CLASSES:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(sec):
            lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


CONCEPT_SOURCES = ("known", "oracle", "imperfect", "identity")


def validate(cfg: ExperimentConfig) -> None:
    e = cfg.env
    if e.kind not in ("gridworld", "chain"):
        raise ConfigError(f"[env] kind: unknown environment {e.kind!r}")
    if not 0.0 <= e.gamma <= 1.0:
        raise ConfigError("[env] gamma must lie in [0, 1]")
    if e.horizon < 1:
        raise ConfigError("[env] horizon must be positive")
    for est in cfg.eval.estimators:
        if est not in ESTIMATOR_MODES:
            raise ConfigError(f"[eval] estimators: unknown estimator {est!r}")
    if not cfg.eval.n_values or min(cfg.eval.n_values) < 1:
        raise ConfigError("[eval] n_values must be positive")
    if cfg.eval.seeds < 1 or cfg.eval.bootstrap < 2:
        raise ConfigError("[eval] needs seeds >= 1 and bootstrap >= 2")
    c = cfg.eval.concept
    if not (c in CONCEPT_SOURCES or c.startswith("kmeans:") or c.startswith("learned:")):
        raise ConfigError(f"[eval] concept: unknown concept source {c!r}")
    if c.startswith("kmeans:"):
        try:
            int(c.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"[eval] concept: bad cluster count in {c!r}") from exc
    if cfg.eval.pd_normalization not in ("per_step", "pooled"):
        raise ConfigError("[eval] pd_normalization must be per_step or pooled")
    if len(cfg.learn.stages) != 3 or min(cfg.learn.stages) < 0:
        raise ConfigError("[learn] stages must be three non-negative epoch budgets")
    if cfg.intervene.criterion not in CRITERION_KINDS:
        raise ConfigError(f"[intervene] criterion: unknown kind {cfg.intervene.criterion!r}")
    for s in cfg.intervene.strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"[intervene] strategies: unknown strategy {s!r}")
    if not 1 <= cfg.ablate.k_min <= cfg.ablate.k_max:
        raise ConfigError("[ablate] needs 1 <= k_min <= k_max")
    d = cfg.data
    if min(d.n_train, d.n_val, d.n_test, d.pool_size) < 0:
        raise ConfigError("[data] counts must be non-negative")
    if cfg.experiment.jobs < 1:
        raise ConfigError("[experiment] jobs must be >= 1")
