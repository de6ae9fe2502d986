"""Run configuration as flat dotted-key text.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := "#" anything
    entry   := key ws* "=" ws* value
    key     := name ("." name)*          e.g. stage2.weighting.temperature
    value   := one JSON literal          number | true | false | null | "text" | [list]

Serialization writes every key in field order with ``json.dumps`` values, so
floats survive the round trip exactly. Lists load as tuples.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace

from .anchor import Stage1Config
from .envs import BEHAVIORS, ENV_NAMES
from .gate import GateConfig
from .residual import Stage2Config
from .weighting import WeightingConfig

DEFAULT_SEEDS = (0, 42, 123)

DEFAULT_TIERS = {"unimodal-quad": "medium", "bimodal-bandit": "mixture-expert",
                 "narrow-ridge": "medium", "branch-maze": "sparse-diverse"}


class ConfigError(ValueError):
    """Malformed config text, unknown key or ill-typed value."""


@dataclass(frozen=True)
class RunConfig:
    env: str = "unimodal-quad"
    tier: str = "medium"
    seeds: tuple = DEFAULT_SEEDS
    dataset_size: int = 1_000_000
    desk_scale: bool = False
    output_dir: str = "runs"
    tag: str = ""
    eval_every: int = 50_000
    eval_episodes: int = 5000
    eval_seed_offset: int = 1000
    diagnose: bool = True
    conflict_batches: int = 20
    wallclock: bool = False
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    gate: GateConfig = field(default_factory=GateConfig)

    def __post_init__(self):
        if self.env not in ENV_NAMES:
            raise ConfigError(f"unknown environment {self.env!r}")
        if self.tier not in BEHAVIORS:
            raise ConfigError(f"unknown behavior tier {self.tier!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("eval_every and eval_episodes must be >= 1")

    @property
    def run_name(self):
        return self.tag or self.stage2.variant


# ---------------------------------------------------------------- flat text

def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def flatten(obj, prefix="") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


_ANNOTATED = {"int": int, "float": float, "str": str, "bool": bool}


def _coerce(key, value, default, annotation):
    kind = type(default) if default is not None else _ANNOTATED.get(str(annotation))
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{key}: null not allowed")
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) \
                or int(value) != value:
            raise ConfigError(f"{key}: expected an integer")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    if kind is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(value)
    raise ConfigError(f"{key}: unsupported field type")


def _build(cls, flat: dict, prefix=""):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        default = _default_of(f)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), flat, key + ".")
        elif key in flat:
            kwargs[f.name] = _coerce(key, flat[key], default, f.type)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from None


def known_keys() -> list:
    return list(flatten(RunConfig()))


def from_flat(flat: dict, base: RunConfig = None) -> RunConfig:
    unknown = sorted(set(flat) - set(known_keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = flatten(base) if base is not None else {}
    merged.update(flat)
    return _build(RunConfig, merged)


def serialize(cfg: RunConfig) -> str:
    lines = []
    for k, v in flatten(cfg).items():
        lines.append(f"{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
    return "\n".join(lines) + "\n"


def parse_text(text: str) -> dict:
    flat = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if key in flat:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        try:
            flat[key] = json.loads(value.strip())
        except json.JSONDecodeError:
            raise ConfigError(f"line {n}: value is not a JSON literal") from None
    return flat


def parse(text: str, base: RunConfig = None) -> RunConfig:
    return from_flat(parse_text(text), base)


def parse_override(item: str):
    """``key=value`` from the command line; bare words count as strings."""
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def load(path, base: RunConfig = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), base)


def save(path, cfg: RunConfig):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(cfg))


# ---------------------------------------------------------------- presets

# best settings per task: (variant, weighting, stage1 extras)
_TASK = {
    "unimodal-quad": ("mlp", WeightingConfig("exponential", "hard", 1.0), {}),
    "bimodal-bandit": ("proj", WeightingConfig("exponential", "hard", 0.3),
                       {"policy_type": "gaussian"}),
    "narrow-ridge": ("proj", WeightingConfig("exponential", "soft", 0.3), {}),
    "branch-maze": ("proj", WeightingConfig("exponential", "soft", 0.3),
                    {"policy_type": "gaussian", "expectile_tau": 0.9,
                     "reward_shift": -1.0}),
}

# single-core budgets: (stage1 steps, stage2 steps, eval episodes)
_DESK = {
    "unimodal-quad": (5000, 3000, 5000),
    "bimodal-bandit": (5000, 3000, 5000),
    "narrow-ridge": (5000, 5000, 2000),
    "branch-maze": (12000, 5000, 200),
}


def preset(env: str, desk_scale: bool = True, variant: str = None, **top) -> RunConfig:
    """Task defaults, optionally shrunk to the single-core desk budget."""
    if env not in _TASK:
        raise ConfigError(f"unknown environment {env!r}")
    best, weighting, s1_extra = _TASK[env]
    s1 = replace(Stage1Config(), **s1_extra)
    s2 = replace(Stage2Config(), variant=variant or best, weighting=weighting)
    cfg = dict(env=env, tier=DEFAULT_TIERS[env], desk_scale=desk_scale)
    if desk_scale:
        n1, n2, episodes = _DESK[env]
        s1 = replace(s1, steps=n1, hidden=(64, 64))
        s2 = replace(s2, steps=n2, hidden=(64, 64), cvae_hidden=(64, 64, 64),
                     latent_hidden=(64, 64), guide_states=32)
        cfg.update(dataset_size=50_000, eval_every=1000, eval_episodes=episodes)
    elif env == "branch-maze":
        cfg.update(eval_episodes=200)
    cfg.update(top)
    return RunConfig(stage1=s1, stage2=s2, **cfg)
