"""Flat ``key = value`` run configuration.

Defaults reproduce the published Atari hyperparameters; desk-scale runs
override them from a file and/or ``--set key=value`` flags.
"""
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .agent import MODELS, PROFILES, Architecture
from .envs import ENVIRONMENTS, make_env
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config(TrainConfig):
    model: str = "darqn_soft"
    profile: str = "paper"
    env: str = "catch"
    env_size: int = 0          # 0: the profile's input size
    seed: int = 0
    deterministic: bool = True
    clip_rewards: bool = False
    out_dir: str = "runs/default"
    init_cnn_from: Optional[str] = None

    def validate(self):
        super().validate()
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {', '.join(MODELS)}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {', '.join(sorted(PROFILES))}")
        if self.env not in ENVIRONMENTS:
            raise ValueError(f"env must be one of {', '.join(sorted(ENVIRONMENTS))}")
        if self.env_size < 0:
            raise ValueError("env_size must be >= 0")
        if self.env_size and self.env_size != PROFILES[self.profile]["input_size"]:
            raise ValueError(f"env_size {self.env_size} does not match the {self.profile} "
                             f"profile input ({PROFILES[self.profile]['input_size']})")

    @property
    def frame_size(self):
        return self.env_size or PROFILES[self.profile]["input_size"]

    def make_env(self, seed=None):
        return make_env(self.env, size=self.frame_size,
                        seed=self.seed if seed is None else seed,
                        clip_rewards=self.clip_rewards)

    def architecture(self, actions=None):
        if actions is None:
            actions = make_env(self.env, size=self.frame_size).action_count
        return Architecture.from_profile(self.model, self.profile, actions)

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


FIELD_TYPES = {f.name: f.type for f in fields(Config)}
KEYS = [f.name for f in fields(Config)]


def _parse_value(key, text):
    kind = FIELD_TYPES[key]
    text = text.strip()
    optional = kind in (Optional[float], Optional[str])
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if kind is bool or kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text.replace("_", ""))
        if kind in (float, Optional[float]) or kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}")


def parse_lines(lines, base=None, source="<config>"):
    values = {} if base is None else dict(base)
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value)
    return values


def build(values):
    try:
        return Config(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def load(path=None, overrides=()):
    """Defaults <- file <- overrides (``key=value`` strings)."""
    values = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            values = parse_lines(fh, source=path)
    values = parse_lines(overrides, base=values, source="--set")
    cfg = build(values)
    if os.environ.get("DARQN_DETERMINISTIC", "").strip() == "1":
        cfg.deterministic = True
    return cfg


def loads(text):
    return build(parse_lines(text.splitlines()))


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(cfg):
    return "".join(f"{k} = {_format_value(getattr(cfg, k))}\n" for k in KEYS)
