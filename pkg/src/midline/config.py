"""Plain-text run configuration: one ``section.key = value`` per line.

Sections map onto the dataclasses of each component::

    phantom.amplitude = 12.0
    model.refine = True
    loss.mu = 0.5
    train.epochs = 30
    rectifier.mode = param
    data.n_train = 200

Values are Python literals (numbers, booleans, tuples); anything that does not
parse as a literal is kept as a string. ``#`` starts a comment.
"""
from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields, replace

from .losses import LossWeights
from .model import CarNetConfig
from .phantom import PhantomSpec
from .rectifier import RectifierConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed line, unknown key or invalid value."""


@dataclass
class DataConfig:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    delta: float = 1.0      # connectivity tolerance used by the indicator
    worst_k: int = 5        # overlays written for the k worst samples by LDE

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("dataset sizes must be non-negative")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    model: CarNetConfig = field(default_factory=CarNetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    rectifier: RectifierConfig = field(default_factory=RectifierConfig)
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("phantom", "model", "loss", "train", "rectifier", "data")

    def as_dict(self):
        return {s: asdict(getattr(self, s)) for s in self.SECTIONS}


def _parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(default, value, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = (value,)
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key}: expected a tuple, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        return str(value)
    return value


def parse_assignments(lines, source="<config>"):
    """Iterable of ``section.key = value`` strings -> {section: {key: value}}."""
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"{source}: line {lineno}: key {key!r} must be 'section.key'")
        section, name = key.split(".")
        out.setdefault(section, {})[name] = _parse_value(value)
    return out


def build(assignments, base=None):
    """Apply parsed assignments on top of ``base`` (defaults when None)."""
    cfg = base or RunConfig()
    updates = {}
    for section, values in assignments.items():
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        current = getattr(cfg, section)
        known = {f.name for f in fields(current)}
        kw = {}
        for name, value in values.items():
            if name not in known:
                raise ConfigError(f"unknown key {section}.{name}")
            kw[name] = _coerce(getattr(current, name), value, f"{section}.{name}")
        try:
            updates[section] = replace(current, **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from None
    return replace(cfg, **updates)


def load(path=None, overrides=()):
    """Read a config file (optional) and apply ``key=value`` overrides in order."""
    assignments = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        assignments = parse_assignments(text.splitlines(), str(path))
    cfg = build(assignments)
    if overrides:
        cfg = build(parse_assignments(overrides, "--set"), cfg)
    return cfg


def dumps(cfg):
    lines = []
    for section, values in cfg.as_dict().items():
        for name, value in values.items():
            if isinstance(value, list):
                value = tuple(value)
            lines.append(f"{section}.{name} = {value!r}" if not isinstance(value, str)
                         else f"{section}.{name} = {value}")
        lines.append("")
    return "\n".join(lines)
