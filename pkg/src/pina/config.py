"""Experiment configuration: dataclasses plus an INI-style reader and writer.

A config file has one section per dataclass::

    [experiment]
    algorithm = pina
    C = 2
    seed = 0

    [privacy]
    epsilon = 2
    q = 0.1

Only ``experiment.C`` is required. Command-line overrides use dotted
paths such as ``privacy.epsilon=8``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

from .model import TrainConfig

ALGORITHMS = ("pina", "pina-random-init", "ifca-ldp", "fedavg")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path, self.line, self.message = path, line, message
        super().__init__(self.location() + message)

    def location(self) -> str:
        if self.path is None:
            return ""
        return f"{self.path}:{self.line or 1}: "


@dataclass(frozen=True)
class PopulationConfig:
    d: int = 16
    L: int = 4
    C_true: int = 2
    clients_per_cluster: int = 100
    samples_per_client: int = 100
    test_samples: int = 50
    class_sep: float = 3.0
    noise_std: float = 1.0
    invariant_dims: int = 8  # trailing coordinates left unrotated in every cluster

    @property
    def n_clients(self) -> int:
        return self.C_true * self.clients_per_cluster


@dataclass(frozen=True)
class ModelConfig:
    h: int = 32
    rank: int = 4
    head_scale: float = 1.0
    bias_scale: float = 1.0
    activation: str = "tanh"  # frozen feature layer: tanh or relu
    warmup_epochs: int = 0  # head-only pre-training on pooled public data; 0 disables it
    warmup_samples: int = 2000
    warmup_lr: float = 0.1

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be tanh or relu, got {self.activation!r}")
        if self.h < 1 or self.rank < 1 or self.warmup_epochs < 0:
            raise ValueError("h and rank must be positive, warmup_epochs non-negative")


@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: Optional[float] = None  # calibrate z from this when z is not given
    delta: Optional[float] = None  # defaults to 1 / |K|^1.1
    z: Optional[float] = None
    q: float = 0.1
    S: float = 0.2
    virtual_cohort: Optional[int] = None  # emulate noise of a larger cohort in stage 2


@dataclass(frozen=True)
class ExperimentConfig:
    C: int
    algorithm: str = "pina"
    seed: int = 0
    T_in: int = 10
    T_tr: int = 30
    T_no: int = 5
    random_init_scale: Optional[float] = None  # per-coordinate std; default S / sqrt(stage-1 dim)
    kmeans_restarts: int = 10
    population: PopulationConfig = field(default_factory=PopulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"experiment.algorithm must be one of {', '.join(ALGORITHMS)}; got {self.algorithm!r}")
        if self.C < 1:
            raise ConfigError("experiment.C must be at least 1")
        if self.T_in < 1 and self.algorithm == "pina":
            raise ConfigError("experiment.T_in must be at least 1 for pina")
        if self.T_tr < 0 or self.T_no < 0:
            raise ConfigError("round counts must be non-negative")
        p = self.privacy
        if not 0 < p.q <= 1:
            raise ConfigError("privacy.q must lie in (0, 1]")
        if p.S <= 0:
            raise ConfigError("privacy.S must be positive")
        if p.z is not None and p.z < 0:
            raise ConfigError("privacy.z must be non-negative")
        if p.q * self.population.n_clients < 1:
            raise ConfigError("privacy.q * number of clients must be at least 1")

    @property
    def delta(self) -> float:
        from .privacy import default_delta
        return self.privacy.delta if self.privacy.delta is not None else default_delta(self.population.n_clients)


_SECTIONS = {"population": PopulationConfig, "model": ModelConfig, "privacy": PrivacyConfig, "train": TrainConfig}
_TRAIN_ALIASES = {"E": "epochs", "beta": "batch_size", "eta": "lr"}


def _coerce(raw: str, tp) -> Any:
    if get_origin(tp) is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if raw.strip().lower() in ("", "none", "null"):
            return None
        tp = args[0]
    raw = raw.strip()
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if tp is int:
        val = float(raw)
        if not val.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(val)
    if tp is float:
        return float(raw)
    return raw


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    in_section = False
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            in_section = m.group(1).strip() == section
            if in_section and key is None:
                return no
            continue
        if in_section and key is not None and re.match(rf"\s*{re.escape(key)}\s*[=:]", line, re.IGNORECASE):
            return no
    return None


def _build(cls, values: dict[str, str], text: str, section: str, path: str | None):
    hints = get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if f.name not in _SECTIONS}
    lookup = {name.lower(): name for name in known}
    kwargs = {}
    for key, raw in values.items():
        name = lookup.get(key.lower())
        if name is None and cls is TrainConfig:
            name = _TRAIN_ALIASES.get(key)
        if name is None:
            raise ConfigError(f"unknown field {section}.{key}", path, _line_of(text, section, key))
        try:
            kwargs[name] = _coerce(raw, hints[name])
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}", path, _line_of(text, section, key)) from None
    return kwargs


def parse_config(text: str, path: str | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], path, line) from None
    data = {s: dict(parser.items(s)) for s in parser.sections()}
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.field")
        section, key = dotted.split(".", 1)
        data.setdefault(section, {})[key] = raw
    unknown = set(data) - set(_SECTIONS) - {"experiment"}
    if unknown:
        sec = sorted(unknown)[0]
        raise ConfigError(f"unknown section [{sec}]", path, _line_of(text, sec))
    if "experiment" not in data:
        raise ConfigError("missing section [experiment] with required field C", path, 1)
    exp = _build(ExperimentConfig, data["experiment"], text, "experiment", path)
    if "C" not in exp:
        raise ConfigError("missing required field experiment.C", path, _line_of(text, "experiment"))
    for section, cls in _SECTIONS.items():
        sub = _build(cls, data.get(section, {}), text, section, path)
        try:
            exp[section] = cls(**sub)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}", path, _line_of(text, section)) from None
    try:
        return ExperimentConfig(**exp)
    except ConfigError as exc:
        raise ConfigError(exc.message, path, _line_of(text, "experiment")) from None


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path), 1) from None
    return parse_config(text, str(path), overrides)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialise every effective field, so the text re-parses to an equal config."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["experiment"] = {f.name: _fmt(getattr(cfg, f.name)) for f in fields(cfg) if f.name not in _SECTIONS}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        parser[section] = {f.name: _fmt(getattr(sub, f.name)) for f in fields(sub)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path fields replaced, e.g. ``**{"privacy.z": 0.0}``."""
    top, nested = {}, {}
    for key, val in changes.items():
        if "." in key:
            sec, name = key.split(".", 1)
            nested.setdefault(sec, {})[name] = val
        else:
            top[key] = val
    for sec, vals in nested.items():
        top[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
    return dataclasses.replace(cfg, **top)
