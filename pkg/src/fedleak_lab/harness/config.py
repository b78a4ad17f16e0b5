"""Strict JSON experiment configuration.

Every section is a dataclass; unknown keys, wrong types and failed
invariants raise :class:`ConfigError` naming the offending field path.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..attack import AttackConfig
from ..defenses import DefenseConfig

CI_ITERATION_CAP = 3000


class ConfigError(ValueError):
    """Invalid or unparseable configuration."""


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"
    kind: str = "blobs"
    n: int = 200
    shape: tuple = (1, 16, 16)
    classes: int = 10
    images: str | None = None
    labels: str | None = None
    root: str | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "images"):
            raise ValueError("source must be 'synthetic', 'idx' or 'images'")
        if self.source == "idx" and (not self.images or not self.labels):
            raise ValueError("idx source needs 'images' and 'labels' paths")
        if self.source == "images" and not self.root:
            raise ValueError("images source needs a 'root' directory")
        if len(self.shape) != 3:
            raise ValueError("shape must be [C, H, W]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class ModelSection:
    name: str = "convnet"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        from ..models import ZOO
        if self.name not in ZOO:
            raise ValueError(f"unknown model {self.name!r}; choose from {sorted(ZOO)}")


@dataclass(frozen=True)
class InitSection:
    scheme: str = "default-random"
    a: float = -0.5
    b: float = 0.5
    path: str | None = None

    def __post_init__(self):
        if self.scheme not in ("default-random", "wide-uniform", "from-file"):
            raise ValueError("scheme must be default-random, wide-uniform or from-file")
        if self.scheme == "from-file" and not self.path:
            raise ValueError("from-file init needs a path")


@dataclass(frozen=True)
class PartitionSection:
    mode: str = "iid"
    classes_per_client: int = 2
    sizes: tuple = ()
    groups: int = 5
    alpha: float = 0.5

    def __post_init__(self):
        from ..fl import PARTITION_MODES
        if self.mode not in PARTITION_MODES:
            raise ValueError(f"partition mode must be one of {PARTITION_MODES}")


@dataclass(frozen=True)
class FLSection:
    clients: int = 10
    rounds: int = 1
    participants: int | None = None
    batch_size: int = 8
    local_steps: int = 1
    local_epochs: float | None = None
    lr: float = 0.1
    partition: PartitionSection = field(default_factory=PartitionSection)

    def __post_init__(self):
        if self.clients < 1 or self.rounds < 1 or self.batch_size < 1 or self.local_steps < 1:
            raise ValueError("clients, rounds, batch_size and local_steps must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class AttackSection:
    config: AttackConfig = field(default_factory=AttackConfig)
    clients: tuple = (0,)
    label_source: str = "infer"

    def __post_init__(self):
        if self.label_source not in ("infer", "true"):
            raise ValueError("label_source must be 'infer' or 'true'")


@dataclass(frozen=True)
class MetricsSection:
    exclusive: bool = False
    grad_distance: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    init: InitSection = field(default_factory=InitSection)
    fl: FLSection = field(default_factory=FLSection)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    attack_rounds: tuple = (0,)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output: str = "out"
    seed: int = 0
    ci_iterations: int = CI_ITERATION_CAP

    def __post_init__(self):
        if any(not 0 <= r < self.fl.rounds for r in self.attack_rounds):
            raise ValueError(f"attack rounds {list(self.attack_rounds)} outside simulated rounds 0..{self.fl.rounds - 1}")
        if any(not 0 <= c < self.fl.clients for c in self.attack.clients):
            raise ValueError("attacked client ids must lie within the client range")
        if self.ci_iterations < 1:
            raise ValueError("ci_iterations must be positive")

    def effective_iterations(self, full: bool) -> int:
        it = self.attack.config.iterations
        return it if full else min(it, self.ci_iterations)


# ---------------------------------------------------------------------------
# strict conversion


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def from_dict(cls, data, path: str = "config"):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {name: _convert(hints[name], value, f"{path}.{name}") for name, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def to_dict(cfg) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(cfg)


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=1, sort_keys=True)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return from_dict(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg) + "\n")


def with_overrides(cfg: ExperimentConfig, **top) -> ExperimentConfig:
    return dataclasses.replace(cfg, **top)


def resolve_path(cfg: ExperimentConfig, dotted: str):
    """Value at a dotted path such as ``defense.epsilon`` or ``attack.config.ratio``."""
    obj = cfg
    for part in dotted.split("."):
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"cannot resolve {dotted!r} at {part!r}")
        obj = getattr(obj, part)
    return obj


def set_path(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """A copy of ``cfg`` with the dotted field replaced (validated through the JSON path)."""
    resolve_path(cfg, dotted)
    data = copy.deepcopy(to_dict(cfg))
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value
    return from_dict(ExperimentConfig, data)
