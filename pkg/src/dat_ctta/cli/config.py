"""Flat ``key = value`` run configuration with dotted namespaces.

Every namespace maps onto one frozen dataclass; keys are field names. Values
are parsed according to the field's type: ints, floats, strings, booleans
(true/false) and comma-separated tuples. Blank lines and ``#`` comments are
ignored. Unknown namespaces or keys are errors, so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..bench.scenes import SceneConfig
from ..bench.stream import StreamConfig
from ..core import PartitionConfig, PauConfig, UncertaintyConfig
from ..engine import AdaptConfig, EngineConfig
from ..errors import ConfigError, LoadError
from ..segnet import ModelConfig
from ..training import PretrainConfig

DEFAULT_BUDGETS = (0.001, 0.01, 0.05, 0.10, 0.25, 0.50)


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    # When false the ``seconds`` column is written as 0 so reruns are byte-identical.
    timing: bool = True
    run_id: str = ""
    # Parallel worker processes for ablate/sweep; 0 means one per CPU.
    workers: int = 0

    def validate(self) -> "RunOptions":
        if self.seed < 0:
            raise ConfigError(f"run.seed must be >= 0, got {self.seed}")
        if self.workers < 0:
            raise ConfigError(f"run.workers must be >= 0, got {self.workers}")
        if any(c in self.run_id for c in ",\n\r\"/\\"):
            raise ConfigError(f"run.run_id may not contain commas, quotes, slashes or newlines: {self.run_id!r}")
        return self


@dataclass(frozen=True)
class SweepConfig:
    budgets: tuple[float, ...] = DEFAULT_BUDGETS

    def validate(self) -> "SweepConfig":
        if not self.budgets:
            raise ConfigError("sweep.budgets must not be empty")
        for b in self.budgets:
            if not 0.0 <= b <= 0.5:
                raise ConfigError(f"sweep budgets must lie in [0, 0.5], got {b}")
        return self


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    pau: PauConfig = field(default_factory=PauConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    run: RunOptions = field(default_factory=RunOptions)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "Config":
        for f in fields(self):
            getattr(self, f.name).validate()
        self.scene.validate(2 ** self.model.depth)
        if self.scene.num_classes != self.model.num_classes:
            raise ConfigError(f"scene.num_classes ({self.scene.num_classes}) != model.num_classes "
                              f"({self.model.num_classes})")
        return self

    def engine(self) -> EngineConfig:
        return EngineConfig(self.adapt, self.uncertainty, self.partition, self.pau)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


NAMESPACES = tuple(f.name for f in fields(Config))


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_scalar(text: str, kind, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_value(text: str, kind, key: str):
    if typing.get_origin(kind) is tuple:
        inner = typing.get_args(kind)[0]
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(t, inner, key) for t in items)
    return _parse_scalar(text.strip(), kind, key)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def parse_overrides(text: str, source: str = "<config>") -> dict[str, dict[str, object]]:
    out: dict[str, dict[str, object]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} needs a namespace (one of {', '.join(NAMESPACES)})")
        ns, name = key.split(".", 1)
        if ns not in NAMESPACES:
            raise ConfigError(f"{source}:{lineno}: unknown namespace {ns!r}")
        hints = _hints(type(getattr(Config(), ns)))
        if name not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out.setdefault(ns, {})[name] = parse_value(value, hints[name], key)
    return out


def apply_overrides(cfg: Config, overrides: dict[str, dict[str, object]]) -> Config:
    parts = {ns: replace(getattr(cfg, ns), **vals) for ns, vals in overrides.items()}
    return replace(cfg, **parts)


def loads(text: str, source: str = "<config>", base: Config | None = None) -> Config:
    return apply_overrides(base or Config(), parse_overrides(text, source)).validate()


def load(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"{path}: cannot read config: {exc}") from exc
    return loads(text, str(path))


def dumps(cfg: Config) -> str:
    lines = []
    for ns in NAMESPACES:
        section = getattr(cfg, ns)
        for f in fields(section):
            lines.append(f"{ns}.{f.name} = {format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_dict(data: dict) -> Config:
    """Inverse of :meth:`Config.to_dict` (JSON turns tuples into lists)."""
    parts = {}
    for ns in NAMESPACES:
        cls = type(getattr(Config(), ns))
        hints = _hints(cls)
        vals = {}
        for k, v in data.get(ns, {}).items():
            if k not in hints:
                raise ConfigError(f"unknown key {ns}.{k} in stored config")
            vals[k] = tuple(v) if isinstance(v, list) else v
        parts[ns] = cls(**vals)
    return Config(**parts)
