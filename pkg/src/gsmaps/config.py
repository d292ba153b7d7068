"""Project configuration: an INI file with one section per concern.

Unknown sections or keys are rejected; ``to_ini`` output parses back to an
equal config.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    rig: str = ""  # empty: shipped template
    shells: str = ""  # empty: <output>/shells.npz
    anchors: str = ""
    textures: str = ""
    poses: str = ""
    cameras: str = ""
    targets: str = ""  # comma-separated image files (PNG or 4-channel GSIM), one per camera
    output: str = "out"


@dataclass
class RepresentationConfig:
    n_shells: int = 8
    adjacent_offset: float = 0.08
    gaussian_count: int = 100_000
    texture_height: int = 512
    texture_width: int = 512
    seed: int = 0


@dataclass
class RenderConfig:
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_only: bool = False
    shell_filter: Tuple[int, ...] = ()  # empty: all shells
    width: int = 512
    height: int = 512
    threads: int = 0  # 0: all available


@dataclass
class FitSection:
    iterations: int = 2000
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_s: float = 0.1
    lambda_m: float = 1.0
    batch_size: int = 0  # 0: all views each iteration
    log_interval: int = 100
    seed: int = 0


@dataclass
class BenchConfig:
    frames: int = 50
    warmup: int = 2


@dataclass
class ProjectConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    representation: RepresentationConfig = field(default_factory=RepresentationConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    fit: FitSection = field(default_factory=FitSection)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        r = self.representation
        for name in ("n_shells", "gaussian_count", "texture_height", "texture_width"):
            if getattr(r, name) < 1:
                raise ConfigError(f"representation.{name} must be positive")
        if r.gaussian_count < r.n_shells:
            raise ConfigError("representation.gaussian_count must be at least n_shells")
        if not r.adjacent_offset > 0:
            raise ConfigError("representation.adjacent_offset must be positive")
        if self.render.width < 1 or self.render.height < 1:
            raise ConfigError("render.width and render.height must be positive")
        if len(self.render.background) != 3:
            raise ConfigError("render.background needs 3 values")
        if self.render.threads < 0:
            raise ConfigError("render.threads must be non-negative")
        f = self.fit
        if f.iterations < 0 or not f.lr > 0 or not (0 < f.beta1 < 1 and 0 < f.beta2 < 1):
            raise ConfigError("fit needs iterations >= 0, lr > 0 and decays in (0, 1)")
        if self.bench.frames < 1:
            raise ConfigError("bench.frames must be positive")

    def section_path(self, key: str, default_name: str) -> Path:
        value = getattr(self.paths, key)
        return Path(value) if value else Path(self.paths.output) / default_name

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            cp[sec.name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    def with_overrides(self, section: str, **values) -> "ProjectConfig":
        """Copy with non-None ``values`` replacing fields of ``section``."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        obj = getattr(self, section)
        unknown = set(values) - {f.name for f in dataclasses.fields(obj)}
        if unknown:
            raise ConfigError(f"unknown {section} keys: {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **{section: dataclasses.replace(obj, **values)})


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, proto, where: str):
    try:
        if isinstance(proto, bool):
            low = text.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(proto, int):
            return int(text)
        if isinstance(proto, float):
            return float(text)
        if isinstance(proto, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = float if where.endswith("background") else int
            return tuple(kind(t) for t in items)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc


def parse_config(text: str) -> ProjectConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = ProjectConfig()
    sections = {f.name: f for f in dataclasses.fields(base)}
    kwargs = {}
    for name in cp.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        proto = getattr(base, name)
        fields = {f.name for f in dataclasses.fields(proto)}
        values = {}
        for key, raw in cp[name].items():
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            values[key] = _parse(raw, getattr(proto, key), f"{name}.{key}")
        kwargs[name] = dataclasses.replace(proto, **values)
    return ProjectConfig(**kwargs)


def load_config(path: Optional[str]) -> ProjectConfig:
    if not path:
        return ProjectConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text())
