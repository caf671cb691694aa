"""Pipeline configuration: a flat TOML file plus command-line overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ConfigError
from .fishnet import DEFAULT_OVERLAP, DEFAULT_TILE
from .losses import CLASS_NAMES
from .vector import DEFAULT_HIGH, DEFAULT_LOW, ThresholdPair

WORKERS_ENV = "COVERMAP_WORKERS"
STITCH_MODES = ("clip", "blend")


@dataclass
class PipelineConfig:
    tile: int = DEFAULT_TILE
    overlap: int = DEFAULT_OVERLAP
    tta: bool = False
    stitch_mode: str = "blend"
    window_power: float = 2.0
    # class name -> [low, high]; "default" applies to classes not listed
    thresholds: Dict[str, List[int]] = field(default_factory=lambda: {"default": [DEFAULT_LOW, DEFAULT_HIGH]})
    min_area: float = 1.0
    simplify_tolerance: float = 0.2
    predictor: str = "builtin:oracle"
    predictor_timeout: float = 300.0
    workers: int = 1
    class_names: List[str] = field(default_factory=lambda: list(CLASS_NAMES))

    def validate(self) -> "PipelineConfig":
        if self.tile <= 0:
            raise ConfigError(f"tile must be positive, got {self.tile}")
        if not 0 <= self.overlap < self.tile:
            raise ConfigError(f"overlap must be in [0, tile), got {self.overlap}")
        if self.overlap % 2:
            raise ConfigError(f"overlap must be even, got {self.overlap}")
        if self.stitch_mode not in STITCH_MODES:
            raise ConfigError(f"stitch_mode must be one of {STITCH_MODES}, got {self.stitch_mode!r}")
        if not self.window_power > 0:
            raise ConfigError("window_power must be > 0")
        if self.min_area < 0 or self.simplify_tolerance < 0:
            raise ConfigError("min_area and simplify_tolerance must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.class_names:
            raise ConfigError("class_names is empty")
        unknown = set(self.thresholds) - set(self.class_names) - {"default"}
        if unknown:
            raise ConfigError(f"thresholds for unknown classes {sorted(unknown)}")
        self.threshold_pairs()
        if not (self.predictor.startswith("builtin:") or self.predictor.startswith("cmd:")):
            raise ConfigError(f"predictor must be 'builtin:<name>' or 'cmd:<command>', got {self.predictor!r}")
        return self

    def threshold_pairs(self) -> List[ThresholdPair]:
        default = self.thresholds.get("default", [DEFAULT_LOW, DEFAULT_HIGH])
        out = []
        for name in self.class_names:
            pair = self.thresholds.get(name, default)
            if len(pair) != 2:
                raise ConfigError(f"threshold for {name!r} must be [low, high]")
            out.append(ThresholdPair(int(pair[0]), int(pair[1])))
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(asdict(self))

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        known = {f.name for f in fields(self)}
        bad = set(kwargs) - known
        if bad:
            raise ConfigError(f"unknown config keys {sorted(bad)}")
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None}).validate()


def parse_config(text: str) -> PipelineConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    known = {f.name for f in fields(PipelineConfig)}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"unknown config keys {sorted(bad)}")
    try:
        cfg = PipelineConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Config from ``path`` (or defaults), with COVERMAP_WORKERS applied."""
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    else:
        cfg = PipelineConfig().validate()
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            cfg.workers = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        cfg.validate()
    return cfg
