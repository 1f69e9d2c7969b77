"""Run configuration and its flat ``section.key = value`` text format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .ctcl import EncoderConfig
from .fusion import HeadConfig, Stage2Config
from .predictor import PredictorConfig, PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class PseudoConfig:
    block: int = 5
    n_components: int = 3
    n_changed: int = 500
    n_unchanged: int = 500
    ranked: bool = True


@dataclass(frozen=True)
class DataConfig:
    scenes: tuple[str, ...] = ()
    patch: int = 7

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError(f"patch must be a positive odd integer, got {self.patch}")


# filled in from the scene and other sections by RunConfig.for_bands
_DERIVED = {("predictor", "bands"), ("predictor", "patch"), ("encoder", "bands"), ("head", "bands"),
            ("head", "patch"), ("head", "feat_dim"), ("head", "n_timesteps")}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    stage1: PretrainConfig = field(default_factory=PretrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)

    def for_bands(self, bands: int) -> tuple[PredictorConfig, EncoderConfig, HeadConfig]:
        K = self.data.patch
        pc = replace(self.predictor, bands=bands, patch=K)
        ec = replace(self.encoder, bands=bands)
        hc = replace(self.head, bands=bands, patch=K, feat_dim=ec.feat_dim,
                     n_timesteps=len(pc.feature_timesteps))
        return pc, ec, hc

    def override(self, **sections) -> "RunConfig":
        """``cfg.override(stage2={"epochs": 5}, seed=3)``"""
        out = self
        for name, value in sections.items():
            if isinstance(value, dict):
                try:
                    value = replace(getattr(out, name), **value)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"config section {name!r}: {e}") from e
            out = replace(out, **{name: value})
        return out


def reference_profile() -> RunConfig:
    """Full-scale settings: batch 128, patch 7, T = 200, AdamW 1e-5 for 1000 epochs,
    Adadelta lr 1 decaying linearly to 0 over 200 epochs, 500 + 500 pseudo-labelled pixels."""
    return RunConfig()


def desk_profile() -> RunConfig:
    """Small CPU-sized model and short schedules for synthetic 64 x 64 scenes."""
    return RunConfig(
        predictor=PredictorConfig(token_dim=32, n_heads=4, depth=2),
        stage1=PretrainConfig(epochs=20, lr=1e-3, max_patches_per_epoch=2048),
        stage2=Stage2Config(epochs=30),
        # ranked selection keeps only the easiest pixels, which misplaces the boundary on small scenes
        pseudo=PseudoConfig(ranked=False),
    )


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union:  # Optional[X]
            if raw.lower() in ("none", ""):
                return None
            return _convert(raw, next(a for a in args if a is not type(None)), key)
        if origin is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_convert(s, args[0], key) for s in items)
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except (ValueError, StopIteration):
        raise ConfigError(f"config field {key!r}: cannot parse {raw!r} as {tp}") from None
    raise ConfigError(f"config field {key!r}: unsupported type {tp}")


def _format(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def to_text(cfg: RunConfig) -> str:
    lines = ["# diffucd run configuration", f"seed = {cfg.seed}"]
    for f in fields(cfg):
        if f.name == "seed":
            continue
        section = getattr(cfg, f.name)
        for sf in fields(section):
            if (f.name, sf.name) in _DERIVED:
                continue
            lines.append(f"{f.name}.{sf.name} = {_format(getattr(section, sf.name))}")
    return "\n".join(lines) + "\n"


def from_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    top_hints = _hints(RunConfig)
    updates: dict[str, dict] = {}
    seed = cfg.seed
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            seed = _convert(raw, int, key)
            continue
        section, _, name = key.partition(".")
        if section not in top_hints or section == "seed" or not name:
            raise ConfigError(f"line {n}: unknown config field {key!r}")
        hints = _hints(top_hints[section])
        if name not in hints:
            raise ConfigError(f"line {n}: unknown config field {key!r}")
        if (section, name) in _DERIVED:
            raise ConfigError(f"line {n}: config field {key!r} is derived from the scene and other sections")
        updates.setdefault(section, {})[name] = _convert(raw, hints[name], key)
    return cfg.override(seed=seed, **updates)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return from_text(path.read_text(), base)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_text(cfg))


def as_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
