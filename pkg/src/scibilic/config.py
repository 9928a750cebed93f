"""Run configuration: one JSON document covering every stage of the pipeline.

Schema (all keys optional; omitted keys take the defaults shown by
``python -m scibilic.cli show-config``)::

    {
      "seed": int, "output_dir": str,
      "data":  {"n_train", "n_val", "phantom": {PhantomSpec fields}},
      "model": {UNetConfig fields},
      "train": {TrainConfig fields except seed},
      "mc":    {McConfig fields except seed},
      "sweep": {SweepConfig fields}
    }

``seed`` is the only seed; stage configs receive it on construction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import DEFAULT_IOU_THRESHOLDS, DEFAULT_THRESHOLDS, DETECTION_BINARIZATION
from .inference import McConfig
from .phantom import PhantomSpec
from .trainer import TrainConfig
from .unet import UNetConfig

__all__ = ["ConfigError", "DataConfig", "SweepConfig", "RunConfig", "load_config", "apply_overrides"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 16
    n_val: int = 5
    phantom: PhantomSpec = field(default_factory=PhantomSpec)


@dataclass(frozen=True)
class SweepConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    anomalies_per_case: int = 5
    anomaly_side_fraction: float = 0.25
    detection_binarization: float = DETECTION_BINARIZATION
    resamples: int = 1000
    level: float = 0.95
    normalize_region: str = "foreground"  # or "volume"

    def __post_init__(self):
        if self.normalize_region not in ("foreground", "volume"):
            raise ConfigError(f"sweep.normalize_region must be 'foreground' or 'volume', got {self.normalize_region!r}")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))


_SEEDED = {"train", "mc"}
_SECTIONS = {"data": DataConfig, "model": UNetConfig, "train": TrainConfig, "mc": McConfig, "sweep": SweepConfig}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mc: McConfig = field(default_factory=McConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))
        object.__setattr__(self, "mc", dataclasses.replace(self.mc, seed=self.seed))

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "output_dir": self.output_dir}
        for name in _SECTIONS:
            d = _plain(dataclasses.asdict(getattr(self, name)))
            if name in _SEEDED:
                d.pop("seed")
            out[name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
        _reject_unknown(raw, {"seed", "output_dir", *_SECTIONS}, "")
        kwargs = {k: raw[k] for k in ("seed", "output_dir") if k in raw}
        for name, klass in _SECTIONS.items():
            if name in raw:
                kwargs[name] = _build(klass, raw[name], name, exclude={"seed"} if name in _SEEDED else set())
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _reject_unknown(raw: dict, allowed, prefix: str):
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config key {prefix + key!r}")


def _build(klass, raw, prefix: str, exclude=frozenset()):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {prefix!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(klass)}
    _reject_unknown(raw, set(fields) - set(exclude), prefix + ".")
    kwargs = {}
    for key, value in raw.items():
        if key == "phantom" and klass is DataConfig:
            value = _build(PhantomSpec, value, f"{prefix}.phantom")
        kwargs[key] = value
    try:
        return klass(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix!r} section: {exc}") from exc


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if "," in text:
            return [_parse_value(part) for part in text.split(",")]
        return text


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"train.epochs": "2", ...}``; values are parsed as JSON when possible."""
    raw = config.to_dict()
    for dotted, text in overrides.items():
        parts = dotted.split(".")
        node = raw
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = _parse_value(text) if isinstance(text, str) else text
    return RunConfig.from_dict(raw)
