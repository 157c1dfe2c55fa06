"""Run configuration: one JSON document covering every stage, with strict key checking."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .detnet import ConfigError, DetectorConfig, micro_config
from .synth import PhantomConfig
from .trainer import TrainConfig


@dataclass
class PreprocessConfig:
    spacing_mm: float = 1.0
    hu_cutoff: float = -400.0
    closing_radius: int = 3
    volume_range_l: tuple = (0.5, 12.0)
    margin_mm: float = 5.0
    allow_fallback: bool = True


@dataclass
class InferConfig:
    score_threshold: float = 0.1
    merge: str = "nms"
    nms_iou: float = 0.1
    overlap: int = 32
    soft_sigma: float = 0.5
    max_candidates: int = 5000


@dataclass
class EvalConfig:
    ignore_irrelevant: bool = True


@dataclass
class SynthConfig:
    n_scans: int = 50
    seed: int = 42
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


@dataclass
class RuntimeConfig:
    dtype: str = "float32"
    model_seed: int = 0
    threads: int = 1


SECTIONS = {
    "detector": DetectorConfig,
    "train": TrainConfig,
    "preprocess": PreprocessConfig,
    "infer": InferConfig,
    "eval": EvalConfig,
    "synth": SynthConfig,
    "runtime": RuntimeConfig,
}


def _plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if hasattr(current, "__dataclass_fields__"):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def validate(self) -> "RunConfig":
        try:
            self.detector.validate()
            self.train.validate()
            self.synth.phantom.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.detector.patch_size != self.train.patch_size:
            raise ConfigError(f"detector.patch_size {self.detector.patch_size} != "
                              f"train.patch_size {self.train.patch_size}")
        if tuple(self.detector.anchors) != tuple(self.train.anchors):
            raise ConfigError("detector.anchors and train.anchors differ")
        if self.runtime.dtype not in ("float32", "float64"):
            raise ConfigError(f"runtime.dtype must be float32 or float64, got {self.runtime.dtype}")
        if self.infer.merge not in ("nms", "soft_nms"):
            raise ConfigError(f"infer.merge must be nms or soft_nms, got {self.infer.merge}")
        if not 0 <= self.infer.overlap < self.detector.patch_size:
            raise ConfigError("infer.overlap must be in [0, patch_size)")
        return self

    def to_dict(self) -> dict:
        return _plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}")
        return _build(cls, data, "config").validate()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        data = copy.deepcopy(self.to_dict())
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)


def micro_run_config(patch_size: int = 64, anchors=(5.0, 10.0, 22.0)) -> RunConfig:
    """Desk-scale preset: micro detector, short rounds, small FP cap."""
    det = micro_config(patch_size, anchors)
    train = TrainConfig(patch_size=patch_size, anchors=tuple(anchors), epochs_per_round=20, total_epochs=100,
                        fp_cap=3, infer_overlap=3 * patch_size // 8)
    infer = InferConfig(overlap=3 * patch_size // 8, score_threshold=0.05)
    synth = SynthConfig(phantom=PhantomConfig(nodule_diameter=(5.0, 20.0)))
    return RunConfig(detector=det, train=train, infer=infer, synth=synth).validate()
