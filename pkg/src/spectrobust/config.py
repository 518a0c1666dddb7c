"""Experiment configuration: a YAML key-value tree mapped onto dataclasses.

Grammar (every key optional, unknown keys are rejected)::

    seed: 0                       # global seed; --seed overrides it
    output_dir: runs/default      # --out overrides it
    dataset:
      source: synthetic           # synthetic | idx
      n_classes: 4
      per_class: 500
      size: 32
      channels: 3
      seed: 7
      noise: 0.03
      contrast: [0.12, 0.3]
      images_path: null           # idx only
      labels_path: null           # idx only
      split: [0.7, 0.15, 0.15]
    training:
      enabled: true               # false: checkpoints must already exist
      epochs: null                # null keeps each model's own default
      batch_size: 64
      learning_rate: 0.001
      label_smoothing: 0.1
    models:                       # one entry per classifier
      - name: cnn
        arch: cnn                 # cnn | vit
        params: {}                # constructor keyword arguments
        checkpoint: null          # default <output_dir>/checkpoints/<name>.ckpt
    attack:
      n_images: 200               # correctly classified test images per model
      components: [[mag], [phase], [pixel]]
      lam: 1.0                    # used by the `attack` subcommand
      lambdas: [1, 1000, 5000, 10000, 50000, 100000, 500000, 1000000]
      bands: [null]               # null = full spectrum, or a list of regions
      distance: l2                # l2 | squared | mse
      learning_rate: 0.005
      weight_decay: 0.000005
      max_iter: 1000
      patience: 5
      dtype: float32
      chunk_size: 50
    baselines:
      enabled: true
      epsilons: [0.1/255, 0.5/255, 1/255, 4/255, 8/255]   # as fractions of 1
      pgd_iters: 10
    metrics: [psnr, ms_ssim, mdsi]
    curves:
      bins: 10
    analysis:
      region_histograms: true
      linearity: {enabled: true, n_images: 5, lam: 5000}
      reduction: {enabled: true, n_images: 200}
      recombination: {enabled: true, n_images: 100, max_pairs: null}
      attention: {enabled: true, n_images: 50, lam: 1000, bins: 10}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from .attacks import COMPONENTS, DISTANCES, EPSILON_GRID, LAMBDA_GRID
from .metrics import AXES


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    n_classes: int = 4
    per_class: int = 500
    size: int = 32
    channels: int = 3
    seed: int = 7
    noise: float = 0.03
    contrast: Tuple[float, float] = (0.12, 0.3)
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    split: Tuple[float, float, float] = (0.7, 0.15, 0.15)


@dataclass
class TrainingConfig:
    enabled: bool = True
    epochs: Optional[int] = None
    batch_size: int = 64
    learning_rate: float = 1e-3
    label_smoothing: float = 0.1


@dataclass
class ModelEntry:
    name: str = "cnn"
    arch: str = "cnn"
    params: Dict[str, Any] = field(default_factory=dict)
    checkpoint: Optional[str] = None


@dataclass
class AttackGrid:
    n_images: int = 200
    components: List[List[str]] = field(default_factory=lambda: [["mag"], ["phase"], ["pixel"]])
    lam: float = 1.0
    lambdas: List[float] = field(default_factory=lambda: list(LAMBDA_GRID))
    bands: List[Optional[List[int]]] = field(default_factory=lambda: [None])
    distance: str = "l2"
    learning_rate: float = 5e-3
    weight_decay: float = 5e-6
    max_iter: int = 1000
    patience: int = 5
    dtype: str = "float32"
    chunk_size: int = 50


@dataclass
class BaselineConfig:
    enabled: bool = True
    epsilons: List[float] = field(default_factory=lambda: list(EPSILON_GRID))
    pgd_iters: int = 10


@dataclass
class CurveConfig:
    bins: int = 10


@dataclass
class LinearityConfig:
    enabled: bool = True
    n_images: int = 5
    lam: float = 5e3


@dataclass
class ReductionConfig:
    enabled: bool = True
    n_images: int = 200


@dataclass
class RecombinationConfig:
    enabled: bool = True
    n_images: int = 100
    max_pairs: Optional[int] = None


@dataclass
class AttentionConfig:
    enabled: bool = True
    n_images: int = 50
    lam: float = 1e3
    bins: int = 10


@dataclass
class AnalysisConfig:
    region_histograms: bool = True
    linearity: LinearityConfig = field(default_factory=LinearityConfig)
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    recombination: RecombinationConfig = field(default_factory=RecombinationConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)


def _default_models() -> List[ModelEntry]:
    return [ModelEntry("cnn", "cnn"), ModelEntry("vit", "vit")]


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    models: List[ModelEntry] = field(default_factory=_default_models)
    attack: AttackGrid = field(default_factory=AttackGrid)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    metrics: List[str] = field(default_factory=lambda: list(AXES))
    curves: CurveConfig = field(default_factory=CurveConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring ``output_dir``."""
        data = self.to_dict()
        data.pop("output_dir")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> "ExperimentConfig":
        if self.dataset.source not in ("synthetic", "idx"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'idx', got {self.dataset.source!r}")
        if self.dataset.source == "idx" and not (self.dataset.images_path and self.dataset.labels_path):
            raise ConfigError("idx datasets need images_path and labels_path")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"model names must be unique, got {names}")
        for m in self.models:
            if m.arch not in ("cnn", "vit"):
                raise ConfigError(f"unknown model arch {m.arch!r}")
        for comps in self.attack.components:
            if not comps or set(comps) - set(COMPONENTS):
                raise ConfigError(f"bad attack components {comps}")
        if self.attack.distance not in DISTANCES:
            raise ConfigError(f"attack.distance must be one of {DISTANCES}")
        if not self.attack.lambdas or min(self.attack.lambdas) <= 0:
            raise ConfigError("attack.lambdas must be a nonempty list of positive values")
        for axis in self.metrics:
            if axis not in AXES:
                raise ConfigError(f"unknown metric {axis!r}")
        self.baselines.epsilons = [_number(e, "baselines.epsilons") for e in self.baselines.epsilons]
        if min(self.baselines.epsilons, default=1.0) <= 0:
            raise ConfigError("baselines.epsilons must be positive")
        return self


def _number(value: Any, where: str) -> float:
    """A float, or a string 'a/b' such as '8/255'."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        num, _, den = str(value).partition("/")
        return float(num) / float(den) if den else float(num)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{where}: cannot read {value!r} as a number") from None


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    hints = _field_types(cls)
    kwargs = {}
    for key, value in data.items():
        sub = hints.get(key)
        path = f"{where}.{key}" if where else key
        if sub == "models":
            kwargs[key] = [_build(ModelEntry, v, f"{path}[{i}]") for i, v in enumerate(value or [])]
        elif sub is not None:
            kwargs[key] = _build(sub, value, path)
        elif isinstance(value, list) and isinstance(fields[key].default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _field_types(cls) -> Dict[str, Any]:
    nested = {
        ExperimentConfig: {
            "dataset": DatasetConfig,
            "training": TrainingConfig,
            "models": "models",
            "attack": AttackGrid,
            "baselines": BaselineConfig,
            "curves": CurveConfig,
            "analysis": AnalysisConfig,
        },
        AnalysisConfig: {
            "linearity": LinearityConfig,
            "reduction": ReductionConfig,
            "recombination": RecombinationConfig,
            "attention": AttentionConfig,
        },
    }
    return nested.get(cls, {})


def config_from_dict(data: Optional[Dict[str, Any]]) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path: Union[str, Path], include_output_dir: bool = True) -> None:
    data = cfg.to_dict()
    if not include_output_dir:
        data.pop("output_dir")
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))
