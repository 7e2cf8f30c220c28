"""Run configuration: nested dataclasses, strict JSON loading and dotted overrides.

Unknown keys are rejected with the full dotted path; every default is echoed
when the resolved configuration is dumped.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backbone import EncoderConfig
from .datamodel import ORGANS
from .losses import LossConfig
from .model import ModelConfig
from .synth import SynthConfig


class ConfigKeyError(KeyError):
    def __init__(self, key: str, message: str | None = None):
        super().__init__(key)
        self.key = key
        self.message = message or f"unknown config key {key!r}"

    def __str__(self):
        return self.message


@dataclass
class AugmentConfig:
    enabled: bool = True
    spatial_scale: float = 0.10     # zoom factor drawn from [1 - s, 1 + s]
    intensity_scale: float = 0.05
    flip_axes: tuple[int, ...] = (0, 1, 2)
    flip_p: float = 0.5
    cutout_count: int = 1
    cutout_frac: float = 0.10       # box side as a fraction of each dim
    cutout_size: tuple[int, int, int] | None = None  # explicit box size, overrides cutout_frac


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-5
    lr_step: int = 20
    lr_gamma: float = 0.5
    batch_size: int = 8
    seed: int = 0
    grad_clip: float = 5.0
    weight_decay: float = 0.0
    use_cca: bool = True
    eval_every: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Piecewise-constant schedule; ``epoch`` counts from 1."""
        return self.lr * self.lr_gamma ** ((epoch - 1) // self.lr_step)


@dataclass
class DataConfig:
    manifest: str | None = None
    test_manifest: str | None = None
    k: int = 5
    split_seed: int = 0


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    strategies: tuple[str, ...] = ("Concat", "PredSum", "LowRank", "FiLM")
    include_single_organ: bool = False
    gradcam_cases: int = 20
    gradcam_organ: str = "esophagus"
    gradcam_target: str = "G3"


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_json(self) -> dict:
        return _jsonable(asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def replace(self, overrides: dict) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``{"model.use_ori": False}``."""
        doc = self.to_json()
        for key, value in overrides.items():
            _set_dotted(doc, key, value)
        return from_dict(doc)


# fields whose keys are organ names rather than schema keys
_ORGAN_MAPS = {"model.input_dims", "model.strides"}

# desk-scale training: random init needs a larger step size than fine-tuning a pretrained backbone
PRESETS = {
    "default": {},
    "desk": {
        "train.lr": 1e-3,
        "train.epochs": 12,
        "train.lr_step": 10,
        "train.eval_every": 4,
        # phantom noise is 0.05, so a 0.1 window puts lesions a few units above tissue
        "model.intensity_scale": 0.1,
    },
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _merge(base: dict, update: dict, prefix: str = ""):
    where = prefix.rstrip(".")
    for key, value in update.items():
        path = f"{prefix}{key}"
        if where in _ORGAN_MAPS:
            if key not in ORGANS:
                raise ConfigKeyError(path, f"unknown organ {key!r} in {where}")
            base[key] = value
        elif key not in base:
            raise ConfigKeyError(path)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigKeyError(path, f"config key {path!r} expects an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _set_dotted(doc: dict, key: str, value):
    parts = key.split(".")
    node = doc
    for i, part in enumerate(parts[:-1]):
        path = ".".join(parts[: i + 1])
        if not isinstance(node, dict) or part not in node:
            raise ConfigKeyError(path)
        node = node[part]
    last = parts[-1]
    parent = ".".join(parts[:-1])
    if not isinstance(node, dict):
        raise ConfigKeyError(key)
    if last not in node and not (parent in _ORGAN_MAPS and last in ORGANS):
        raise ConfigKeyError(key)
    if isinstance(node.get(last), dict) and isinstance(value, dict):
        merged = copy.deepcopy(node[last])
        _merge(merged, value, key + ".")
        node[last] = merged
    else:
        node[last] = value


def _build(cls, doc: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in doc:
            continue
        value = doc[f.name]
        sub = {
            "synth": SynthConfig, "model": ModelConfig, "train": TrainConfig, "loss": LossConfig,
            "data": DataConfig, "experiment": ExperimentConfig, "augment": AugmentConfig,
            "encoder": EncoderConfig,
        }.get(f.name)
        if sub is not None and isinstance(value, dict):
            value = _build(sub, value)
        elif isinstance(value, list) and f.name not in ("strides",):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def from_dict(doc: dict) -> RunConfig:
    base = RunConfig().to_json()
    _merge(base, doc)
    try:
        return _build(RunConfig, base)
    except (TypeError, ValueError) as exc:
        raise ConfigKeyError("<value>", f"invalid config value: {exc}") from exc


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigKeyError(text, f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(source: str | None = None, overrides=()) -> RunConfig:
    """``source`` is a JSON file path or a preset name (``default``, ``desk``)."""
    doc = RunConfig().to_json()
    preset = {}
    if source in PRESETS:
        preset = PRESETS[source]
    elif source is not None:
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"config file {source} not found")
        _merge(doc, json.loads(path.read_text()))
    for key, value in preset.items():
        _set_dotted(doc, key, value)
    for item in overrides:
        key, value = item if isinstance(item, tuple) else parse_override(item)
        _set_dotted(doc, key, value)
    return from_dict(doc)
