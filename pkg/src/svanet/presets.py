"""Whole-run configuration and named presets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import config as config_text
from .core import ConfigurationError
from .data.augment import AugmentConfig
from .data.synthetic import SynthSpec
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    root: str | None = None
    num_classes: int = 3
    train_count: int = 400
    test_count: int = 100
    synth: SynthSpec = field(default_factory=SynthSpec)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_classes=3))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.model.num_classes != self.data.num_classes:
            raise ConfigurationError(f"model.num_classes {self.model.num_classes} != data.num_classes "
                                     f"{self.data.num_classes}")
        if self.data.root is None and self.data.synth.num_classes != self.data.num_classes:
            raise ConfigurationError("data.synth.num_classes must equal data.num_classes")
        if self.train.crop % 32:
            raise ConfigurationError(f"train.crop {self.train.crop} must be divisible by 32")

    def to_text(self) -> str:
        return config_text.to_text(self)


def _full() -> RunConfig:
    return RunConfig(ModelConfig(num_classes=3), TrainConfig(),
                     DataConfig(synth=SynthSpec(canvas=512, num_classes=3)))


def _small_objects() -> RunConfig:
    """3 classes, 400/100 ultra-small-object images at 128^2, width 0.25, 30 epochs, 3 seeds."""
    model = ModelConfig(num_classes=3, width_multiplier=0.25, input_hw=(128, 128))
    train = TrainConfig(epochs=30, batch_size=4, crop=128, lr_max=1e-3, lr_min=1e-5, seeds=(0, 1, 2),
                        eval_every=5, augment=AugmentConfig(crop=128))
    data = DataConfig(num_classes=3, train_count=400, test_count=100,
                      synth=SynthSpec(canvas=128, num_classes=3, objects_per_image=(1, 3),
                                      area_ratio=(0.002, 0.008), seed=0))
    return RunConfig(model, train, data)


def _tiny() -> RunConfig:
    model = ModelConfig(num_classes=3, width_multiplier=0.125, input_hw=(64, 64))
    train = TrainConfig(epochs=2, batch_size=4, crop=64, lr_max=2e-3, lr_min=1e-5, seeds=(0,),
                        eval_every=1, augment=AugmentConfig(crop=64))
    data = DataConfig(num_classes=3, train_count=8, test_count=4,
                      synth=SynthSpec(canvas=64, num_classes=3, objects_per_image=(1, 2),
                                      area_ratio=(0.002, 0.008), seed=0))
    return RunConfig(model, train, data)


PRESETS = {"full": _full, "small-objects": _small_objects, "tiny": _tiny}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def load(preset_name: str = "full", config_file=None, overrides=()) -> RunConfig:
    """Preset, then config file values, then ``key=value`` overrides."""
    cfg = preset(preset_name)
    pairs = {}
    if config_file is not None:
        with open(config_file) as fh:
            pairs.update(config_text.parse_text(fh.read()))
    for item in overrides:
        k, v = config_text.parse_override(item)
        pairs[k] = v
    return config_text.apply(cfg, pairs) if pairs else cfg


def with_model(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, **changes))
