"""Declarative experiment configuration, loaded from YAML or JSON."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .active import ALConfig
from .backbone import BackboneConfig
from .data import (
    AugmentSpec,
    Dataset,
    Normalization,
    channel_stats,
    load_image_dataset,
    make_synthetic,
    read_manifest_normalization,
)
from .layers import InitSpec
from .ojkd import build_model, parse_head_variant
from .optim import OptimizerConfig


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | idx | dir
    kind: str = "blobs"
    n_per_class: int = 250
    test_per_class: int = 200
    classes: int = 4
    noise: float = 1.0
    dim: int = 16
    image_size: int | None = None
    spread: float = 1.0
    seed: int = 0
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "dir"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source != "synthetic" and not (self.train_path and self.test_path):
            raise ValueError(f"data source {self.source!r} needs train_path and test_path")


@dataclass
class AugmentConfig:
    hflip: bool = False
    crop: int | None = None
    padding: int = 0
    normalize: bool = True


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(kind="mlp", input_shape=(16,), stage_widths=[64], d_bbf=64))
    variant: str = "fr_ojkd"
    d_frf: int = 64
    init_scheme: str = "kaiming_uniform"
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr0=0.1, epochs=30, batch_size=32))
    al: ALConfig = field(default_factory=ALConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str | None = None

    def __post_init__(self):
        parse_head_variant(self.variant)
        InitSpec(self.init_scheme)
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be nonempty and distinct, got {self.seeds}")
        self.al.seeds = list(self.seeds)

    # -- serialisation --------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["al"].pop("seeds", None)
        d["backbone"]["input_shape"] = list(self.backbone.input_shape)
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)
        d.pop("name", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw or {})
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        sub = {"data": DataConfig, "backbone": BackboneConfig, "optimizer": OptimizerConfig, "al": ALConfig, "augment": AugmentConfig}
        kwargs = {}
        for key, value in raw.items():
            if key in sub and isinstance(value, dict):
                known = {f.name for f in fields(sub[key])}
                bad = set(value) - known
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                if key == "al":
                    value = {**value, "seeds": raw.get("seeds", [0])}
                value = sub[key](**value)
            kwargs[key] = value
        return cls(**kwargs)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if v is None:
                continue
            if k == "strategy":
                d["al"]["strategy"] = v
            else:
                d[k] = v
        return ExperimentConfig.from_dict(d)


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return ExperimentConfig.from_dict(raw)


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def load_data(config: DataConfig) -> tuple[Dataset, Dataset]:
    if config.source == "synthetic":
        return make_synthetic(
            config.kind,
            n_per_class=config.n_per_class,
            classes=config.classes,
            noise=config.noise,
            seed=config.seed,
            dim=config.dim,
            test_per_class=config.test_per_class,
            image_size=config.image_size,
            spread=config.spread,
        )
    train = load_image_dataset(config.train_path, config.source, "train")
    test = load_image_dataset(config.test_path, config.source, "test")
    return train, test


def resolve_pipeline(config: ExperimentConfig, train: Dataset) -> tuple[AugmentSpec | None, Normalization | None]:
    """Normalisation stats always come from the training split."""
    norm = None
    if config.augment.normalize:
        if config.data.source == "dir":
            norm = read_manifest_normalization(config.data.train_path)
        norm = norm or channel_stats(train)
    aug = None
    if train.is_image and (config.augment.hflip or config.augment.crop):
        crop = (config.augment.crop, config.augment.crop) if config.augment.crop else None
        aug = AugmentSpec(hflip=config.augment.hflip, crop_size=crop, crop_padding=config.augment.padding, normalize=norm)
    return aug, norm


def model_factory(config: ExperimentConfig, num_classes: int):
    def factory(init_seed: int):
        return build_model(config.variant, config.backbone, num_classes, config.d_frf, InitSpec(config.init_scheme, init_seed))

    return factory

