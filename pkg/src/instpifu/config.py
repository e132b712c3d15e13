"""Run configuration: nested dataclasses, strict JSON loading, named presets."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

ABLATIONS = ("baseline", "c0", "c1", "c2", "full")

# which instance-aligned attention parts each ablation row switches on
ABLATION_FLAGS = {
    "baseline": dict(global_instance=False, channel_filter=False, mask_head=False),
    "c0": dict(global_instance=True, channel_filter=False, mask_head=False),
    "c1": dict(global_instance=True, channel_filter=True, mask_head=False),
    "c2": dict(global_instance=True, channel_filter=False, mask_head=True),
    "full": dict(global_instance=True, channel_filter=True, mask_head=True),
}


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    channels: int = 64
    stacks: int = 2
    stride: int = 4
    depth: int = 2


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    global_dim: int = 256
    global_source: str = "crop"  # crop | roi
    crop_size: int = 32
    roi_size: int = 16
    decoder_hidden: int = 128
    decoder_layers: int = 5
    filter_hidden: int = 128
    mask_hidden: int = 64
    pe_frequencies: int = 4
    pe_on_z: bool = True
    num_categories: int = 9


@dataclass
class BackgroundConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    global_dim: int = 256
    decoder_hidden: int = 128
    decoder_layers: int = 5
    pe_frequencies: int = 4
    near: float = 0.3
    far: float = 10.0
    image_height: int = 64
    image_width: int = 64
    sigma: float = 0.1
    points_per_scene: int = 2048
    uniform_region: str = "frustum"   # or "room": frustum ∩ room bounding box


@dataclass
class OptimConfig:
    lr: float = 1e-3
    decay_factor: float = 0.2
    decay_epochs: list = field(default_factory=lambda: [15, 24])
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    mask_weight: float = 1.0
    checkpoint_epochs: list = field(default_factory=list)


@dataclass
class MetricConfig:
    cd_variant: str = "squared-sum"
    fscore_tau: float = 0.05
    n_points: int = 10000
    icp: bool = True
    icp_scale: bool = True
    mc_res: int = 64
    mc_coarse: int | None = 4


@dataclass
class DataConfig:
    preset: str = "sphere-occludes-cube"
    n_scenes: int = 500
    n_test: int = 100
    image_size: int = 64
    overlap: float = 0.3
    points_per_instance: int = 1024
    pool_size: int = 4096
    sigma: float = 0.05
    box_jitter_train: float = 0.0


@dataclass
class RunConfig:
    dataset_root: str = "runs/corpus"
    output_root: str = "runs/out"
    ablation: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    data: DataConfig = field(default_factory=DataConfig)
    boxes: str = "gt"  # gt | perturbed | file:PATH
    box_jitter: float = 2.0
    jobs: int = 1

    def validate(self) -> "RunConfig":
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.model.global_source not in ("crop", "roi"):
            raise ConfigError("model.global_source must be 'crop' or 'roi'")
        if self.metrics.cd_variant not in ("squared-sum", "squared-mean", "l1-sum", "l1-mean"):
            raise ConfigError(f"unknown cd_variant {self.metrics.cd_variant}")
        if not (self.boxes in ("gt", "perturbed") or self.boxes.startswith("file:")):
            raise ConfigError("boxes must be gt, perturbed or file:PATH")
        if self.background.uniform_region not in ("frustum", "room"):
            raise ConfigError("background.uniform_region must be 'frustum' or 'room'")
        if self.metrics.mc_res < 8:
            raise ConfigError("mc_res must be >= 8")
        if self.data.image_size % self.model.encoder.stride:
            raise ConfigError("image size must be divisible by the encoder stride")
        if self.optim.batch_size < 1 or self.optim.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.data.points_per_instance % 2:
            raise ConfigError("points_per_instance must be even")
        if self.data.n_test >= self.data.n_scenes:
            raise ConfigError("n_test must be smaller than n_scenes")
        return self

    @property
    def flags(self) -> dict:
        return ABLATION_FLAGS[self.ablation]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self, exclude=("dataset_root", "output_root", "jobs")) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, val in changes.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        return from_dict(RunConfig, d)


def from_dict(cls, data: dict[str, Any], path: str = ""):
    """Build a (nested) dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        val = data[name]
        default = getattr(defaults, name)
        if val is None and "None" in str(f.type):
            pass
        elif is_dataclass(default):
            val = from_dict(type(default), val, f"{path}{name}.")
        elif isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{path}{name} must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{path}{name} must be a number")
            val = type(default)(val) if isinstance(default, float) else val
        kwargs[name] = val
    obj = cls(**kwargs)
    return obj


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return from_dict(RunConfig, json.load(fh)).validate()


def preset(name: str) -> RunConfig:
    """Named presets: ``paper`` (published schedule and sizes), ``desk``, ``smoke``."""
    cfg = RunConfig()
    if name == "desk":
        return cfg.validate()
    if name == "paper":
        cfg.model.encoder = EncoderConfig(channels=256, stacks=4, stride=4, depth=4)
        cfg.model.crop_size = 256
        cfg.model.roi_size = 64
        cfg.model.decoder_hidden = 512
        cfg.background.encoder = EncoderConfig(channels=256, stacks=4, stride=4, depth=4)
        cfg.background.image_height, cfg.background.image_width = 484, 648
        cfg.data.image_size = 256
        cfg.optim = OptimConfig(lr=1e-4, decay_factor=0.2, decay_epochs=[50, 80], batch_size=16, epochs=100)
        cfg.metrics.mc_res = 256
        return cfg.validate()
    if name == "smoke":
        cfg.model.encoder = EncoderConfig(channels=16, stacks=1, stride=4, depth=1)
        cfg.model.global_dim = 32
        cfg.model.crop_size = 16
        cfg.model.roi_size = 8
        cfg.model.decoder_hidden = 32
        cfg.model.filter_hidden = 32
        cfg.model.mask_hidden = 16
        cfg.background.encoder = EncoderConfig(channels=16, stacks=1, stride=4, depth=1)
        cfg.background.global_dim = 32
        cfg.background.decoder_hidden = 32
        cfg.background.points_per_scene = 256
        cfg.data = DataConfig(n_scenes=12, n_test=4, points_per_instance=256, pool_size=512)
        cfg.optim = OptimConfig(lr=3e-3, decay_epochs=[6], batch_size=4, epochs=8)
        cfg.metrics = MetricConfig(n_points=2000, mc_res=16, mc_coarse=None)
        return cfg.validate()
    raise ConfigError(f"unknown preset {name!r}; known: paper, desk, smoke")
