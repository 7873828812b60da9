"""
Run configuration: encoder shape, loss weights and the training schedule.

Everything here is a plain dataclass that round-trips through json; flags from the cli are
applied on top with TrainConfig.override.
"""

import json
import hashlib
import dataclasses
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional
from .augment import AugmentationPolicy
from .errors import ConfigurationError

BACKBONES = ('tiny-conv', 'resnet50-like')
ACTIVATIONS = ('relu', 'silu')
GRADCAM_SOURCES = ('positive-logit', 'full-loss', 'supervised-ce')
KL_DIRECTIONS = ('attention-first', 'gradcam-first')
POOL_NORMALIZATIONS = ('literal', 'range')


@dataclass
class EncoderConfig:
    backbone: str = 'tiny-conv'
    in_size: int = 64
    channels: int = 64
    stem_widths: tuple = (16, 32, 64)
    activation: str = 'relu'
    projector_dims: tuple = (128, 128)
    projector_bn: bool = True
    weights_path: Optional[str] = None

    def __post_init__(self):
        self.stem_widths = tuple(self.stem_widths)
        self.projector_dims = tuple(self.projector_dims)
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if min(self.in_size, self.channels) <= 0 or not self.projector_dims or min(self.projector_dims) <= 0:
            raise ConfigurationError("sizes must be positive")
        if self.backbone == 'resnet50-like' and self.channels != 2048:
            raise ConfigurationError("resnet50-like backbone has 2048 feature channels")
        if self.backbone == 'tiny-conv':
            if len(self.stem_widths) != 3:
                raise ConfigurationError("tiny-conv takes three stem widths ahead of the last block")
            if self.grid < 4:
                raise ConfigurationError(
                    f"tiny-conv on {self.in_size}px input gives a {self.grid}x{self.grid} grid, need at least 4x4")

    @property
    def stride(self) -> int:
        return 16 if self.backbone == 'tiny-conv' else 32

    @property
    def grid(self) -> int:
        return self.in_size // self.stride

    @property
    def embed_dim(self) -> int:
        return self.projector_dims[-1]


@dataclass
class LossWeights:
    lam: float = 1.0
    nu: float = 0.01

    def __post_init__(self):
        if self.lam < 0 or self.nu < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.lam == 0 and self.nu == 0:
            raise ConfigurationError("lam and nu cannot both be zero")


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    max_steps: Optional[int] = None
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = 'constant'
    seed: int = 0
    variant: str = 'ours'
    K: int = 32
    tau: float = 0.4
    t: float = 0.2
    m: float = 0.999
    queue_size: int = 65536
    bn_splits: int = 1
    mlp_hidden: int = 32
    gradcam_source: str = 'positive-logit'
    kl_direction: str = 'attention-first'
    pool_normalization: str = 'literal'
    feature_source: str = 'attention'
    loss: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentationPolicy = field(default_factory=lambda: AugmentationPolicy(size=64, test_resize=72))

    def __post_init__(self):
        for name in ['batch_size', 'epochs', 'K', 'queue_size', 'mlp_hidden', 'bn_splits']:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.queue_size < self.batch_size:
            raise ConfigurationError("queue_size must hold at least one batch of keys")
        if self.tau <= 0 or self.t <= 0:
            raise ConfigurationError("temperatures must be positive")
        if not 0.0 <= self.m <= 1.0:
            raise ConfigurationError("momentum m must lie in [0, 1]")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight_decay must be nonnegative")
        for name, allowed in [
            ('schedule', ('constant', 'cosine')),
            ('gradcam_source', GRADCAM_SOURCES[:2]),
            ('kl_direction', KL_DIRECTIONS),
            ('pool_normalization', POOL_NORMALIZATIONS),
            ('feature_source', ('attention', 'gap')),
            ]:
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name}={getattr(self, name)!r} not in {allowed}")
        if self.augment.size != self.encoder.in_size:
            raise ConfigurationError(
                f"augmentation size {self.augment.size} does not match encoder input {self.encoder.in_size}")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """
        ResNet-50 / 224px settings used for the full fine-grained runs.
        """
        base = cls(
            encoder=EncoderConfig(
                backbone='resnet50-like', in_size=224, channels=2048, projector_dims=(2048, 2048, 256)),
            augment=AugmentationPolicy(size=224, test_resize=256),
            )
        return base.override(overrides)

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """
        Tiny backbone on 64px synthetic images, small enough for a laptop CPU.

        BatchNorm runs over 4 groups with the key batch shuffled across them, and the projector
        ends without BatchNorm. Crops keep at least 60% of the image and blur is off, so the
        8px glyph survives augmentation.
        """
        base = cls(
            batch_size=32, epochs=40, m=0.99, queue_size=256, bn_splits=4,
            encoder=EncoderConfig(projector_bn=False),
            augment=AugmentationPolicy(size=64, test_resize=72, crop_scale=(0.6, 1.0), blur_p=0.0),
            )
        return base.override(overrides)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        nested = {'loss': LossWeights, 'encoder': EncoderConfig, 'augment': AugmentationPolicy}
        for key, sub in nested.items():
            if key in payload and isinstance(payload[key], dict):
                payload[key] = _build(sub, payload[key])
        return _build(cls, payload)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid json: {e}") from e
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def override(self, overrides: dict) -> "TrainConfig":
        """
        Returns a copy with overrides applied. Dotted keys reach into nested sections
        ("loss.nu", "encoder.projector_dims"); None values are ignored so argparse defaults pass through.
        """
        payload = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            target = payload
            *parents, leaf = key.split('.')
            for p in parents:
                if p not in target or not isinstance(target[p], dict):
                    raise ConfigurationError(f"unknown config section {p!r} in {key!r}")
                target = target[p]
            if leaf not in target:
                raise ConfigurationError(f"unknown config key {key!r}")
            target[leaf] = value
        return TrainConfig.from_dict(payload)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _build(cls, payload: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigurationError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**payload)
