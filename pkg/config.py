from dataclasses import asdict, dataclass, field, fields
import math
import os
from typing import Any

from dotenv import load_dotenv

from errors import ConfigInvalid

LOSS_MODES = ("plain", "hn-i2i", "hn-i2l2", "hn-avg")


@dataclass
class Config:
    log_level: str
    log_dir: str
    log_file: bool
    threads: int


def load_config() -> Config:
    load_dotenv()

    def get(name: str, default: str) -> str:
        return os.getenv(name, default)

    def get_int(name: str, default: int) -> int:
        raw = os.getenv(name)
        try:
            return int(raw) if raw is not None else default
        except Exception:
            return default

    def get_bool(name: str, default: bool) -> bool:
        raw = os.getenv(name)
        if raw is None:
            return default
        return str(raw).strip().lower() in {"1", "true", "yes", "y", "on"}

    # HN3D_THREADS 未设置时使用逻辑核数
    threads = get_int("HN3D_THREADS", os.cpu_count() or 1)

    return Config(
        log_level=get("HN3D_LOG_LEVEL", "INFO"),
        log_dir=get("HN3D_LOG_DIR", "logs"),
        log_file=get_bool("HN3D_LOG_FILE", True),
        threads=max(1, threads),
    )


class _Section:
    """Shared dict plumbing for the experiment dataclasses."""

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigInvalid(f"{cls.__name__}: unknown keys {unknown}")
        return cls(**raw)

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return type(self).from_dict(data)


@dataclass
class AugmentConfig(_Section):
    max_rotation: float = 2.0 * math.pi
    up_axis: int = 1
    translate: float = 0.1
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(max_rotation=0.0, translate=0.0, jitter_sigma=0.0, jitter_clip=0.0)

    def validate(self) -> None:
        if self.up_axis not in (0, 1, 2):
            raise ConfigInvalid(f"up_axis must be 0, 1 or 2, got {self.up_axis}")
        for name in ("max_rotation", "translate", "jitter_sigma", "jitter_clip"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"augment.{name} must be >= 0")


@dataclass
class TrainConfig(_Section):
    mode: str = "plain"
    batch_size: int = 64
    epochs: int = 30
    base_lr: float = 1e-2
    lr_min: float = 0.0
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau_init: float = 0.07
    hidden1: int = 64
    hidden2: int = 128
    seed: int = 0
    threads: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "TrainConfig":
        raw = dict(raw)
        aug = raw.pop("augment", None)
        cfg = super().from_dict(raw)
        if isinstance(aug, dict):
            cfg.augment = AugmentConfig.from_dict(aug)
        elif isinstance(aug, AugmentConfig):
            cfg.augment = aug
        return cfg

    def warmup_steps(self, total_steps: int) -> int:
        return int(round(self.warmup_frac * total_steps))

    def validate(self, total_steps: int | None = None) -> None:
        if self.mode not in LOSS_MODES:
            raise ConfigInvalid(f"mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigInvalid("contrastive training needs batch_size >= 2")
        if self.epochs < 1:
            raise ConfigInvalid("epochs must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigInvalid("warmup_frac must be in [0, 1)")
        if self.base_lr <= 0 or self.lr_min < 0 or self.lr_min > self.base_lr:
            raise ConfigInvalid("need 0 <= lr_min <= base_lr and base_lr > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigInvalid("Adam betas must be in [0, 1)")
        if self.tau_init <= 0:
            raise ConfigInvalid("tau_init must be > 0")
        if self.hidden1 < 1 or self.hidden2 < 1:
            raise ConfigInvalid("hidden sizes must be >= 1")
        if total_steps is not None and total_steps > 0 and self.warmup_steps(total_steps) >= total_steps:
            raise ConfigInvalid(
                f"warmup steps {self.warmup_steps(total_steps)} must be < total steps {total_steps}"
            )
        self.augment.validate()


@dataclass
class ProbeConfig(_Section):
    epochs: int = 300
    lr: float = 0.5
    weight_decay: float = 1e-4
    finetune_encoder: bool = False
    encoder_lr: float = 1e-4

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigInvalid("probe epochs must be >= 0")
        if self.lr <= 0 or self.encoder_lr <= 0:
            raise ConfigInvalid("probe learning rates must be > 0")


@dataclass
class SynthConfig(_Section):
    categories: int = 8
    subtypes: int = 4
    per_category: int = 25
    views: int = 6
    feat_dim: int = 64
    landmarks: int = 16
    points: int = 256
    texture_dim: int = 8
    subtype_scale: float = 0.6
    view_noise: float = 0.05
    texture_scale: float = 0.4
    landmark_noise: float = 0.3
    cloud_noise: float = 0.005
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self, batch_size: int | None = None) -> None:
        if self.categories < 1 or self.subtypes < 1 or self.per_category < 1:
            raise ConfigInvalid("categories, subtypes and per_category must be >= 1")
        if self.views < 1:
            raise ConfigInvalid("views must be >= 1")
        if self.feat_dim < 2:
            raise ConfigInvalid("feat_dim must be >= 2")
        if self.landmarks < 1 or self.texture_dim < 0:
            raise ConfigInvalid("landmarks must be >= 1 and texture_dim >= 0")
        if self.feat_dim < self.landmarks + self.texture_dim:
            raise ConfigInvalid(
                f"feat_dim {self.feat_dim} < landmarks {self.landmarks} + texture_dim {self.texture_dim}"
            )
        if self.points < 8:
            raise ConfigInvalid("points must be >= 8")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigInvalid("test_fraction must be in [0, 1)")
        for name in ("subtype_scale", "view_noise", "texture_scale", "landmark_noise", "cloud_noise"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be >= 0")
        if batch_size is not None and self.categories * self.per_category < 2 * batch_size:
            raise ConfigInvalid(
                f"C*M = {self.categories * self.per_category} must be >= 2N = {2 * batch_size}"
            )
