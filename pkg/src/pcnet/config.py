"""Run configuration: a flat JSON of fields, with toy and full dimension presets."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .encoding import EncoderConfig
from .errors import ConfigError

HOME_ENV = "PCNET_HOME"

PRESETS = {
    "full": {"c_v": 2048, "c_l": 1024, "c": 1024, "s": 32, "image_size": 320,
             "b": 36, "p": 40, "area_min": 1000},
    "toy": {"c_v": 64, "c_l": 64, "c": 64, "s": 8, "image_size": 64,
            "b": 8, "p": 8, "area_min": 40},
}


@dataclass
class RunConfig:
    preset: str = "toy"
    n_stages: int = 3
    k: int = 5
    n_d: int = 1
    epochs: int = 15
    lr: float = 5e-5
    weight_decay: float = 1e-2
    poly_power: float = 0.9
    seed: int = 0
    max_steps: int = 0              # 0: epochs * steps_per_epoch
    use_ras: bool = True
    use_iad: bool = True
    share_stages: bool = False
    freeze_encoders: bool = False
    dtype: str = "float64"
    cls_pooling: str = "logit"      # logit | relu
    similarity: str = "cosine"      # cosine | dot
    score_scale: float = 10.0       # multiplies pooled scores in the classification loss
    score_bias: float = -5.0        # initial value of the learned classification-logit offset
    # preset-controlled (None: take from preset)
    c_v: int | None = None
    c_l: int | None = None
    c: int | None = None
    s: int | None = None
    image_size: int | None = None
    b: int | None = None
    p: int | None = None
    area_min: int | None = None
    kernel: int = 2                 # image encoder conv kernel
    context: bool = False           # residual 3x3 context layer in the image encoder
    # data: a saved split directory, or (when None) a generated synthetic split
    data_dir: str | None = None
    n_samples: int = 32
    data_seed: int = 0
    n_distractors: int = 4
    distractor_kinds: list[str] = field(default_factory=lambda: ["translate"])
    iou_dedupe: float = 0.8
    # encoder warm start on a disjoint synthetic corpus (stand-in for pretrained encoders)
    pretrain_samples: int = 0       # 0 disables
    pretrain_steps: int = 500
    pretrain_lr: float = 2e-3
    pretrain_seed: int = 9001
    augment_shift: int = 3          # max random translation in pixels per training step; 0 disables
    log_every: int = 0

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        for key, value in PRESETS[self.preset].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        positive = ("n_stages", "k", "epochs", "b", "p", "c_v", "c_l", "c", "s",
                    "image_size", "n_samples")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.pretrain_samples < 0 or self.pretrain_steps < 0 or self.pretrain_lr <= 0:
            raise ConfigError("pretraining sizes must be non-negative and pretrain_lr positive")
        if self.pretrain_samples and self.pretrain_seed == self.data_seed:
            raise ConfigError("pretrain_seed must differ from data_seed")
        if self.augment_shift < 0:
            raise ConfigError("augment_shift must be non-negative")
        if self.lr <= 0 or self.weight_decay < 0 or self.n_d < 0:
            raise ConfigError("lr must be positive; weight_decay and n_d non-negative")
        if self.cls_pooling not in ("logit", "relu"):
            raise ConfigError("cls_pooling must be logit or relu")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigError("similarity must be cosine or dot")
        if self.score_scale <= 0:
            raise ConfigError("score_scale must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.c_v, self.c_l, self.c, self.s, self.image_size, self.seed,
                             self.kernel, self.context)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


def home_dir() -> str:
    """Root for caches and outputs; ``$PCNET_HOME`` or ``~/.pcnet``."""
    return os.environ.get(HOME_ENV) or os.path.join(os.path.expanduser("~"), ".pcnet")
