"""
Configuration: typed sections, key=value file loading and run options
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

import pydantic
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigurationError
from .models import LossWeights

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneConfig(_Section):
    """Synthetic scene layout and motion"""

    frame_size: int = Field(default=128, ge=16)
    length: int = Field(default=100, ge=2)
    target_min_size: float = Field(default=12.0, gt=0.0)
    target_max_size: float = Field(default=20.0, gt=0.0)
    target_shape: Literal["rect", "ellipse"] = "rect"
    target_color: Tuple[float, float, float] = (0.95, 0.35, 0.2)
    max_speed: float = Field(default=3.0, ge=0.0)
    momentum: float = Field(default=0.8, ge=0.0, le=1.0)
    texture_contrast: float = Field(default=0.25, ge=0.0, le=1.0)
    distractors: int = Field(default=2, ge=0)


class DataConfig(_Section):
    """Crop geometry, pool sizes and mixing ratios"""

    template_size: int = Field(default=32, ge=8)
    search_size: int = Field(default=64, ge=8)
    template_factor: float = Field(default=2.0, gt=0.0)
    search_factor: float = Field(default=4.0, gt=0.0)
    source_pools: int = Field(default=4, ge=1)
    sequences_per_pool: int = Field(default=12, ge=1)
    pairs_per_sequence: int = Field(default=10, ge=1)
    target_sequences_per_domain: int = Field(default=1, ge=1)
    target_sequence_length: int = Field(default=30, ge=2)
    target_pairs_per_sequence: int = Field(default=120, ge=1)
    eval_sequences_per_domain: int = Field(default=4, ge=1)
    eval_sequence_length: int = Field(default=60, ge=2)
    center_jitter: float = Field(default=0.5, ge=0.0)
    scale_jitter: float = Field(default=0.15, ge=0.0)
    max_frame_gap: int = Field(default=10, ge=1)
    target_ratio: float = Field(default=4.0, ge=0.0)
    source_ratio: float = Field(default=1.0, ge=0.0)
    fog_beta: float = Field(default=2.0, ge=0.0)
    gamma: float = Field(default=2.5, ge=1.0)
    brightness: float = Field(default=0.6, gt=0.0, le=1.0)
    rain_density: float = Field(default=5.0, ge=0.0)
    rain_alpha: float = Field(default=0.5, ge=0.0, le=1.0)

    def ratios(self) -> Dict[str, float]:
        """Pool name -> mixing weight, source pools first"""
        ratios = {f"source_{k}": self.source_ratio for k in range(self.source_pools)}
        for name in ("fog", "dark", "rain"):
            ratios[name] = self.target_ratio
        return ratios


class EncoderConfig(_Section):
    """One-stream transformer encoder"""

    patch_size: int = Field(default=8, ge=1)
    embed_dim: int = Field(default=32, ge=1)
    depth: int = Field(default=2, ge=0)
    heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=2.0, gt=0.0)
    template_size: int = Field(default=32, ge=1)
    search_size: int = Field(default=64, ge=1)
    bank_tokens: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def _check_geometry(self) -> "EncoderConfig":
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        for size in (self.template_size, self.search_size):
            if size % self.patch_size:
                raise ValueError("crop sizes must be multiples of patch_size")
        return self

    @property
    def template_tokens(self) -> int:
        return (self.template_size // self.patch_size) ** 2

    @property
    def search_tokens(self) -> int:
        return (self.search_size // self.patch_size) ** 2

    @property
    def grid(self) -> int:
        return self.search_size // self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


class HeadConfig(_Section):
    """Localisation head and label construction"""

    channels: int = Field(default=32, ge=1)
    sigma_factor: float = Field(default=0.5, gt=0.0)
    sigma_floor: float = Field(default=0.25, gt=0.0)


class TCAConfig(_Section):
    """Confidence alignment and Sinkhorn settings"""

    epsilon: float = Field(default=0.05, gt=0.0)
    max_iter: int = Field(default=1000, ge=1)
    tol: float = Field(default=1e-9, gt=0.0)
    position_mode: Literal["cross", "anchored"] = "cross"
    epsilon_scaling: bool = True
    check_every: int = Field(default=10, ge=1)


class EmaFrequency(str, Enum):
    PER_EPOCH = "per_epoch"
    PER_BATCH = "per_batch"
    EVERY_K_EPOCHS = "every_k_epochs"


class TrainConfig(_Section):
    """Teacher-student optimisation"""

    alpha: float = Field(default=0.99, ge=0.0, lt=1.0)
    ema_frequency: EmaFrequency = EmaFrequency.PER_EPOCH
    ema_every_k: int = Field(default=1, ge=1)
    epochs_stage1: int = Field(default=40, ge=1)
    warmup_epochs: int = Field(default=0, ge=0)
    epochs_stage2: int = Field(default=10, ge=1)
    steps_per_epoch: int = Field(default=25, ge=1)
    lr: float = Field(default=4e-4, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    lr_drop_epoch: Optional[int] = Field(default=32, ge=1)
    batch_size: int = Field(default=16, ge=1)
    tau: float = Field(default=0.6, ge=0.0, le=1.0)
    pseudo_label_weight: float = Field(default=1.0, ge=0.0)
    use_target_data: bool = True
    diagnose_grad_norms: bool = False
    record_ema_snapshots: bool = False
    loss: LossWeights = Field(default_factory=LossWeights)


class EvalConfig(_Section):
    """One-pass evaluation thresholds"""

    precision_threshold: float = Field(default=5.0, ge=0.0)
    iou_step: float = Field(default=0.05, gt=0.0, le=1.0)
    precision_max: int = Field(default=25, ge=1)


class Settings(_Section):
    """All configuration sections"""

    scene: SceneConfig = Field(default_factory=SceneConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    tca: TCAConfig = Field(default_factory=TCAConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _crop_sizes_agree(self) -> "Settings":
        if (self.data.template_size, self.data.search_size) != (
            self.encoder.template_size,
            self.encoder.search_size,
        ):
            raise ValueError("data and encoder crop sizes must agree")
        return self

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON dump"""
        payload = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def with_overrides(self, overrides: Mapping[str, Any]) -> "Settings":
        """Return a copy with dotted-key overrides applied"""
        data = self.model_dump(mode="json", by_alias=True)
        for key, value in overrides.items():
            _assign(data, key, value)
        return _validate(data)


# ============== Loading ==============


def _assign(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = [p for p in dotted.strip().split(".") if p]
    if len(parts) < 2:
        raise ConfigurationError(f"Config key must be section.field, got '{dotted}'")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"Config key '{dotted}' addresses a scalar")
        node = child
    node[parts[-1]] = value


def _validate(data: Dict[str, Any]) -> Settings:
    try:
        return Settings.model_validate(data)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigurationError(f"Invalid config value {where}: {first['msg']}")


def parse_overrides(items: Optional[Union[list, tuple]]) -> Dict[str, str]:
    """Turn ['a.b=1', ...] into {'a.b': '1'}"""
    overrides: Dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"Override must look like key=value, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_settings(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> Settings:
    """
    Build Settings from a key=value file plus overrides

    Args:
        path: optional plain-text file with dotted keys (train.alpha=0.99)
        overrides: dotted keys that win over file values

    Raises:
        ConfigurationError: missing file, malformed key or invalid value
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file {path} not found")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigurationError(f"Config key '{key}' has no value")
            _assign(data, key, value)
        logger.debug("Loaded %d config keys from %s", len(data), path)
    for key, value in (overrides or {}).items():
        _assign(data, key, value)
    return _validate(data)


@dataclass
class RunConfig:
    """Run-level options"""

    out_dir: Path = Path("runs/default")
    seed: int = 0
    threads: int = 1
    deterministic: bool = True

    def __post_init__(self):
        """Validate configuration after initialization"""
        self.out_dir = Path(self.out_dir)

        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")

        if self.threads < 1:
            raise ConfigurationError("threads must be at least 1")
