"""
Pydantic models for the tracking domain types
"""

from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class DomainTag(str, Enum):
    SOURCE = "source"
    FOG = "fog"
    DARK = "dark"
    RAIN = "rain"


class WeatherKind(str, Enum):
    FOG = "fog"
    DARK = "dark"
    RAIN = "rain"

    @property
    def domain(self) -> DomainTag:
        return DomainTag(self.value)


TARGET_DOMAINS: Tuple[DomainTag, ...] = (DomainTag.FOG, DomainTag.DARK, DomainTag.RAIN)


class WeatherParams(BaseModel):
    """Parametric corruption settings for one weather kind"""

    kind: WeatherKind
    fog_beta: float = Field(default=2.0, ge=0.0)
    airlight: Tuple[float, float, float] = (0.85, 0.85, 0.85)
    gamma: float = Field(default=2.5, ge=1.0)
    brightness: float = Field(default=0.6, gt=0.0, le=1.0)
    rain_density: float = Field(default=5.0, ge=0.0)
    rain_angle: float = 15.0
    rain_alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    rain_length: float = Field(default=8.0, gt=0.0)
    rain_intensity: float = Field(default=0.9, ge=0.0, le=1.0)
    seed: int = 0

    model_config = ConfigDict(frozen=True)

    @field_validator("airlight")
    @classmethod
    def _airlight_in_unit_cube(cls, v: Tuple[float, float, float]):
        if any(c < 0.0 or c > 1.0 for c in v):
            raise ValueError("airlight components must lie in [0, 1]")
        return v


class BBox(BaseModel):
    """Axis-aligned box, center/size in pixel units"""

    cx: float
    cy: float
    w: float = Field(..., gt=0.0)
    h: float = Field(..., gt=0.0)

    model_config = ConfigDict(frozen=True)

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_xyxy(self) -> Tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def to_xywh(self) -> Tuple[float, float, float, float]:
        """Left, top, width, height"""
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "BBox":
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx=cx, cy=cy, w=w, h=h)


class Frame(BaseModel):
    """One RGB frame, pixels stored as (height, width, 3) float64 in [0, 1]"""

    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    pixels: np.ndarray
    domain_tag: DomainTag = DomainTag.SOURCE

    model_config = ConfigDict(arbitrary_types_allowed=True, use_enum_values=False)

    @model_validator(mode="after")
    def _pixel_layout(self) -> "Frame":
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixels must have shape {(self.height, self.width, 3)}, "
                f"got {self.pixels.shape}"
            )
        return self

    @classmethod
    def from_pixels(
        cls, pixels: np.ndarray, domain_tag: DomainTag = DomainTag.SOURCE
    ) -> "Frame":
        pixels = np.asarray(pixels, dtype=np.float64)
        return cls(
            width=pixels.shape[1],
            height=pixels.shape[0],
            pixels=pixels,
            domain_tag=domain_tag,
        )


class Sequence(BaseModel):
    """Ordered frames; annotations exist only for the source domain"""

    name: str = "seq"
    frames: List[Frame]
    annotations: Optional[List[BBox]] = None
    domain_tag: DomainTag = DomainTag.SOURCE
    seed: int = 0

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def _annotation_contract(self) -> "Sequence":
        labelled = self.annotations is not None
        if labelled != (self.domain_tag == DomainTag.SOURCE):
            raise ValueError("annotations must be present iff domain is source")
        if labelled and len(self.annotations) != len(self.frames):
            raise ValueError("frames and annotations differ in length")
        return self

    def __len__(self) -> int:
        return len(self.frames)


class SamplePair(BaseModel):
    """Template/search crops; label_box is in search-crop pixel coordinates"""

    template: np.ndarray
    search: np.ndarray
    label_box: Optional[BBox] = None
    domain_tag: DomainTag = DomainTag.SOURCE

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def _label_contract(self) -> "SamplePair":
        if (self.label_box is not None) != (self.domain_tag == DomainTag.SOURCE):
            raise ValueError("label_box must be present iff domain is source")
        return self


class LabelMaps(BaseModel):
    """Supervision targets on the H' x W' response grid"""

    cls_map: np.ndarray
    offset_map: np.ndarray
    size_map: np.ndarray
    peak: Tuple[int, int]

    model_config = ConfigDict(arbitrary_types_allowed=True)


class PseudoLabel(BaseModel):
    """Teacher-decoded box for an unlabeled search crop"""

    box: BBox
    confidence: float
    accepted: bool


class LossWeights(BaseModel):
    """Weights of the hybrid loss"""

    w_cls: float = Field(default=1.0, ge=0.0)
    beta: float = Field(default=5.0, ge=0.0)
    gamma_w: float = Field(default=2.0, ge=0.0)
    lambda_: float = Field(default=10.0, ge=0.0, alias="lambda")

    model_config = ConfigDict(populate_by_name=True)


class EvalResult(BaseModel):
    """One-pass evaluation of a single sequence"""

    name: str
    domain: DomainTag
    ious: List[float]
    center_errors: List[float]
    success_curve: List[float]
    auc: float = Field(..., ge=0.0, le=1.0)
    precision: float = Field(..., ge=0.0, le=1.0)
    precision_curve: List[float]
    ao: float
    sr50: float
    sr75: float


class RunSummary(BaseModel):
    """JSON summary written next to the curve CSVs"""

    run_id: str
    fingerprint: str
    seeds: List[int]
    auc: float
    precision: float
    ao: float
    sr50: float
    sr75: float
    per_domain_auc: Dict[str, float] = {}
    sequences: int
