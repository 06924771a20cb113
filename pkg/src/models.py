from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.masks import BinaryMask, Polygon


class Category(BaseModel):
    """
    An object class. COCOA-style data also marks background 'stuff' classes.
    """
    id: int = Field(..., gt=0, description="Category id, unique within a dataset.")
    name: str = Field(..., description="Human readable class name.")
    is_stuff: bool = Field(False, description="True for stuff regions (sky, wall, ...).")


class Padding(BaseModel):
    """
    Pixel amounts on each side. Used both for zero-padding applied to an image
    and for how far an amodal mask reaches past the image border.
    """
    model_config = ConfigDict(frozen=True)

    left: int = Field(0, ge=0)
    top: int = Field(0, ge=0)
    right: int = Field(0, ge=0)
    bottom: int = Field(0, ge=0)

    def is_zero(self) -> bool:
        return self.left == self.top == self.right == self.bottom == 0

    def maximum(self, other: "Padding") -> "Padding":
        return Padding(
            left=max(self.left, other.left),
            top=max(self.top, other.top),
            right=max(self.right, other.right),
            bottom=max(self.bottom, other.bottom),
        )

    def plus(self, other: "Padding") -> "Padding":
        return Padding(
            left=self.left + other.left,
            top=self.top + other.top,
            right=self.right + other.right,
            bottom=self.bottom + other.bottom,
        )


class InstanceAnnotation(BaseModel):
    """
    One ground-truth object with its amodal, visible and (optional) invisible masks.

    `invisible` is None when the occluded part was never annotated; an empty mask
    means 'annotated and not occluded'. The distinction drives occluded-only
    evaluation and split statistics.
    """
    id: int
    image_id: int
    category_id: int
    amodal: BinaryMask
    visible: BinaryMask
    invisible: Optional[BinaryMask] = None
    depth_order: int = Field(0, ge=0, description="0 = front-most.")
    is_crowd: bool = False
    amodal_polygons: Optional[Tuple[Polygon, ...]] = Field(
        None, description="Unclipped source polygons of the amodal mask, kept when it reaches past the image."
    )
    amodal_overflow: Padding = Field(default_factory=Padding, description="How far the amodal mask was clipped.")

    def is_occluded(self) -> bool:
        return self.invisible is not None and not self.invisible.is_empty()


class ImageRecord(BaseModel):
    id: int
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    file_name: str = ""
    annotations: List[InstanceAnnotation] = Field(default_factory=list)
    padding: Padding = Field(default_factory=Padding, description="Zero-padding applied to the original image.")


class Dataset(BaseModel):
    """
    A semantic amodal dataset split.
    """
    categories: List[Category] = Field(default_factory=list)
    images: List[ImageRecord] = Field(default_factory=list)
    split_name: str = "unnamed"

    def category_by_id(self) -> Dict[int, Category]:
        return {c.id: c for c in self.categories}

    def image_by_id(self) -> Dict[int, ImageRecord]:
        return {img.id: img for img in self.images}

    def iter_annotations(self) -> Iterator[InstanceAnnotation]:
        for img in self.images:
            yield from img.annotations

    @property
    def num_annotations(self) -> int:
        return sum(len(img.annotations) for img in self.images)


class Detection(BaseModel):
    """
    One model output. Masks are raw predictions: visible need not be a subset of
    amodal and invisible need not equal amodal minus visible.
    """
    image_id: int
    category_id: int
    score: float = Field(..., ge=0.0, le=1.0)
    amodal: BinaryMask
    visible: Optional[BinaryMask] = None
    invisible: Optional[BinaryMask] = None


class MetricMode(str, Enum):
    A = "A"
    V = "V"
    AV = "AV"
    AIVV = "AIVV"
    IV = "IV"


def default_iou_thresholds() -> List[float]:
    # rounded so that e.g. 0.6 is the same double as 60/100
    return [round(float(t), 2) for t in np.linspace(0.5, 0.95, 10)]


class EvalConfig(BaseModel):
    """
    Configuration of one evaluation run.
    """
    iou_thresholds: List[float] = Field(default_factory=default_iou_thresholds)
    max_detections_per_image: int = Field(100, gt=0)
    metric: MetricMode = MetricMode.A
    occluded_only: bool = False
    class_agnostic: bool = False
    iv_threshold: float = Field(0.5, gt=0.0, le=1.0)
    threads: int = Field(1, ge=1, description="Worker count for per-image matching; results do not depend on it.")

    @field_validator("iou_thresholds")
    @classmethod
    def check_thresholds(cls, values: List[float]) -> List[float]:
        if not values:
            raise ValueError("At least one IoU threshold is required.")
        if any(not (0.0 < t <= 1.0) for t in values):
            raise ValueError(f"IoU thresholds must lie in (0, 1], got {values}")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing, got {values}")
        return values

    def effective_thresholds(self) -> List[float]:
        """AP^0.5_IV is computed at the single invisible-mask threshold."""
        if self.metric == MetricMode.IV:
            return [self.iv_threshold]
        return list(self.iou_thresholds)


class EvalResult(BaseModel):
    """
    Per-category and mean AP/AR for one metric mode. None marks 'undefined'
    (no ground truth for that category).
    """
    metric: MetricMode
    thresholds: List[float]
    per_category_ap: Dict[int, Optional[float]]
    mean_ap: Optional[float]
    per_category_ar: Dict[int, Optional[float]]
    mean_ar: Optional[float]
    per_threshold_ap: Dict[str, Dict[int, Optional[float]]] = Field(
        default_factory=dict, description="threshold -> category -> AP"
    )
    pr_curves: Dict[str, Dict[int, List[float]]] = Field(
        default_factory=dict, description="threshold -> category -> 101 interpolated precisions"
    )
    num_ignored_detections: int = 0
    num_ignored_gts: int = 0
    fallback_used: bool = False
    occluded_only: bool = False
    class_agnostic: bool = False


class Placement(str, Enum):
    UNIFORM_INSIDE = "uniform_inside"
    UNIFORM_ANY = "uniform_any"


class AugmentConfig(BaseModel):
    rng_seed: int = 0
    donors_per_image: int = Field(1, ge=1)
    placement: Placement = Placement.UNIFORM_INSIDE
    exclude_boundary_objects: bool = True
    min_remaining_visible_fraction: float = Field(0.0, ge=0.0, le=1.0)
    max_placement_attempts: int = Field(50, ge=1)
    threads: int = Field(1, ge=1)


class MergeConfig(BaseModel):
    iou_threshold: float = Field(0.75, gt=0.0, le=1.0)
    drop_stuff: bool = True
    drop_crowd: bool = True


class CompositingEntry(BaseModel):
    """
    One pasted donor, enough for an external tool to render the pixels.
    """
    output_image_id: int
    donor_annotation_id: int
    donor_source_image: str
    dx: int
    dy: int
    z: int


class SplitStats(BaseModel):
    """
    Image and occlusion statistics for one split. Rates are percentages.
    """
    num_imgs: int = 0
    num_imgs_with_occl: int = 0
    img_occl_rate: float = 0.0
    num_objs: int = 0
    num_objs_occl: int = 0
    obj_occl_rate: float = 0.0
    avg_or_per_region_all: float = 0.0
    avg_or_per_region_occl: float = 0.0

    @model_validator(mode="after")
    def check_counts(self) -> "SplitStats":
        if self.num_imgs_with_occl > self.num_imgs:
            raise ValueError(f"num_imgs_with_occl ({self.num_imgs_with_occl}) exceeds num_imgs ({self.num_imgs})")
        if self.num_objs_occl > self.num_objs:
            raise ValueError(f"num_objs_occl ({self.num_objs_occl}) exceeds num_objs ({self.num_objs})")
        for name in ("img_occl_rate", "obj_occl_rate", "avg_or_per_region_all", "avg_or_per_region_occl"):
            value = getattr(self, name)
            # tolerance for float round-off in the weighted means
            if not (-1e-9 <= value <= 100.0 + 1e-9):
                raise ValueError(f"{name} must be a percentage in [0, 100], got {value}")
        return self
