from typing import Dict

import numpy as np
from pydantic import BaseModel, ConfigDict, PrivateAttr, field_validator, model_validator

from src.errors import ShapeMismatch
from src.ml.autograd import (
    Tensor,
    add_all,
    bce_on_probability,
    bce_with_logits,
    constant,
    select_channel,
    smooth_l1,
    softmax_cross_entropy,
    take,
)
from src.ml.heads import RoiOutputs, Variant

LOSS_TERMS = ("l_cls", "l_box", "l_am", "l_vm", "l_ivm")


class RoiSample(BaseModel):
    """
    One training RoI: features on the M x M grid plus its targets.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    gt_class: int
    gt_box_delta: np.ndarray
    gt_amodal: np.ndarray
    gt_visible: np.ndarray

    @field_validator("features", "gt_box_delta", mode="before")
    @classmethod
    def as_float(cls, value) -> np.ndarray:
        return np.asarray(value, dtype=np.float64)

    @field_validator("gt_amodal", "gt_visible", mode="before")
    @classmethod
    def as_binary(cls, value) -> np.ndarray:
        arr = np.asarray(value)
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask targets must be 0/1")
        return arr.astype(np.float64)

    @model_validator(mode="after")
    def check_targets(self) -> "RoiSample":
        if self.features.ndim != 3 or self.features.shape[1] != self.features.shape[2]:
            raise ValueError(f"features must be C x M x M, got {self.features.shape}")
        m = self.features.shape[1]
        for name in ("gt_amodal", "gt_visible"):
            if getattr(self, name).shape != (m, m):
                raise ValueError(f"{name} must be {m}x{m}, got {getattr(self, name).shape}")
        if self.gt_box_delta.shape != (4,):
            raise ValueError(f"gt_box_delta must have 4 values, got {self.gt_box_delta.shape}")
        if np.any(self.gt_visible > self.gt_amodal):
            raise ValueError("visible target must lie inside the amodal target")
        if self.gt_class < 0:
            raise ValueError(f"gt_class must be non-negative, got {self.gt_class}")
        return self

    @property
    def gt_invisible(self) -> np.ndarray:
        return self.gt_amodal - self.gt_visible


class LossBreakdown(BaseModel):
    """
    The five loss terms and their sum. Graph nodes of each term are kept
    privately so the caller can run backward on any of them.
    """
    l_cls: float
    l_box: float
    l_am: float
    l_vm: float
    l_ivm: float
    total: float

    _terms: Dict[str, Tensor] = PrivateAttr(default_factory=dict)

    @property
    def terms(self) -> Dict[str, Tensor]:
        return self._terms

    @property
    def total_tensor(self) -> Tensor:
        return self._terms["total"]


def mask_loss(logits: Tensor, target: np.ndarray, class_index: int) -> Tensor:
    """
    Average per-pixel binary cross-entropy of the `class_index` channel against
    `target`; the other class channels do not contribute.
    """
    if logits.value.ndim != 3:
        raise ShapeMismatch(f"mask logits must be K x M x M, got {logits.shape}")
    return bce_with_logits(select_channel(logits, class_index), target)


def _zero() -> Tensor:
    return constant(0.0)


def total_loss(sample: RoiSample, outputs: RoiOutputs, variant: Variant, class_agnostic: bool = False,
               occlusion_space: str = "logit") -> LossBreakdown:
    """
    L = L_cls + L_box + L_AM + L_VM + L_IVM, with terms zeroed per variant.

    Args:
        sample (RoiSample): Targets.
        outputs (RoiOutputs): Forward results.
        variant (Variant): WITHOUT_LIV drops L_IVM, WITHOUT_LV drops L_VM,
            AMODAL_ONLY drops both; INDEPENDENT keeps all terms (routing happens
            in the forward pass).
        class_agnostic (bool): Mask heads have a single channel.
        occlusion_space (str): "probability" when the occlusion output holds
            probabilities instead of logits.

    Returns:
        LossBreakdown: Term values; the graph nodes are reachable via `.terms`.
    """
    mask_index = 0 if class_agnostic else sample.gt_class
    k = outputs.cls_logits.shape[0]
    if not 0 <= sample.gt_class < k:
        raise ShapeMismatch(f"gt_class {sample.gt_class} out of range for {k} classes")

    terms: Dict[str, Tensor] = {
        "l_cls": softmax_cross_entropy(outputs.cls_logits, sample.gt_class),
        "l_box": smooth_l1(take(outputs.box_deltas, range(4 * sample.gt_class, 4 * sample.gt_class + 4)), sample.gt_box_delta),
        "l_am": mask_loss(outputs.am_logits, sample.gt_amodal, mask_index),
    }
    if variant in (Variant.WITHOUT_LV, Variant.AMODAL_ONLY):
        terms["l_vm"] = _zero()
    else:
        terms["l_vm"] = mask_loss(outputs.vm_logits, sample.gt_visible, mask_index)
    if variant in (Variant.WITHOUT_LIV, Variant.AMODAL_ONLY):
        terms["l_ivm"] = _zero()
    elif occlusion_space == "probability":
        terms["l_ivm"] = bce_on_probability(select_channel(outputs.ivm_logits, mask_index), sample.gt_invisible)
    else:
        terms["l_ivm"] = mask_loss(outputs.ivm_logits, sample.gt_invisible, mask_index)

    total = add_all([terms[name] for name in LOSS_TERMS])
    values = {name: terms[name].item() for name in LOSS_TERMS}
    breakdown = LossBreakdown(**values, total=total.item())
    breakdown._terms = {**terms, "total": total}
    return breakdown
