import logging
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.errors import ShapeMismatch
from src.ml.autograd import (
    Tensor,
    conv2d,
    linear,
    mean_pool,
    parameter,
    relu,
    sigmoid,
    stop_gradient,
    sub,
)

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = {"amodal": "amodal_head", "visible": "visible_head", "cls": "cls", "box": "box"}


class Variant(str, Enum):
    """
    Loss/gradient configurations of the occlusion head stack.
    """
    FULL = "full"
    WITHOUT_LIV = "no-liv"
    WITHOUT_LV = "no-lv"
    INDEPENDENT = "independent"
    AMODAL_ONLY = "amodal-only"


class HeadConfig(BaseModel):
    channels: int = Field(8, ge=1, description="Feature channels C of the RoI grid.")
    roi_size: int = Field(14, ge=1, description="RoI grid side M.")
    num_classes: int = Field(2, ge=1, description="Object classes K.")
    num_convs: int = Field(4, ge=1)
    class_agnostic: bool = False
    relu_guard: bool = Field(True, description="Apply ReLU to visible logits before the subtraction.")
    occlusion_space: str = Field("logit", pattern="^(logit|probability)$")

    @property
    def mask_channels(self) -> int:
        return 1 if self.class_agnostic else self.num_classes


def kaiming(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class MaskHead:
    """
    Four 3x3 conv + ReLU layers followed by a 1x1 conv producing one logit map
    per class (or a single map when class-agnostic).
    """

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator, prefix: str):
        c = cfg.channels
        self.prefix = prefix
        self.convs: List[Tuple[Tensor, Tensor]] = []
        for i in range(cfg.num_convs):
            w = parameter(kaiming(rng, (c, c, 3, 3), c * 9), name=f"{prefix}.conv{i}.weight")
            b = parameter(np.zeros(c), name=f"{prefix}.conv{i}.bias")
            self.convs.append((w, b))
        self.out_weight = parameter(kaiming(rng, (cfg.mask_channels, c, 1, 1), c), name=f"{prefix}.out.weight")
        self.out_bias = parameter(np.zeros(cfg.mask_channels), name=f"{prefix}.out.bias")

    def forward(self, x: Tensor) -> Tensor:
        for w, b in self.convs:
            x = relu(conv2d(x, w, b))
        return conv2d(x, self.out_weight, self.out_bias)

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for w, b in self.convs:
            params[w.name] = w
            params[b.name] = b
        params[self.out_weight.name] = self.out_weight
        params[self.out_bias.name] = self.out_bias
        return params

    def copy_from(self, other: "MaskHead") -> None:
        for mine, theirs in zip(self.parameters().values(), other.parameters().values()):
            mine.value = theirs.value.copy()


class HeadOutputs(NamedTuple):
    am_logits: Tensor
    vm_logits: Tensor
    ivm_logits: Tensor


def occlusion_logits(am: Tensor, vm: Tensor, relu_guard: bool = True) -> Tensor:
    """ivm = am - relu(vm), per pixel and class channel."""
    return sub(am, relu(vm) if relu_guard else vm)


def forward_heads(features: Tensor, heads: Tuple[MaskHead, MaskHead], variant: Variant,
                  cfg: Optional[HeadConfig] = None) -> HeadOutputs:
    """
    Runs the amodal and visible heads and derives the occlusion output.

    Args:
        features (Tensor): C x M x M RoI features.
        heads: (amodal head, visible head).
        variant (Variant): Under INDEPENDENT the occlusion subtraction sees a
            gradient-stopped copy of the amodal logits and the visible head sees
            gradient-stopped features, so visible and occlusion losses only train
            the visible head.
        cfg (HeadConfig, optional): Debug switches `relu_guard` and `occlusion_space`.
            With occlusion_space="probability" the third output holds
            sigmoid(am) - sigmoid(vm) instead of logits.

    Returns:
        HeadOutputs: (am_logits, vm_logits, ivm_logits)

    Raises:
        ShapeMismatch: If the features do not fit the heads.
    """
    amodal_head, visible_head = heads
    expected = amodal_head.convs[0][0].shape[1]
    if features.value.ndim != 3 or features.shape[0] != expected:
        raise ShapeMismatch(f"features {features.shape} do not match heads with {expected} input channels")
    relu_guard = cfg.relu_guard if cfg is not None else True
    space = cfg.occlusion_space if cfg is not None else "logit"

    am = amodal_head.forward(features)
    if variant == Variant.INDEPENDENT:
        vm = visible_head.forward(stop_gradient(features))
        am_for_ivm = stop_gradient(am)
    else:
        vm = visible_head.forward(features)
        am_for_ivm = am
    if space == "probability":
        ivm = sub(sigmoid(am_for_ivm), sigmoid(vm))
    else:
        ivm = occlusion_logits(am_for_ivm, vm, relu_guard)
    return HeadOutputs(am, vm, ivm)


def shared_init(cfg: HeadConfig, rng: np.random.Generator) -> Tuple[MaskHead, MaskHead]:
    """
    Amodal and visible heads starting from identical weights (a seeded
    Kaiming fan-in draw standing in for pretrained mask-head weights).
    """
    amodal = MaskHead(cfg, rng, "amodal")
    visible = MaskHead(cfg, rng, "visible")
    visible.copy_from(amodal)
    return amodal, visible


class RoiOutputs(NamedTuple):
    am_logits: Tensor
    vm_logits: Tensor
    ivm_logits: Tensor
    cls_logits: Tensor
    box_deltas: Tensor


class OcclusionModel:
    """
    Mask heads plus minimal classification and class-specific box regression
    layers on mean-pooled RoI features.
    """

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator, shared: bool = True):
        self.cfg = cfg
        if shared:
            self.amodal_head, self.visible_head = shared_init(cfg, rng)
        else:
            self.amodal_head = MaskHead(cfg, rng, "amodal")
            self.visible_head = MaskHead(cfg, rng, "visible")
        c, k = cfg.channels, cfg.num_classes
        self.cls_weight = parameter(rng.standard_normal((k, c)) * 0.01, name="cls.weight")
        self.cls_bias = parameter(np.zeros(k), name="cls.bias")
        self.box_weight = parameter(rng.standard_normal((4 * k, c)) * 0.001, name="box.weight")
        self.box_bias = parameter(np.zeros(4 * k), name="box.bias")

    @property
    def heads(self) -> Tuple[MaskHead, MaskHead]:
        return self.amodal_head, self.visible_head

    def forward(self, features: Tensor, variant: Variant) -> RoiOutputs:
        am, vm, ivm = forward_heads(features, self.heads, variant, self.cfg)
        pooled = mean_pool(features)
        return RoiOutputs(
            am, vm, ivm,
            linear(pooled, self.cls_weight, self.cls_bias),
            linear(pooled, self.box_weight, self.box_bias),
        )

    def parameters(self) -> Dict[str, Tensor]:
        params = dict(self.amodal_head.parameters())
        params.update(self.visible_head.parameters())
        for t in (self.cls_weight, self.cls_bias, self.box_weight, self.box_bias):
            params[t.name] = t
        return params

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        params = self.parameters()
        groups: Dict[str, Dict[str, Tensor]] = {group: {} for group in PARAMETER_GROUPS.values()}
        for name, t in params.items():
            groups[PARAMETER_GROUPS[name.split(".")[0]]][name] = t
        return groups

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ShapeMismatch(f"state is missing tensors: {', '.join(missing)}")
        for name, t in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ShapeMismatch(f"{name}: stored shape {value.shape} does not match {t.shape}")
            t.value = value.copy()
