"""
Finite-difference verification of the analytic gradients of every loss term.
"""
import logging
from typing import Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from src.ml.autograd import (
    Tensor,
    backward,
    bce_on_probability,
    grads_for,
    parameter,
    record_kinks,
    select_channel,
    sigmoid,
    sub,
)
from src.ml.heads import HeadConfig, OcclusionModel, Variant, occlusion_logits
from src.ml.losses import LOSS_TERMS, RoiSample, mask_loss, total_loss

logger = logging.getLogger(__name__)

EPSILON = 1e-5
TOLERANCE = 1e-6
# relative errors of gradients smaller than this are measured against it instead
ABS_FLOOR = 1e-3
STENCIL = (-2, -1, 1, 2)

# under INDEPENDENT these terms are only differentiated through the visible head
VISIBLE_ONLY_TERMS = ("l_vm", "l_ivm")


class GradCheckReport(BaseModel):
    max_rel_error: float = 0.0
    per_term: Dict[str, float] = Field(default_factory=lambda: dict.fromkeys(LOSS_TERMS, 0.0))
    checked: int = 0
    skipped: int = 0
    configs: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def merge(self, other: "GradCheckReport") -> "GradCheckReport":
        return GradCheckReport(
            max_rel_error=max(self.max_rel_error, other.max_rel_error),
            per_term={k: max(self.per_term.get(k, 0.0), other.per_term.get(k, 0.0)) for k in LOSS_TERMS},
            checked=self.checked + other.checked,
            skipped=self.skipped + other.skipped,
            configs=self.configs + other.configs,
        )


def random_sample(cfg: HeadConfig, rng: np.random.Generator) -> RoiSample:
    m = cfg.roi_size
    amodal = (rng.random((m, m)) < 0.6).astype(np.float64)
    visible = amodal * (rng.random((m, m)) < 0.6)
    return RoiSample(
        features=rng.standard_normal((cfg.channels, m, m)),
        gt_class=int(rng.integers(cfg.num_classes)),
        gt_box_delta=rng.standard_normal(4) * 0.5,
        gt_amodal=amodal,
        gt_visible=visible,
    )


def _loss_values(model: OcclusionModel, sample: RoiSample, variant: Variant):
    with record_kinks() as tape:
        outputs = model.forward(Tensor(sample.features), variant)
        breakdown = total_loss(sample, outputs, variant, class_agnostic=model.cfg.class_agnostic)
    return breakdown, tape


def _same_branches(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _derivative(f: Dict[int, float], eps: float) -> float:
    # fourth-order central difference
    return (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * eps)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


def check_gradients(variant: Variant, seed: int, channels: int = 2, roi_size: int = 4, num_classes: int = 2,
                    class_agnostic: bool = False, eps: float = EPSILON) -> GradCheckReport:
    """
    Compares analytic parameter gradients of each loss term with fourth-order
    central differences on one random configuration.

    Coordinates whose perturbation flips a ReLU or smooth-L1 branch are skipped
    and counted in `skipped`. Under INDEPENDENT the visible and occlusion terms
    are compared on the visible-head parameters only; gradient stops cut their
    other partials.
    """
    rng = np.random.default_rng(seed)
    cfg = HeadConfig(channels=channels, roi_size=roi_size, num_classes=num_classes, class_agnostic=class_agnostic)
    model = OcclusionModel(cfg, rng, shared=False)
    sample = random_sample(cfg, rng)
    params = model.parameters()

    breakdown, base_tape = _loss_values(model, sample, variant)
    analytic = {term: grads_for(backward(breakdown.terms[term]), params) for term in LOSS_TERMS}

    report = GradCheckReport(configs=1)
    per_term = dict.fromkeys(LOSS_TERMS, 0.0)
    for name, tensor in params.items():
        for idx in np.ndindex(tensor.shape):
            original = tensor.value[idx]
            values, tapes = {}, []
            for step in STENCIL:
                tensor.value[idx] = original + step * eps
                values[step], tape = _loss_values(model, sample, variant)
                tapes.append(tape)
            tensor.value[idx] = original
            if not all(_same_branches(base_tape, tape) for tape in tapes):
                report.skipped += 1
                continue
            report.checked += 1
            for term in LOSS_TERMS:
                if variant == Variant.INDEPENDENT and term in VISIBLE_ONLY_TERMS and not name.startswith("visible."):
                    continue
                numeric = _derivative({step: getattr(v, term) for step, v in values.items()}, eps)
                err = relative_error(float(analytic[term][name][idx]), numeric)
                per_term[term] = max(per_term[term], err)
    report.per_term = per_term
    report.max_rel_error = max(per_term.values())
    return report


SUITE_VARIANTS = (Variant.FULL, Variant.WITHOUT_LIV, Variant.WITHOUT_LV, Variant.INDEPENDENT, Variant.AMODAL_ONLY)


def run_grad_check_suite(n_configs: int = 20, seed: int = 0, variants: Optional[Sequence[Variant]] = None) -> GradCheckReport:
    """
    Runs check_gradients on `n_configs` random small configurations (C=2, M=4,
    K=2), cycling through the variants and alternating class-agnostic heads.
    """
    variants = list(variants or SUITE_VARIANTS)
    report = GradCheckReport(per_term=dict.fromkeys(LOSS_TERMS, 0.0))
    for i in range(n_configs):
        variant = variants[i % len(variants)]
        part = check_gradients(variant, seed + i, class_agnostic=bool(i % 2))
        logger.debug("config %d (%s): max rel error %.3e, %d skipped", i, variant.value, part.max_rel_error, part.skipped)
        report = report.merge(part)
    logger.info("Gradient check: %d configs, max rel error %.3e", report.configs, report.max_rel_error)
    return report


def probability_gradient_ratio(am_logit: float = 15.0, vm_logit: float = 14.99, target: float = 1.0) -> float:
    """
    |dL_IVM/d am| when the occlusion loss acts on sigmoid(am) - sigmoid(vm),
    divided by the same gradient for the logit-space head, on one pixel.
    Saturated logits make the probability-space gradient explode.
    """
    y = np.full((1, 1), target)

    am = parameter(np.full((1, 1, 1), am_logit))
    vm = parameter(np.full((1, 1, 1), vm_logit))
    loss = mask_loss(occlusion_logits(am, vm), y, 0)
    logit_grad = backward(loss)[am.id]

    am_p = parameter(np.full((1, 1, 1), am_logit))
    vm_p = parameter(np.full((1, 1, 1), vm_logit))
    prob = sub(sigmoid(am_p), sigmoid(vm_p))
    loss_p = bce_on_probability(select_channel(prob, 0), y)
    prob_grad = backward(loss_p)[am_p.id]

    return float(np.abs(prob_grad).max() / np.abs(logit_grad).max())
