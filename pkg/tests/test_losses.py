import sys
import os

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import ShapeMismatch
from src.ml.autograd import Tensor, backward, parameter
from src.ml.gradcheck import random_sample
from src.ml.heads import HeadConfig, OcclusionModel, Variant
from src.ml.losses import LOSS_TERMS, RoiSample, mask_loss, total_loss

SMALL = HeadConfig(channels=2, roi_size=4, num_classes=2)


def _breakdown(variant, seed=0, cfg=SMALL):
    rng = np.random.default_rng(seed)
    model = OcclusionModel(cfg, rng)
    sample = random_sample(cfg, rng)
    outputs = model.forward(Tensor(sample.features), variant)
    return total_loss(sample, outputs, variant, class_agnostic=cfg.class_agnostic,
                      occlusion_space=cfg.occlusion_space)


@pytest.mark.parametrize("variant", list(Variant))
def test_total_is_sum_of_terms(variant):
    b = _breakdown(variant)
    assert b.total == sum(getattr(b, name) for name in LOSS_TERMS)
    assert b.total_tensor.item() == b.total


def test_variants_zero_their_terms():
    full = _breakdown(Variant.FULL)
    assert all(getattr(full, name) > 0 for name in ("l_cls", "l_am", "l_vm", "l_ivm"))
    assert _breakdown(Variant.WITHOUT_LIV).l_ivm == 0.0
    assert _breakdown(Variant.WITHOUT_LV).l_vm == 0.0
    amodal_only = _breakdown(Variant.AMODAL_ONLY)
    assert amodal_only.l_vm == 0.0 and amodal_only.l_ivm == 0.0
    independent = _breakdown(Variant.INDEPENDENT)
    assert independent.l_vm == full.l_vm
    assert independent.l_ivm == full.l_ivm


def test_mask_loss_only_uses_the_target_class_channel():
    logits = parameter(np.zeros((3, 2, 2)))
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = mask_loss(logits, target, 1)
    assert loss.item() == pytest.approx(np.log(2))
    g = backward(loss)[logits.id]
    assert not g[0].any() and not g[2].any()
    np.testing.assert_allclose(g[1], [[-0.125, 0.125], [0.125, -0.125]])


def test_class_agnostic_heads_use_channel_zero():
    cfg = SMALL.model_copy(update={"class_agnostic": True})
    b = _breakdown(Variant.FULL, seed=3, cfg=cfg)
    assert np.isfinite(b.total)


def test_probability_space_loss_is_finite():
    cfg = SMALL.model_copy(update={"occlusion_space": "probability"})
    b = _breakdown(Variant.FULL, seed=1, cfg=cfg)
    assert np.isfinite(b.l_ivm) and b.l_ivm > 0


def test_class_out_of_range():
    rng = np.random.default_rng(0)
    model = OcclusionModel(SMALL, rng)
    sample = random_sample(SMALL, rng).model_copy(update={"gt_class": 5})
    with pytest.raises(ShapeMismatch):
        total_loss(sample, model.forward(Tensor(sample.features), Variant.FULL), Variant.FULL)


class TestRoiSample:

    def _kwargs(self, **overrides):
        values = dict(
            features=np.zeros((2, 3, 3)),
            gt_class=0,
            gt_box_delta=[0.0, 0.0, 0.0, 0.0],
            gt_amodal=np.ones((3, 3)),
            gt_visible=np.eye(3),
        )
        values.update(overrides)
        return values

    def test_invisible_target(self):
        s = RoiSample(**self._kwargs())
        assert s.gt_invisible.sum() == 6
        assert s.gt_box_delta.dtype == np.float64

    def test_visible_outside_amodal(self):
        with pytest.raises(ValidationError):
            RoiSample(**self._kwargs(gt_amodal=np.eye(3), gt_visible=np.ones((3, 3))))

    def test_non_binary_targets(self):
        with pytest.raises(ValidationError):
            RoiSample(**self._kwargs(gt_amodal=np.full((3, 3), 0.5)))

    def test_wrong_grid_size(self):
        with pytest.raises(ValidationError):
            RoiSample(**self._kwargs(gt_visible=np.zeros((2, 2))))
