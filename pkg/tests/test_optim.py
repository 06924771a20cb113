import sys
import os
import unittest

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
from pydantic import ValidationError

from src.ml.autograd import parameter
from src.ml.optim import SGD, StepSchedule, sgd_step


class TestSgd(unittest.TestCase):

    def test_momentum_and_weight_decay(self):
        velocity = {}
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([0.5])}
        params = sgd_step(params, grads, lr=0.1, weight_decay=0.01, momentum=0.9, velocity=velocity)
        self.assertAlmostEqual(params["w"][0], 0.949)
        params = sgd_step(params, grads, lr=0.1, weight_decay=0.01, momentum=0.9, velocity=velocity)
        self.assertAlmostEqual(params["w"][0], 0.949 - (0.9 * 0.051 + 0.1 * (0.5 + 0.01 * 0.949)))

    def test_plain_step(self):
        out = sgd_step({"w": np.array([2.0, -1.0])}, {"w": np.array([1.0, 1.0])}, lr=0.5)
        np.testing.assert_allclose(out["w"], [1.5, -1.5])

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, lr=0.1)

    def test_optimizer_updates_tensors_in_place(self):
        w = parameter(np.array([1.0, 1.0]), name="w")
        opt = SGD({"w": w}, weight_decay=0.0, momentum=0.0)
        opt.step({"w": np.array([1.0, -1.0])}, lr=0.25)
        np.testing.assert_allclose(w.value, [0.75, 1.25])


class TestStepSchedule(unittest.TestCase):

    def test_default_schedule(self):
        s = StepSchedule()
        self.assertAlmostEqual(s.lr_at(0), 0.0025 / 3)
        self.assertAlmostEqual(s.lr_at(250), 0.0025 * 2 / 3)
        self.assertAlmostEqual(s.lr_at(500), 0.0025)
        self.assertAlmostEqual(s.lr_at(5999), 0.0025)
        self.assertAlmostEqual(s.lr_at(6000), 0.00025)
        self.assertAlmostEqual(s.lr_at(9999), 0.000025)

    def test_scaled_schedule(self):
        s = StepSchedule.scaled(500, base_lr=0.01)
        self.assertEqual(s.steps, (300, 400))
        self.assertEqual(s.warmup_iters, 25)
        self.assertAlmostEqual(s.lr_at(350), 0.001)

    def test_tiny_run_still_has_valid_steps(self):
        s = StepSchedule.scaled(0)
        self.assertEqual(s.steps, (1, 2))
        self.assertEqual(s.warmup_iters, 0)

    def test_invalid_steps(self):
        with self.assertRaises(ValidationError):
            StepSchedule(steps=(800, 600))
        with self.assertRaises(ValidationError):
            StepSchedule(steps=(0,))
