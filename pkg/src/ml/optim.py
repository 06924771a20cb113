import bisect
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.ml.autograd import Tensor


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0, velocity: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """
    One SGD update with momentum, the L2 term added to the gradient:
    v = momentum * v + lr * (g + weight_decay * w);  w = w - v.

    Args:
        params: Current values by name.
        grads: Gradients by name (same shapes).
        lr (float): Learning rate for this step.
        weight_decay (float): L2 coefficient.
        momentum (float): Momentum coefficient.
        velocity: Momentum buffers, updated in place when given.

    Returns:
        Dict[str, np.ndarray]: New parameter values.
    """
    out = {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter shape {w.shape}")
        v = lr * (g + weight_decay * w)
        if velocity is not None:
            v = momentum * velocity.get(name, np.zeros_like(w)) + v
            velocity[name] = v
        out[name] = w - v
    return out


class SGD:
    """
    Momentum SGD over named Tensors, updating their values in place.
    """

    def __init__(self, params: Dict[str, Tensor], weight_decay: float = 1e-4, momentum: float = 0.9):
        self.params = params
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        values = {name: t.value for name, t in self.params.items()}
        updated = sgd_step(values, grads, lr, self.weight_decay, self.momentum, self.velocity)
        for name, t in self.params.items():
            t.value = updated[name]


class StepSchedule(BaseModel):
    """
    Step learning-rate schedule with linear warm-up: the rate ramps from
    base_lr * warmup_factor to base_lr over warmup_iters iterations and is
    multiplied by gamma at each step boundary.
    """
    base_lr: float = Field(0.0025, gt=0.0)
    steps: Tuple[int, ...] = (6000, 8000)
    gamma: float = Field(0.1, gt=0.0)
    warmup_iters: int = Field(500, ge=0)
    warmup_factor: float = Field(1.0 / 3.0, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def check_steps(self) -> "StepSchedule":
        if any(s <= 0 for s in self.steps):
            raise ValueError(f"schedule steps must be positive, got {self.steps}")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError(f"schedule steps must be strictly increasing, got {self.steps}")
        return self

    def lr_at(self, iteration: int) -> float:
        lr = self.base_lr * self.gamma ** bisect.bisect_right(self.steps, iteration)
        if iteration < self.warmup_iters:
            alpha = iteration / self.warmup_iters
            lr *= self.warmup_factor * (1.0 - alpha) + alpha
        return lr

    @classmethod
    def scaled(cls, total_iters: int, base_lr: float = 0.0025, gamma: float = 0.1,
               warmup_factor: float = 1.0 / 3.0) -> "StepSchedule":
        """
        The 10000-iteration schedule (warm-up 500, steps at 6000 and 8000)
        shrunk proportionally to `total_iters`.
        """
        steps = tuple(sorted({max(1, round(total_iters * 0.6)), max(2, round(total_iters * 0.8))}))
        return cls(
            base_lr=base_lr,
            steps=steps,
            gamma=gamma,
            warmup_iters=round(total_iters * 0.05),
            warmup_factor=warmup_factor,
        )
