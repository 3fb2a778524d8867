from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params, lr: float, momentum: float, velocity: dict) -> None:
    """Heavy-ball SGD: v <- momentum*v + g; p <- p - lr*v. Frozen or grad-less params are skipped."""
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        if p.grad.shape != p.value.shape:
            raise ValueError(f"{p.name}: grad shape {p.grad.shape} != value shape {p.value.shape}")
        v = velocity.get(p.id)
        if v is None:
            v = np.zeros_like(p.value)
        v = momentum * v + p.grad
        velocity[p.id] = v
        p.value = p.value - np.asarray(lr, dtype=p.value.dtype) * v
