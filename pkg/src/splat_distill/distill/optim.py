"""Adam with decoupled weight decay, and the EMA teacher update."""

from __future__ import annotations

import numpy as np

from .model import ModelParams


def adam_update(params: np.ndarray, grads: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float, betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
                eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One AdamW step. ``step`` is the 1-based index of this update.

    Returns new ``(params, m, v)``; inputs are not modified.
    """
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grads
    v = b2 * v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    new = params * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, m, v


def ema_update(teacher: ModelParams, student: ModelParams, lam: float) -> ModelParams:
    """``lam * teacher + (1 - lam) * student`` as a new parameter set."""
    if not teacher.same_layout(student):
        raise ValueError("teacher and student parameter layouts differ")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("EMA momentum must lie in [0, 1]")
    return teacher.like(lam * teacher.vector + (1.0 - lam) * student.vector)
