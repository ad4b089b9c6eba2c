"""Losses and their gradients with respect to the student-side input.

Every ``*_grad`` function returns the loss together with d(loss)/d(student
input); the teacher side is treated as a constant.
"""

from __future__ import annotations

import numpy as np

TAU_STUDENT = 0.1
TAU_TEACHER = 0.07


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(x))


def distill_loss_grad(student_logits: np.ndarray, teacher_logits: np.ndarray,
                      tau_s: float = TAU_STUDENT, tau_t: float = TAU_TEACHER) -> tuple[float, np.ndarray]:
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"logit shapes differ: {s.shape} vs {t.shape}")
    if not (tau_s > 0 and tau_t > 0):
        raise ValueError("temperatures must be positive")
    p = softmax(t / tau_t)
    log_q = log_softmax(s / tau_s)
    n = s.shape[0]
    loss = float(-(p * log_q).sum() / n)
    grad = (np.exp(log_q) - p) / (tau_s * n)
    return loss, grad


def distill_loss(student_logits, teacher_logits, tau_s: float = TAU_STUDENT, tau_t: float = TAU_TEACHER) -> float:
    """Token-averaged cross-entropy ``H(softmax(t / tau_t), softmax(s / tau_s))``."""
    return distill_loss_grad(student_logits, teacher_logits, tau_s, tau_t)[0]


def entropy(logits: np.ndarray, tau: float) -> float:
    """Mean per-token entropy of ``softmax(logits / tau)``."""
    lp = log_softmax(np.asarray(logits, dtype=np.float64) / tau)
    return float(-(np.exp(lp) * lp).sum() / lp.shape[0])


def cosine_loss_grad(student_feats: np.ndarray, target_feats: np.ndarray) -> tuple[float, np.ndarray]:
    s = np.asarray(student_feats, dtype=np.float64)
    shape = s.shape
    s = s.reshape(-1, shape[-1])
    t = np.asarray(target_feats, dtype=np.float64).reshape(s.shape)
    ns = np.linalg.norm(s, axis=1)
    nt = np.linalg.norm(t, axis=1)
    ok = (ns > 0) & (nt > 0)
    cos = np.zeros(s.shape[0])
    cos[ok] = (s[ok] * t[ok]).sum(axis=1) / (ns[ok] * nt[ok])
    n = s.shape[0]
    grad = np.zeros_like(s)
    # d cos / d s = t / (|s||t|) - cos * s / |s|^2
    grad[ok] = -(t[ok] / (ns[ok] * nt[ok])[:, None] - cos[ok, None] * s[ok] / (ns[ok] ** 2)[:, None]) / n
    # zero-norm tokens contribute 0 to the loss, not 1
    loss = float(np.sum(1.0 - cos[ok]) / n)
    return loss, grad.reshape(shape)


def cosine_loss(student_feats, target_feats) -> float:
    """``1 - mean cosine similarity`` over tokens; tokens with a zero vector on either side count as 0."""
    return cosine_loss_grad(student_feats, target_feats)[0]


def mse_loss_grad(student_feats: np.ndarray, target_feats: np.ndarray) -> tuple[float, np.ndarray]:
    s = np.asarray(student_feats, dtype=np.float64)
    t = np.asarray(target_feats, dtype=np.float64).reshape(s.shape)
    diff = s - t
    n = diff.reshape(-1, diff.shape[-1]).shape[0]
    return float((diff ** 2).sum() / n), 2.0 * diff / n
