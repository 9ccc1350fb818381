"""Training objectives: pixel BCE, grade cross-entropy, grade MSE, the
weighted joint objective, and the ordinal-regression head function.

Each loss returns ``(value, grad)`` where ``grad`` is the analytic gradient
with respect to the prediction argument.
"""

from __future__ import annotations

import numpy as np

BCE_EPS = 1e-7
NUM_GRADES = 5


def loss_bce(pred, target):
    """Mean pixel-wise binary cross entropy; predictions are clamped to
    [eps, 1 - eps] before the logs."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    n = pred.size
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    value = float(-(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean())
    inside = (pred > BCE_EPS) & (pred < 1.0 - BCE_EPS)  # clamp saturates the gradient
    grad = np.where(inside, (p - target) / (p * (1.0 - p) * n), 0.0).astype(pred.dtype)
    return value, grad


def loss_cce(probs, labels):
    """Mean negative log probability of the true grade.

    ``probs`` rows must already be a softmax output (sum to 1 within 1e-5).
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2:
        raise ValueError(f"probs must be 2-d, got shape {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {probs.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"labels outside 0..{probs.shape[1] - 1}")
    rows = np.abs(probs.sum(axis=1) - 1.0)
    if rows.size and rows.max() > 1e-5:
        raise ValueError(f"probability rows must sum to 1 within 1e-5 "
                         f"(worst deviation {rows.max():.2e})")
    n = probs.shape[0]
    idx = np.arange(n)
    p_true = probs[idx, labels]
    safe = np.maximum(p_true, 1e-12)
    value = float(-np.log(safe).mean())
    grad = np.zeros_like(probs)
    grad[idx, labels] = -1.0 / (safe * n)
    return value, grad


def loss_mse(pred, target):
    """Mean squared error over a column (or flat) prediction vector."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    if pred.size == 0:
        raise ValueError("empty batch")
    n = pred.shape[0]
    diff = pred - target
    value = float((diff.astype(np.float64) ** 2).sum() / n)
    grad = (2.0 / n) * diff
    return value, grad


def loss_joint(clsf_probs, labels, reg_pred, reg_target, w_reg):
    """Convex combination (1 - w) * CCE + w * MSE over the two heads.

    Returns ``(total, cce_value, mse_value, dprobs, dreg)``.  At w = 0 the
    total equals the cross entropy exactly; at w = 1 the squared error.
    """
    if not 0.0 <= w_reg <= 1.0:
        raise ValueError(f"w_reg must be in [0, 1], got {w_reg}")
    cce_value, dprobs = loss_cce(clsf_probs, labels)
    mse_value, dreg = loss_mse(reg_pred, reg_target)
    total = (1.0 - w_reg) * cce_value + w_reg * mse_value
    return total, cce_value, mse_value, (1.0 - w_reg) * dprobs, w_reg * dreg


def ordinal_head(probs, fixed_weights=(0, 1, 2, 3, 4), scale_w=1.0, scale_b=0.0):
    """Continuous grade: dot(probs, fixed grade weights) through a 1->1 affine
    map.  With the identity map the output is the expected grade, always
    inside [min(fixed_weights), max(fixed_weights)] for valid probabilities."""
    probs = np.asarray(probs)
    w = np.asarray(fixed_weights, dtype=probs.dtype)
    if probs.ndim != 2 or probs.shape[1] != w.size:
        raise ValueError(f"probs must be (N, {w.size}), got {probs.shape}")
    return (probs @ w * scale_w + scale_b)[:, None]
