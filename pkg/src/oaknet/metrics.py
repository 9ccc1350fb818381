"""Evaluation statistics for localisation and severity grading.

Covers box overlap (Jaccard index), threshold-based detection reports,
multi-class classification reports, one-vs-rest ROC AUC, and the central
finite-difference gradient checker used to verify every backward pass in
the engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JI_THRESHOLDS = (0.0, 0.25, 0.5, 0.75)  # first one is strict "> 0"
NUM_GRADES = 5


class DegenerateBoxError(ValueError):
    """Raised when a box has zero or negative area."""


def jaccard(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes on the pixel grid."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0:
        raise DegenerateBoxError(f"box {a} has non-positive area")
    if bw <= 0 or bh <= 0:
        raise DegenerateBoxError(f"box {b} has non-positive area")
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union


@dataclass
class DetectionReport:
    """Detection quality at the standard Jaccard-index thresholds."""

    count: int
    fractions: dict  # threshold -> fraction of pairs at/above it
    mean_ji: float
    std_ji: float

    def format(self) -> str:
        head = "JI > 0    JI >= 0.25  JI >= 0.5   JI >= 0.75  Mean    Std. Dev."
        row = "  ".join(f"{self.fractions[t] * 100:7.1f}%" for t in JI_THRESHOLDS)
        return f"{head}\n{row}  {self.mean_ji:.3f}  {self.std_ji:.3f}  (n={self.count})"


def detection_report(detections, ground_truth) -> DetectionReport:
    """Score detected boxes against annotated boxes.

    Both arguments map ``(image_id, side)`` to an (x, y, w, h) box.  A ground
    truth with no matching detection counts as JI 0.
    """
    if not ground_truth:
        raise ValueError("empty ground truth")
    jis = []
    for key, gt_box in ground_truth.items():
        det_box = detections.get(key)
        jis.append(0.0 if det_box is None else jaccard(det_box, gt_box))
    jis = np.asarray(jis, dtype=np.float64)
    fractions = {}
    for t in JI_THRESHOLDS:
        if t == 0.0:
            fractions[t] = float((jis > 0.0).mean())
        else:
            fractions[t] = float((jis >= t).mean())
    return DetectionReport(
        count=len(jis),
        fractions=fractions,
        mean_ji=float(jis.mean()),
        std_ji=float(jis.std()),  # population std
    )


@dataclass
class ClassReport:
    """Per-grade precision/recall/F1 with macro means, accuracy and grade MSE."""

    precision: list
    recall: list
    f1: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    confusion: np.ndarray  # rows = true grade, cols = predicted grade
    mse: float
    support: list = field(default_factory=list)

    def format(self) -> str:
        lines = ["grade  precision  recall  f1      support"]
        for g in range(NUM_GRADES):
            lines.append(f"{g:5d}  {self.precision[g]:9.3f}  {self.recall[g]:6.3f}  "
                         f"{self.f1[g]:6.3f}  {self.support[g]:7d}")
        lines.append(f" mean  {self.macro_precision:9.3f}  {self.macro_recall:6.3f}  "
                     f"{self.macro_f1:6.3f}")
        lines.append(f"accuracy: {self.accuracy:.4f}   grade MSE: {self.mse:.4f}")
        lines.append("confusion matrix (rows true, cols predicted):")
        for row in self.confusion:
            lines.append("  " + " ".join(f"{v:5d}" for v in row))
        return "\n".join(lines)


def classification_report(preds, labels) -> ClassReport:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds/labels must be equal-length 1-d, got {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("empty prediction list")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.min() < 0 or arr.max() >= NUM_GRADES:
            raise ValueError(f"{name} contain a grade outside 0..{NUM_GRADES - 1}")

    confusion = np.zeros((NUM_GRADES, NUM_GRADES), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)

    precision, recall, f1 = [], [], []
    for g in range(NUM_GRADES):
        tp = confusion[g, g]
        pred_g = confusion[:, g].sum()
        true_g = confusion[g, :].sum()
        p = tp / pred_g if pred_g else 0.0  # unpredicted class: precision 0
        r = tp / true_g if true_g else 0.0
        f = 2 * p * r / (p + r) if (p + r) else 0.0
        precision.append(float(p))
        recall.append(float(r))
        f1.append(float(f))

    return ClassReport(
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        accuracy=float((preds == labels).mean()),
        confusion=confusion,
        mse=float(np.mean((preds - labels) ** 2.0)),
        support=[int(s) for s in confusion.sum(axis=1)],
    )


def _binary_auc(scores, positives):
    """AUC of a binary problem via the trapezoidal ROC integral.

    Thresholds sweep the distinct score values; samples tied at a threshold
    enter the curve together, which is equivalent to the midpoint-rank tie
    convention.
    """
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = positives[order]
    # group ties: cumulative TP/FP after each distinct score value
    boundary = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[boundary]
    fp = np.cumsum(~y)[boundary]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return float(np.trapezoid(tpr, fpr))


def roc_auc_ovr(probs, labels):
    """One-vs-rest AUC per grade plus the macro mean over defined grades.

    Returns ``(aucs, macro)`` where ``aucs`` is a list of 5 floats or None
    for grades with no positive (or no negative) samples.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] != NUM_GRADES:
        raise ValueError(f"probs must be (N, {NUM_GRADES}), got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ValueError("labels length must match probs rows")
    aucs = [_binary_auc(probs[:, g], labels == g) for g in range(NUM_GRADES)]
    defined = [a for a in aucs if a is not None]
    macro = float(np.mean(defined)) if defined else None
    return aucs, macro


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float

    def __repr__(self):
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"index={self.worst_index}, analytic={self.analytic:.6e}, "
                f"numeric={self.numeric:.6e})")


def grad_check(fn, x, eps=1e-5) -> GradCheckResult:
    """Compare an operation's analytic gradient with central differences.

    ``fn(x)`` must return ``(value, grad)`` with a scalar value and a gradient
    array shaped like ``x``.  Every element of ``x`` is perturbed by ``+-eps``
    and the relative error ``|a - n| / max(|a|, |n|, 0.01 * gscale)`` is
    reported elementwise, where ``gscale`` is the largest gradient magnitude.
    The floor keeps elements that cancel to near zero (e.g. batch-norm input
    gradients, which sum to zero per channel) from being judged against a
    vanishing denominator; they are compared absolutely at 1% of the
    gradient's scale instead.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x)
    _, analytic = fn(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} != input shape {x.shape}")

    numeric = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn(x)[0])
        flat[i] = orig - eps
        down = float(fn(x)[0])
        flat[i] = orig
        if not np.isfinite(up) or not np.isfinite(down):
            raise FloatingPointError(f"non-finite value during finite differences at {i}")
        numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)

    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    gscale = float(denom.max()) if denom.size else 0.0
    denom = np.maximum(denom, 0.01 * gscale)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(denom > 0, np.abs(analytic - numeric) / denom, 0.0)
    worst = np.unravel_index(int(rel.argmax()), x.shape) if x.size else ()
    return GradCheckResult(
        max_rel_error=float(rel.max()) if x.size else 0.0,
        worst_index=worst,
        analytic=float(analytic[worst]) if x.size else 0.0,
        numeric=float(numeric[worst]) if x.size else 0.0,
    )
