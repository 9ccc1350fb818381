"""Knee-joint localisation: template matching, the linear-SVM sliding-window
detector, and FCN heatmap localisation in centre and ROI modes.

All methods return exactly one detection per knee side or raise
:class:`LocalisationError`; silent partial results never happen.  Side
naming follows the PA radiograph convention: a structure left of the image
midline is the subject's right knee.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageproc import (binarize_otsu, connected_components, resize,
                        sobel_horizontal, template_distance_map)

TEMPLATE_SIZE = 20
SLIDE_STRIDE = 10
TEMPLATE_REGION = (700, 500)       # (w, h) fixed region at original scale
SVM_REGION = (300, 200)
CENTER_CANVAS = 2560               # centre-mode extraction canvas edge
CENTER_REGION = (640, 560)
ROI_TARGET = (200, 300)            # (rows, cols) of the grader input


class LocalisationError(RuntimeError):
    """Localisation could not produce one detection per side.

    Carries the offending heatmap (when available) for diagnostics.
    """

    def __init__(self, message, heatmap=None):
        super().__init__(message)
        self.heatmap = heatmap


@dataclass(frozen=True)
class Detection:
    side: str                 # "left" | "right" (subject side)
    center: tuple             # (x, y) in working-resolution pixels
    bbox: tuple               # (x, y, w, h); scale depends on the method
    score: float
    method: str

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be left or right, got {self.side!r}")


def side_of(x, midline):
    """PA convention: image-left structures belong to the subject's right knee."""
    return "right" if x < midline else "left"


def clamp_box(box, width, height):
    """Intersect an (x, y, w, h) box with the image bounds."""
    x, y, w, h = box
    x0 = max(0, int(x))
    y0 = max(0, int(y))
    x1 = min(int(width), int(x + w))
    y1 = min(int(height), int(y + h))
    return (x0, y0, max(0, x1 - x0), max(0, y1 - y0))


def center_box(cx, cy, w, h):
    return (int(round(cx - w / 2)), int(round(cy - h / 2)), int(w), int(h))


# ---------------------------------------------------------------------------
# template matching
# ---------------------------------------------------------------------------

def match_templates(img, templates, stride=SLIDE_STRIDE):
    """Per image half, the window whose best template distance is smallest.

    ``img`` must already be downscaled and equalised.  Returns the
    (right, left) detections at the working scale; bbox is the matched
    20x20 window.
    """
    if not templates:
        raise ValueError("at least one template required")
    h, w = np.asarray(img).shape
    mid = w // 2
    halves = ((0, np.asarray(img)[:, :mid]), (mid, np.asarray(img)[:, mid:]))
    detections = []
    for x_offset, half in halves:
        if half.shape[0] < TEMPLATE_SIZE or half.shape[1] < TEMPLATE_SIZE:
            raise LocalisationError(f"image half {half.shape} smaller than the "
                                    f"{TEMPLATE_SIZE}x{TEMPLATE_SIZE} window")
        best = None
        for template in templates:
            dist = template_distance_map(half, template, stride=stride)
            best = dist if best is None else np.minimum(best, dist)
        iy, ix = np.unravel_index(int(best.argmin()), best.shape)
        x0 = ix * stride + x_offset
        y0 = iy * stride
        cx = x0 + TEMPLATE_SIZE / 2
        cy = y0 + TEMPLATE_SIZE / 2
        detections.append(Detection(
            side=side_of(cx, mid), center=(cx, cy),
            bbox=(x0, y0, TEMPLATE_SIZE, TEMPLATE_SIZE),
            score=-float(best[iy, ix]), method="template"))
    return tuple(detections)


# ---------------------------------------------------------------------------
# linear SVM on Sobel features
# ---------------------------------------------------------------------------

@dataclass
class LinearModel:
    weights: np.ndarray   # flattened 20x20 Sobel feature weights
    bias: float

    def decision(self, features):
        return features @ self.weights + self.bias


@dataclass(frozen=True)
class SvmConfig:
    c: float = 1.0
    epochs: int = 40
    seed: int = 0


def sobel_window_features(img):
    """Sobel map of the full image; windows slice it without recomputation."""
    return sobel_horizontal(img)


def train_svm(features, labels, cfg: SvmConfig = SvmConfig()) -> LinearModel:
    """L2-regularised hinge loss minimised by epoch-shuffled subgradient
    descent with the 1/(lambda t) step schedule, lambda = 1 / (C n).

    The bias rides along as an augmented constant feature (and is therefore
    weakly regularised, as liblinear does by default).  The schedule is
    damped by one epoch's worth of steps so early updates stay bounded.
    Returns the trained model together with the per-epoch objective history
    via :func:`train_svm_with_history`.
    """
    model, _ = train_svm_with_history(features, labels, cfg)
    return model


def train_svm_with_history(features, labels, cfg: SvmConfig = SvmConfig()):
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"features must be (n, d) with matching labels, "
                         f"got {x.shape} and {y.shape}")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("degenerate training set: need both classes")
    n, d = x.shape
    lam = 1.0 / (cfg.c * n)
    rng = np.random.default_rng(cfg.seed)
    xa = np.hstack([x, np.ones((n, 1))])
    w = np.zeros(d + 1)
    w_avg = np.zeros(d + 1)   # averaged iterate: smoother objective descent
    t = n  # schedule damping: first step behaves like epoch two
    steps = 0
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in order:
            t += 1
            steps += 1
            eta = 1.0 / (lam * t)
            margin = y[i] * (xa[i] @ w)
            w *= (1.0 - eta * lam)
            if margin < 1.0:
                w += eta * y[i] * xa[i]
            w_avg += (w - w_avg) / steps
        model = LinearModel(weights=w_avg[:d].copy(), bias=float(w_avg[d]))
        history.append(svm_objective(model, x, y, c=cfg.c))
    return model, history


def svm_objective(model: LinearModel, features, labels, c=1.0):
    """The trained objective: 0.5 lambda (||w||^2 + b^2) + mean hinge."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    lam = 1.0 / (c * len(y))
    sq = float(model.weights @ model.weights) + model.bias ** 2
    hinge = float(np.maximum(0.0, 1.0 - y * model.decision(x)).mean())
    return 0.5 * lam * sq + hinge


def svm_detect(img, model: LinearModel, stride=SLIDE_STRIDE):
    """Per half, the stride-spaced 20x20 window with the highest decision
    score over its Sobel features (first window wins ties)."""
    img = np.asarray(img)
    h, w = img.shape
    mid = w // 2
    grad = sobel_window_features(img)
    detections = []
    for x_lo, x_hi in ((0, mid), (mid, w)):
        best_score = None
        best_pos = None
        for y0 in range(0, h - TEMPLATE_SIZE + 1, stride):
            for x0 in range(x_lo, x_hi - TEMPLATE_SIZE + 1, stride):
                feats = grad[y0:y0 + TEMPLATE_SIZE, x0:x0 + TEMPLATE_SIZE].reshape(-1)
                score = float(model.decision(feats))
                if best_score is None or score > best_score:
                    best_score = score
                    best_pos = (x0, y0)
        if best_pos is None:
            raise LocalisationError(f"image half narrower than the "
                                    f"{TEMPLATE_SIZE}x{TEMPLATE_SIZE} window")
        x0, y0 = best_pos
        cx = x0 + TEMPLATE_SIZE / 2
        cy = y0 + TEMPLATE_SIZE / 2
        detections.append(Detection(
            side=side_of(cx, mid), center=(cx, cy),
            bbox=(x0, y0, TEMPLATE_SIZE, TEMPLATE_SIZE),
            score=best_score, method="svm"))
    return tuple(detections)


# ---------------------------------------------------------------------------
# FCN localisation
# ---------------------------------------------------------------------------

def fcn_heatmap(img, network):
    """Run the localisation network on a working-size image."""
    expected = tuple(network.spec.input_shape[1:])
    work = np.asarray(img)
    if work.shape != expected:
        work = resize(work, expected[1], expected[0], method="bilinear")
    x = standardize(work)[None, None, :, :]
    out = network.forward(x, training=False)
    return out["out"][0, 0]


def standardize(img):
    """Per-image zero-mean unit-variance scaling (the pipeline's mean
    normalisation step), identical at training and inference."""
    f = np.asarray(img, dtype=np.float32)
    std = float(f.std())
    return (f - f.mean()) / (std if std > 1e-6 else 1.0)


def _top2_components(heatmap):
    mask = binarize_otsu(heatmap)
    comps = connected_components(mask)
    if len(comps) < 2:
        raise LocalisationError(
            f"found {len(comps)} candidate region(s), need 2", heatmap=heatmap)
    return comps[:2], mask


def heatmap_detections_from_mask(heatmap, comps):
    """Order the top-2 components left-to-right and tag subject sides."""
    a, b = sorted(comps, key=lambda c: c.centroid[0])
    mid = heatmap.shape[1] / 2
    sa = side_of(a.centroid[0], mid)
    sb = side_of(b.centroid[0], mid)
    if sa == sb:
        sa, sb = "right", "left"  # both in one half: keep left-to-right order
    return [(a, sa), (b, sb)]


def component_score(heatmap, comp):
    x, y, w, h = comp.bbox
    return float(heatmap[y:y + h, x:x + w].mean())


def localize_centers_from_heatmap(heatmap):
    """Centre-mode localisation on a pixel heatmap: Otsu -> top-2 centroids.

    Detection centres are at the working (256) scale; the bbox is the fixed
    640x560 extraction region on the 2560x2560 canvas (centres scaled by 10),
    clamped to the canvas.
    """
    comps, _ = _top2_components(heatmap)
    scale = CENTER_CANVAS / heatmap.shape[0]
    out = []
    for comp, side in heatmap_detections_from_mask(heatmap, comps):
        cx, cy = comp.centroid
        box = center_box(cx * scale, cy * scale, *CENTER_REGION)
        out.append(Detection(
            side=side, center=(cx, cy),
            bbox=clamp_box(box, CENTER_CANVAS, CENTER_CANVAS),
            score=component_score(heatmap, comp), method="fcn-center"))
    return tuple(out)


def localize_roi_from_heatmap(heatmap, original_size):
    """ROI-mode localisation on a pixel heatmap: component bounding boxes
    up-scaled to the original extents per axis (aspect ratio preserved)."""
    oh, ow = original_size
    comps, _ = _top2_components(heatmap)
    sy = oh / heatmap.shape[0]
    sx = ow / heatmap.shape[1]
    out = []
    for comp, side in heatmap_detections_from_mask(heatmap, comps):
        x, y, w, h = scale_box(comp.bbox, sx, sy)
        box = (x, y, max(1, w), max(1, h))
        cx, cy = comp.centroid
        out.append(Detection(
            side=side, center=(cx, cy), bbox=clamp_box(box, ow, oh),
            score=component_score(heatmap, comp), method="fcn-roi"))
    return tuple(out)


def fcn_localize_centers(img, network):
    """Run the localisation network, then centre-mode extraction."""
    return localize_centers_from_heatmap(fcn_heatmap(img, network))


def fcn_localize_roi(img, network, original_size=None):
    """Run the localisation network, then ROI-mode extraction."""
    img = np.asarray(img)
    if original_size is None:
        original_size = img.shape
    return localize_roi_from_heatmap(fcn_heatmap(img, network), original_size)


def scale_box(box, sx, sy):
    """Up-scale an (x, y, w, h) box by per-axis factors."""
    x, y, w, h = box
    return (int(round(x * sx)), int(round(y * sy)),
            int(round(w * sx)), int(round(h * sy)))


# ---------------------------------------------------------------------------
# ROI extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FcnTrainConfig:
    mask_mode: str = "roi"        # "center" | "roi"
    epochs: int = 15
    batch_size: int = 8
    optimizer: object = None      # OptimizerConfig; None picks the published default
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.mask_mode not in ("center", "roi"):
            raise ValueError(f"mask_mode must be 'center' or 'roi', got {self.mask_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must be in (0, 0.5)")


def train_localizer(dataset, preset_name, cfg: FcnTrainConfig = FcnTrainConfig()):
    """Train a localisation FCN on binary knee masks with pixel-wise BCE.

    Centre mode uses SGD with Nesterov momentum, ROI mode the Adam defaults
    (the optimiser each mode was published with); ``cfg.optimizer``
    overrides.  Returns (network, history).
    """
    from .data import make_masks
    from .nn import (ADAM_DEFAULT, LossSpec, Optimizer, SGD_FCN,
                     build_network, get_preset)
    from .nn.train import evaluate_loss, train_step

    spec = get_preset(preset_name)
    size = spec.input_shape[1]
    masks, skipped = make_masks(dataset, cfg.mask_mode, canvas=(size, size))
    if skipped:
        raise ValueError(f"{len(skipped)} images lack {cfg.mask_mode!r} "
                         f"annotations (first: {skipped[0]})")
    names = [rec.image for rec in dataset.records]
    x = np.stack([standardize(_to_working(dataset.image(n), size))
                  for n in names])[:, None]
    y = np.stack([masks[n] for n in names])[:, None].astype(np.float32)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(names))
    n_val = max(1, int(round(len(names) * cfg.validation_fraction)))
    val_idx = order[:n_val]
    train_idx = order[n_val:]

    opt_cfg = cfg.optimizer
    if opt_cfg is None:
        opt_cfg = SGD_FCN if cfg.mask_mode == "center" else ADAM_DEFAULT
    network = build_network(spec, seed=cfg.seed)
    optimizer = Optimizer(opt_cfg)
    loss_spec = LossSpec("bce")

    history = {"train_loss": [], "val_loss": [],
               "meta": {"preset": preset_name, "mask_mode": cfg.mask_mode,
                        "epochs": cfg.epochs, "seed": cfg.seed,
                        "train_size": len(train_idx), "val_size": len(val_idx)}}
    for _ in range(cfg.epochs):
        epoch_order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(epoch_order), cfg.batch_size):
            idx = epoch_order[start:start + cfg.batch_size]
            report = train_step(network, {"x": x[idx], "mask": y[idx]},
                                loss_spec, optimizer)
            losses.append(report["total"])
        history["train_loss"].append(float(np.mean(losses)))
        val_report, _ = evaluate_loss(network, {"x": x[val_idx], "mask": y[val_idx]},
                                      loss_spec)
        history["val_loss"].append(val_report["total"])
    return network, history


def _to_working(img, size):
    img = np.asarray(img)
    if img.shape != (size, size):
        img = resize(img, size, size, method="bilinear")
    return img


class ExtractionError(ValueError):
    """The detection box does not intersect the image."""


def extract_roi(original, detection_or_box, target=ROI_TARGET):
    """Crop the (clamped) box from the image and resize to target rows x cols."""
    img = np.asarray(original)
    h, w = img.shape
    box = detection_or_box.bbox if isinstance(detection_or_box, Detection) \
        else detection_or_box
    x, y, bw, bh = clamp_box(box, w, h)
    if bw == 0 or bh == 0:
        raise ExtractionError(f"box {box} does not intersect the {w}x{h} image")
    crop = img[y:y + bh, x:x + bw]
    rows, cols = target
    return resize(crop, cols, rows, method="bilinear")
