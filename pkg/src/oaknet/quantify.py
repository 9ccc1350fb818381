"""Severity quantification: training the grading CNNs, per-knee prediction,
and the end-to-end radiograph pipeline.

Four objectives share one trainer: plain classification (softmax head),
regression (linear head), joint training (both heads, weighted loss) and
ordinal regression (expected-grade head on the class probabilities).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset, flip_augment
from .imageproc import hist_equalize
from .locate import extract_roi, fcn_localize_roi, standardize
from .nn import (ADAM_DEFAULT, LossSpec, Network, Optimizer, OptimizerConfig,
                 PRESET_MODE, build_network, get_preset)
from .nn.train import compute_loss, train_step

MODES = ("clsf", "reg", "joint", "ordinal")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"
    epochs: int = 30
    batch_size: int = 32
    optimizer: OptimizerConfig = ADAM_DEFAULT
    w_reg: float = 0.5            # regression weight of the joint objective
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must be in (0, 0.5)")


@dataclass(frozen=True)
class KneePrediction:
    probs: tuple | None           # 5 class probabilities (absent in reg mode)
    grade_discrete: int
    grade_continuous: float | None

    def __post_init__(self):
        if self.probs is not None:
            total = float(sum(self.probs))
            if abs(total - 1.0) > 1e-5:
                raise ValueError(f"probabilities sum to {total}, not 1")
        if not 0 <= self.grade_discrete <= 4:
            raise ValueError(f"discrete grade {self.grade_discrete} outside 0..4")


def round_grade(g: float) -> int:
    """Round half away from zero, then clamp to the 0..4 grade range."""
    if not np.isfinite(g):
        raise ValueError(f"non-finite grade {g}")
    rounded = int(np.sign(g) * np.floor(abs(g) + 0.5))
    return min(4, max(0, rounded))


def loss_spec_for(cfg: TrainConfig) -> LossSpec:
    if cfg.mode == "clsf":
        return LossSpec("cce")
    if cfg.mode == "reg":
        return LossSpec("mse")
    return LossSpec(cfg.mode, w_reg=cfg.w_reg)


def _batch_targets(mode, labels):
    targets = {}
    if mode in ("clsf", "joint", "ordinal"):
        targets["labels"] = labels
    if mode in ("reg", "joint", "ordinal"):
        targets["grades"] = labels.astype(np.float32)[:, None]
    return targets


def _stratified_val_indices(labels, fraction, rng):
    val = []
    for g in np.unique(labels):
        idx = np.flatnonzero(labels == g)
        rng.shuffle(idx)
        n_val = max(1, int(round(len(idx) * fraction)))
        val.extend(idx[:n_val])
    return np.sort(np.array(val))


def train_quantifier(dataset: Dataset, preset_name: str, cfg: TrainConfig):
    """Train a grading CNN on a knee-crop dataset.

    Splits off a stratified validation fraction, doubles the training split
    with right-left flips, and records per-epoch train/validation losses and
    validation accuracy.  Returns the final-epoch network plus the history;
    callers wanting best-epoch selection can act on the history themselves.
    """
    preset_mode = PRESET_MODE.get(preset_name)
    if preset_mode is None:
        raise ValueError(f"{preset_name!r} is not a quantifier preset")
    if preset_mode != cfg.mode:
        raise ValueError(f"preset {preset_name!r} carries the {preset_mode!r} "
                         f"objective, not {cfg.mode!r}")

    entries = dataset.knee_entries()
    if not entries:
        raise ValueError("dataset has no graded knees")
    images = [dataset.image(name) for name, _, _ in entries]
    labels = np.array([grade for _, _, grade in entries], dtype=np.int64)
    expected = tuple(get_preset(preset_name).input_shape[1:])
    for img in images:
        if img.shape != expected:
            raise ValueError(f"knee image shape {img.shape} does not match "
                             f"network input {expected}")

    rng = np.random.default_rng(cfg.seed)
    val_idx = _stratified_val_indices(labels, cfg.validation_fraction, rng)
    val_mask = np.zeros(len(labels), dtype=bool)
    val_mask[val_idx] = True
    train_images = [img for img, v in zip(images, val_mask) if not v]
    train_labels = labels[~val_mask]
    val_images = [img for img, v in zip(images, val_mask) if v]
    val_labels = labels[val_mask]
    if len(np.unique(train_labels)) < 5:
        warnings.warn("training split is missing at least one grade")

    # augmentation touches the training split only
    train_images, train_labels = flip_augment(train_images, list(train_labels))
    train_labels = np.asarray(train_labels, dtype=np.int64)
    x_train = np.stack([standardize(img) for img in train_images])[:, None]
    x_val = np.stack([standardize(img) for img in val_images])[:, None]

    network = build_network(get_preset(preset_name), seed=cfg.seed)
    optimizer = Optimizer(cfg.optimizer)
    loss_spec = loss_spec_for(cfg)

    history = {"train_loss": [], "val_loss": [], "val_accuracy": [],
               "train_cce": [], "train_mse": [],
               "meta": {"preset": preset_name, "mode": cfg.mode,
                        "epochs": cfg.epochs, "seed": cfg.seed,
                        "augmented_train_only": True,
                        "train_size": len(train_labels),
                        "val_size": len(val_labels)}}
    n = len(train_labels)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        epoch_parts = {"cce": [], "mse": []}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = {"x": x_train[idx]}
            batch.update(_batch_targets(cfg.mode, train_labels[idx]))
            report = train_step(network, batch, loss_spec, optimizer)
            epoch_losses.append(report["total"])
            for key in epoch_parts:
                if key in report:
                    epoch_parts[key].append(report[key])
        history["train_loss"].append(float(np.mean(epoch_losses)))
        for key, vals in epoch_parts.items():
            history[f"train_{key}"].append(float(np.mean(vals)) if vals else None)

        val_loss, val_accuracy = _evaluate(network, x_val, val_labels, loss_spec,
                                           cfg)
        history["val_loss"].append(val_loss)
        history["val_accuracy"].append(val_accuracy)
    return network, history


def _evaluate(network, x_val, val_labels, loss_spec, cfg):
    batch = {"x": x_val}
    batch.update(_batch_targets(cfg.mode, val_labels))
    outputs = network.forward(x_val, training=False)
    value, _, _ = compute_loss(outputs, batch, loss_spec)
    if "clsf" in outputs:
        preds = outputs["clsf"].argmax(axis=1)
    else:
        preds = np.array([round_grade(v) for v in outputs["reg"][:, 0]])
    accuracy = float((preds == val_labels).mean())
    return float(value), accuracy


def predict(network: Network, knee, mode=None) -> KneePrediction:
    """Grade one 200x300 knee crop (inference mode: dropout off, batch-norm
    on running statistics)."""
    if mode is None:
        mode = PRESET_MODE.get(network.spec.name)
        if mode is None:
            raise ValueError(f"cannot infer objective from preset "
                             f"{network.spec.name!r}; pass mode explicitly")
    knee = np.asarray(knee)
    expected = tuple(network.spec.input_shape[1:])
    if knee.shape != expected:
        raise ValueError(f"knee image must be {expected}, got {knee.shape}")
    outputs = network.forward(standardize(knee)[None, None], training=False)
    return _prediction_from_outputs(outputs, mode, 0)


def _prediction_from_outputs(outputs, mode, row):
    probs = outputs.get("clsf")
    reg = outputs.get("reg")
    continuous = float(reg[row, 0]) if reg is not None else None
    if probs is not None:
        p = tuple(float(v) for v in probs[row])
        discrete = int(np.argmax(probs[row]))  # lowest index wins ties
        return KneePrediction(probs=p, grade_discrete=discrete,
                              grade_continuous=continuous)
    return KneePrediction(probs=None, grade_discrete=round_grade(continuous),
                          grade_continuous=continuous)


def predict_batch(network: Network, knees, mode=None, batch_size=32):
    """Vectorised prediction over a list of knee crops."""
    if mode is None:
        mode = PRESET_MODE.get(network.spec.name)
    x = np.stack([standardize(np.asarray(k)) for k in knees])[:, None]
    preds = []
    for start in range(0, len(knees), batch_size):
        outputs = network.forward(x[start:start + batch_size], training=False)
        for row in range(min(batch_size, len(knees) - start)):
            preds.append(_prediction_from_outputs(outputs, mode, row))
    return preds


def run_pipeline(xray, fcn: Network, cnn: Network, mode=None):
    """Full diagnosis of one radiograph.

    Equalise, localise both knees with the ROI-mode network, extract and
    resize each joint to 200x300, and grade it.  Returns the detections
    paired with predictions, ordered left-to-right in the image.  A
    localisation failure propagates as LocalisationError.
    """
    xray = np.asarray(xray)
    eq = hist_equalize(xray)
    detections = fcn_localize_roi(eq, fcn, original_size=xray.shape)
    results = []
    for det in sorted(detections, key=lambda d: d.bbox[0]):
        knee = extract_roi(eq, det)
        results.append((det, predict(cnn, knee, mode=mode)))
    return results
