"""Dataset manifests, ground-truth masks, stratified splitting and the
synthetic radiograph generator.

Manifest format (UTF-8, one record per line, whitespace separated):

    image_path  left=GRADE:CX,CY:X,Y,W,H  right=GRADE:CX,CY:X,Y,W,H

Any of the three side fields may be "-" when the annotation is absent, and a
record may carry a single side (knee-crop datasets).  Centres are given at
the 256x256 working scale, boxes at the original image scale.

Synthetic images encode the severity grade through the vertical gap between
two bright bone-like bands (narrower gap = higher grade) plus optional spur
blobs at the band corners, echoing joint-space narrowing and osteophytes.
Knee crops (200x300) use the radiograph knee-box geometry scaled by exactly
2.5, so extracted regions resemble the crop canvases the grader trains on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageproc import hflip, read_pgm, write_pgm

SIDES = ("left", "right")
WORKING_SIZE = 256          # FCN input edge; centres are annotated at this scale
CENTER_MASK = 20            # centre ground-truth box edge, in working pixels

# radiograph geometry: two knees on a 256x256 canvas, knee box 100x80;
# the box width leaves a 20+ pixel corridor between the two ROIs so the
# heatmap blobs stay separable
RADIO_KNEE_BOX = (100, 80)          # (w, h)
RADIO_BAND_HALF_WIDTH = 42
RADIO_BAND_HEIGHT = 16
RADIO_GAPS = (22, 18, 14, 10, 6)    # joint gap per grade, strictly decreasing

# knee-crop geometry: the radiograph knee box scaled by (3.0, 2.5) onto a
# 300x200 (w x h) canvas, matching what extract_roi produces from the boxes
KNEE_SIZE = (200, 300)              # (h, w)
KNEE_GAPS = (55, 45, 35, 25, 15)

SPUR_PROBS = (0.0, 0.25, 0.5, 0.75, 1.0)
BACKGROUND = 22
BAND_INTENSITY = 195


class ManifestError(ValueError):
    """Malformed manifest record; message carries the line number."""


@dataclass(frozen=True)
class SideAnnotation:
    grade: int | None = None
    center: tuple | None = None   # (cx, cy) at working scale
    bbox: tuple | None = None     # (x, y, w, h) at original scale

    def __post_init__(self):
        if self.grade is not None and not 0 <= self.grade <= 4:
            raise ValueError(f"grade {self.grade} outside 0..4")
        if self.bbox is not None:
            x, y, w, h = self.bbox
            if w <= 0 or h <= 0:
                raise ValueError(f"bbox {self.bbox} has non-positive area")


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    sides: dict = field(default_factory=dict)   # side -> SideAnnotation

    def max_grade(self):
        grades = [a.grade for a in self.sides.values() if a.grade is not None]
        return max(grades) if grades else None


class Dataset:
    """Immutable record list plus image access (in memory or from a directory)."""

    def __init__(self, records, images=None, images_dir=None):
        self.records = tuple(records)
        self._images = dict(images) if images else None
        self.images_dir = Path(images_dir) if images_dir else None
        self._cache = {}

    def __len__(self):
        return len(self.records)

    def image(self, name):
        if self._images is not None:
            return self._images[name]
        if name not in self._cache:
            if self.images_dir is None:
                raise KeyError(f"dataset has no image source for {name!r}")
            self._cache[name] = read_pgm(self.images_dir / name)
        return self._cache[name]

    def knee_entries(self):
        """(image name, side, grade) for every graded side."""
        out = []
        for rec in self.records:
            for side, ann in rec.sides.items():
                if ann.grade is not None:
                    out.append((rec.image, side, ann.grade))
        return out

    def grade_histogram(self):
        hist = {g: 0 for g in range(5)}
        for _, _, grade in self.knee_entries():
            hist[grade] += 1
        return hist

    def subset(self, indices):
        recs = [self.records[i] for i in indices]
        if self._images is not None:
            images = {r.image: self._images[r.image] for r in recs}
            return Dataset(recs, images=images)
        return Dataset(recs, images_dir=self.images_dir)


# ---------------------------------------------------------------------------
# manifest serialisation
# ---------------------------------------------------------------------------

def _format_side(side, ann: SideAnnotation):
    grade = "-" if ann.grade is None else str(ann.grade)
    center = "-" if ann.center is None else f"{ann.center[0]:.10g},{ann.center[1]:.10g}"
    bbox = "-" if ann.bbox is None else ",".join(str(int(v)) for v in ann.bbox)
    return f"{side}={grade}:{center}:{bbox}"


def _parse_side(token, lineno):
    try:
        side, rest = token.split("=", 1)
        grade_s, center_s, bbox_s = rest.split(":")
    except ValueError:
        raise ManifestError(f"line {lineno}: malformed side field {token!r}") from None
    if side not in SIDES:
        raise ManifestError(f"line {lineno}: unknown side {side!r}")
    grade = None if grade_s == "-" else int(grade_s)
    if grade is not None and not 0 <= grade <= 4:
        raise ManifestError(f"line {lineno}: grade {grade} outside 0..4")
    center = None
    if center_s != "-":
        cx, cy = center_s.split(",")
        center = (float(cx), float(cy))
    bbox = None
    if bbox_s != "-":
        parts = bbox_s.split(",")
        if len(parts) != 4:
            raise ManifestError(f"line {lineno}: bbox needs 4 fields, got {bbox_s!r}")
        bbox = tuple(int(v) for v in parts)
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise ManifestError(f"line {lineno}: bbox {bbox} has non-positive area")
    return side, SideAnnotation(grade=grade, center=center, bbox=bbox)


def write_manifest(dataset: Dataset, path):
    lines = ["# image  side=grade:cx,cy:x,y,w,h  (\"-\" marks absent fields)"]
    for rec in dataset.records:
        fields = [rec.image]
        for side in SIDES:
            if side in rec.sides:
                fields.append(_format_side(side, rec.sides[side]))
        lines.append("  ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, images_dir=None, check_images=True) -> Dataset:
    """Parse and validate a manifest; errors carry the offending line number."""
    path = Path(path)
    if images_dir is None:
        images_dir = path.parent
    records = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise ManifestError(f"line {lineno}: expected image and at least one side field")
        image = tokens[0]
        sides = {}
        for token in tokens[1:]:
            side, ann = _parse_side(token, lineno)
            if side in sides:
                raise ManifestError(f"line {lineno}: duplicate side {side!r}")
            sides[side] = ann
        if check_images and not (Path(images_dir) / image).is_file():
            raise ManifestError(f"line {lineno}: image file not found: {image}")
        records.append(ManifestRecord(image=image, sides=sides))
    if not records:
        warnings.warn(f"{path}: empty manifest")
    return Dataset(records, images_dir=images_dir)


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write images as PGM plus a manifest.txt; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in dataset.records:
        write_pgm(out_dir / rec.image, dataset.image(rec.image))
    manifest = out_dir / "manifest.txt"
    write_manifest(dataset, manifest)
    return manifest


# ---------------------------------------------------------------------------
# ground-truth masks
# ---------------------------------------------------------------------------

def make_masks(dataset: Dataset, mode: str, canvas=(WORKING_SIZE, WORKING_SIZE)):
    """Binary training masks per image.

    "center": a 20x20 box around each annotated centre (working scale).
    "roi": the annotated bbox scaled from original to canvas scale.
    Images lacking the required annotation are skipped and reported.
    Returns (masks: name -> bool array, skipped: list of names).
    """
    if mode not in ("center", "roi"):
        raise ValueError(f"mode must be 'center' or 'roi', got {mode!r}")
    ch, cw = canvas
    masks = {}
    skipped = []
    for rec in dataset.records:
        mask = np.zeros((ch, cw), dtype=bool)
        have_any = False
        for ann in rec.sides.values():
            if mode == "center":
                if ann.center is None:
                    continue
                cx, cy = ann.center
                half = CENTER_MASK // 2
                x0 = int(round(cx)) - half
                y0 = int(round(cy)) - half
                x1, y1 = x0 + CENTER_MASK, y0 + CENTER_MASK
            else:
                if ann.bbox is None:
                    continue
                oh, ow = dataset.image(rec.image).shape
                bx, by, bw, bh = ann.bbox
                x0 = int(round(bx * cw / ow))
                y0 = int(round(by * ch / oh))
                x1 = int(round((bx + bw) * cw / ow))
                y1 = int(round((by + bh) * ch / oh))
            mask[max(0, y0):max(0, min(ch, y1)), max(0, x0):max(0, min(cw, x1))] = True
            have_any = True
        if have_any:
            masks[rec.image] = mask
        else:
            skipped.append(rec.image)
    return masks, skipped


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------

def split(dataset: Dataset, train_frac=0.7, val_frac=0.1, seed=0):
    """Deterministic stratified split into (train, val, test).

    Strata follow the record's maximum grade.  Strata smaller than 3 fall
    back to a single unstratified split with a warning.  Partitions are
    disjoint and exhaustive.
    """
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1.0:
        raise ValueError("fractions must be positive and sum below 1")
    rng = np.random.default_rng(seed)
    strata = {}
    for i, rec in enumerate(dataset.records):
        strata.setdefault(rec.max_grade(), []).append(i)
    if any(len(v) < 3 for v in strata.values()):
        warnings.warn("stratum with fewer than 3 records: splitting unstratified")
        strata = {None: list(range(len(dataset.records)))}

    train_idx, val_idx, test_idx = [], [], []
    for key in sorted(strata, key=lambda g: -1 if g is None else g):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        n_train, n_val, _ = _largest_remainder(len(idx), (train_frac, val_frac,
                                                          1.0 - train_frac - val_frac))
        train_idx.extend(idx[:n_train])
        val_idx.extend(idx[n_train:n_train + n_val])
        test_idx.extend(idx[n_train + n_val:])
    return (dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx)),
            dataset.subset(sorted(test_idx)))


def _largest_remainder(n, fractions):
    """Integer allocation of n items by fractions, remainders to the largest."""
    raw = [n * f for f in fractions]
    counts = [int(np.floor(v)) for v in raw]
    order = np.argsort([c - v for c, v in zip(counts, raw)], kind="stable")
    for i in range(n - sum(counts)):
        counts[order[i]] += 1
    return counts


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    count: int
    image_size: tuple
    gap_widths: tuple
    spur_probs: tuple = SPUR_PROBS
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if any(a <= b for a, b in zip(self.gap_widths, self.gap_widths[1:])):
            raise ValueError(f"gap widths must strictly decrease with grade, "
                             f"got {self.gap_widths}")
        if len(self.gap_widths) != 5 or len(self.spur_probs) != 5:
            raise ValueError("need one gap width and spur probability per grade")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @staticmethod
    def radiographs(count, noise=0.0, seed=0):
        return SyntheticConfig(count=count, image_size=(WORKING_SIZE, WORKING_SIZE),
                               gap_widths=RADIO_GAPS, noise=noise, seed=seed)

    @staticmethod
    def knees(count, noise=0.0, seed=0):
        return SyntheticConfig(count=count, image_size=KNEE_SIZE,
                               gap_widths=KNEE_GAPS, noise=noise, seed=seed)


def _grade_cycle(rng, n):
    grades = np.tile(np.arange(5), n // 5 + 1)[:n]
    rng.shuffle(grades)
    return grades


def _draw_knee_structure(img, cx, cy, half_width, band_h, gap, intensity,
                         spur, spur_len):
    """Two bright bands around (cx, cy) separated by ``gap`` rows; optional
    spur blobs protrude into the gap at the band corners."""
    lo = gap // 2
    hi = gap - lo
    femur_top = cy - lo - band_h
    tibia_top = cy + hi
    img[femur_top:femur_top + band_h, cx - half_width:cx + half_width] = intensity
    img[tibia_top:tibia_top + band_h, cx - half_width:cx + half_width] = intensity
    if spur:
        for sx in (cx - half_width, cx + half_width - spur_len):
            img[cy - lo:cy - lo + spur_len, sx:sx + spur_len] = intensity
            img[tibia_top - spur_len:tibia_top, sx:sx + spur_len] = intensity
    return femur_top, tibia_top + band_h


def synth_radiographs(cfg: SyntheticConfig) -> Dataset:
    """Whole synthetic radiographs: one knee per half, exact annotations."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    box_w, box_h = RADIO_KNEE_BOX
    grades = _grade_cycle(rng, 2 * cfg.count)
    records = []
    images = {}
    for i in range(cfg.count):
        img = np.full((h, w), BACKGROUND, dtype=np.float64)
        sides = {}
        # image-left half holds the subject's right knee (PA convention)
        for k, (side, base_cx) in enumerate((("right", w // 4), ("left", 3 * w // 4))):
            grade = int(grades[2 * i + k])
            cx = base_cx + int(rng.integers(-3, 4))
            cy = h // 2 + int(rng.integers(-8, 9))
            half_width = RADIO_BAND_HALF_WIDTH - int(rng.integers(0, 7))
            intensity = BAND_INTENSITY + int(rng.integers(-15, 16))
            spur = rng.random() < cfg.spur_probs[grade]
            _draw_knee_structure(img, cx, cy, half_width, RADIO_BAND_HEIGHT,
                                 cfg.gap_widths[grade], intensity, spur, spur_len=4)
            bbox = (cx - box_w // 2, cy - box_h // 2, box_w, box_h)
            sides[side] = SideAnnotation(grade=grade, center=(float(cx), float(cy)),
                                         bbox=bbox)
        if cfg.noise > 0:
            img += rng.normal(scale=cfg.noise, size=img.shape)
        name = f"synth_{i:04d}.pgm"
        images[name] = np.clip(img, 0, 255).astype(np.uint8)
        records.append(ManifestRecord(image=name, sides=sides))
    return Dataset(records, images=images)


def synth_knees(cfg: SyntheticConfig) -> Dataset:
    """Knee crops on the 200x300 canvas (radiograph knee box scaled by 2.5)."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    grades = _grade_cycle(rng, cfg.count)
    records = []
    images = {}
    for i in range(cfg.count):
        grade = int(grades[i])
        img = np.full((h, w), BACKGROUND, dtype=np.float64)
        cx = w // 2 + int(rng.integers(-10, 11))
        cy = h // 2 + int(rng.integers(-12, 13))
        half_width = 126 - int(rng.integers(0, 19))
        intensity = BAND_INTENSITY + int(rng.integers(-15, 16))
        spur = rng.random() < cfg.spur_probs[grade]
        _draw_knee_structure(img, cx, cy, half_width, 40,
                             cfg.gap_widths[grade], intensity, spur, spur_len=10)
        if cfg.noise > 0:
            img += rng.normal(scale=cfg.noise, size=img.shape)
        name = f"knee_{i:04d}.pgm"
        images[name] = np.clip(img, 0, 255).astype(np.uint8)
        records.append(ManifestRecord(
            image=name, sides={"left": SideAnnotation(grade=grade)}))
    return Dataset(records, images=images)


def measure_gap_grade(img, gap_widths):
    """Rule-based grade reader: measure the dark gap between the two bright
    bands at the middle of the bright column range, then match the nearest
    configured gap width.  The middle column avoids the spur blobs at the
    band corners; exact on noise-free synthetic images."""
    img = np.asarray(img)
    threshold = (BACKGROUND + BAND_INTENSITY - 15) / 2.0
    col_mass = (img > threshold).sum(axis=0)
    bright_cols = np.flatnonzero(col_mass > 0)
    if bright_cols.size == 0:
        raise ValueError("no bright structure found")
    cx = int(bright_cols[len(bright_cols) // 2])
    bright = img[:, cx] > threshold
    runs = _bright_runs(bright)
    if len(runs) < 2:
        raise ValueError("fewer than two bands found")
    runs.sort(key=lambda r: r[1] - r[0], reverse=True)
    (a0, a1), (b0, b1) = sorted(runs[:2])
    gap = b0 - a1
    return int(np.argmin([abs(gap - gw) for gw in gap_widths]))


def _bright_runs(column):
    runs = []
    start = None
    for i, v in enumerate(column):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(column)))
    return runs


def flip_augment(images, labels):
    """Right-left flips appended to the training arrays (training split only)."""
    flipped = [hflip(img) for img in images]
    return list(images) + flipped, list(labels) + list(labels)
