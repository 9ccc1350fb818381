"""Classical image operations used by the knee localisation stages.

Grayscale images travel as 2-d uint8 numpy arrays (rows = height); binary
masks as 2-d bool arrays.  Everything here is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# kernel responding to horizontal edges (intensity changing down the rows)
SOBEL_HORIZONTAL = np.array([[-1, -2, -1],
                             [0, 0, 0],
                             [1, 2, 1]], dtype=np.float64)


class DegenerateInputError(ValueError):
    """Raised when an input has no structure to act on (e.g. constant image)."""


@dataclass(frozen=True)
class Component:
    """A connected region of true pixels."""

    area: int
    centroid: tuple  # (x, y), mean pixel coordinates
    bbox: tuple      # (x, y, w, h), tight integer box


def _check_gray(img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected 2-d grayscale image, got shape {img.shape}")
    return img


def hist_equalize(img):
    """Standard 256-bin CDF remap; constant images are returned unchanged."""
    img = _check_gray(img).astype(np.uint8, copy=False)
    hist = np.bincount(img.reshape(-1), minlength=256)
    cdf = hist.cumsum()
    nonzero = np.flatnonzero(hist)
    if nonzero.size <= 1:
        return img.copy()
    cdf_min = cdf[nonzero[0]]
    n = img.size
    lut = np.rint((cdf - cdf_min) / (n - cdf_min) * 255.0).astype(np.uint8)
    return lut[img]


def resize(img, new_w, new_h, method="bilinear"):
    """Resample to ``new_w`` x ``new_h``.

    Bilinear uses the half-pixel-centre convention
    ``src = (dst + 0.5) * scale - 0.5`` with edge clamping; nearest picks the
    pixel covering each destination centre.  Masks should use nearest.
    """
    img = _check_gray(img)
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target extents must be >= 1, got {new_w}x{new_h}")
    h, w = img.shape
    if (new_h, new_w) == (h, w):
        return img.copy()
    sy = h / new_h
    sx = w / new_w
    ys = (np.arange(new_h) + 0.5) * sy - 0.5
    xs = (np.arange(new_w) + 0.5) * sx - 0.5
    if method == "nearest":
        yi = np.clip(np.floor(ys + 0.5).astype(np.int64), 0, h - 1)
        xi = np.clip(np.floor(xs + 0.5).astype(np.int64), 0, w - 1)
        return img[yi[:, None], xi[None, :]].copy()
    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    f = img.astype(np.float64)
    top = f[y0[:, None], x0[None, :]] * (1 - fx) + f[y0[:, None], x1[None, :]] * fx
    bot = f[y1[:, None], x0[None, :]] * (1 - fx) + f[y1[:, None], x1[None, :]] * fx
    out = top * (1 - fy) + bot * fy
    if np.issubdtype(img.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(img.dtype)
    return out.astype(img.dtype)


def hflip(img):
    """Mirror columns (right-left flip)."""
    return _check_gray(img)[:, ::-1].copy()


def sobel_horizontal(img):
    """Response of the horizontal-edge Sobel kernel.

    The interior is the valid 3x3 correlation; the one-pixel output border,
    where the kernel does not fit, is zero.  This keeps the response of a
    constant image identically zero and makes the map invariant under adding
    a constant to all intensities.
    """
    img = _check_gray(img)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"image must be at least 3x3 for Sobel, got {h}x{w}")
    f = img.astype(np.float64)
    out = np.zeros((h, w), dtype=np.float64)
    inner = out[1:h - 1, 1:w - 1]
    for di in range(3):
        for dj in range(3):
            k = SOBEL_HORIZONTAL[di, dj]
            if k:
                inner += k * f[di:di + h - 2, dj:dj + w - 2]
    return out


def otsu_threshold(values):
    """Threshold maximising between-class variance; binarise with ``v > t``.

    8-bit input keeps its integer levels; real input is quantised into 256
    bins over [min, max] and the returned threshold is in the original units.
    Ties resolve to the lowest threshold.
    """
    values = np.asarray(values)
    flat = values.reshape(-1)
    vmin = float(flat.min())
    vmax = float(flat.max())
    if vmin == vmax:
        raise DegenerateInputError("constant input has no threshold")

    if values.dtype == np.uint8:
        levels = flat.astype(np.int64)
        edges = np.arange(256, dtype=np.float64)
    else:
        levels = np.minimum((flat - vmin) / (vmax - vmin) * 256.0, 255.999).astype(np.int64)
        edges = vmin + (np.arange(256) + 1.0) / 256.0 * (vmax - vmin)

    hist = np.bincount(levels, minlength=256).astype(np.float64)
    total = hist.sum()
    w0 = hist.cumsum()
    sum_all = (hist * np.arange(256)).sum()
    sum0 = (hist * np.arange(256)).cumsum()
    w1 = total - w0
    best_t, best_var = 0, -1.0
    for t in range(255):  # split: class0 = levels <= t, class1 = levels > t
        if w0[t] == 0 or w1[t] == 0:
            continue
        mu0 = sum0[t] / w0[t]
        mu1 = (sum_all - sum0[t]) / w1[t]
        var = w0[t] * w1[t] * (mu0 - mu1) ** 2
        if var > best_var:
            best_var = var
            best_t = t
    if best_var < 0:
        raise DegenerateInputError("no valid split found")
    if values.dtype == np.uint8:
        return int(best_t)
    # upper edge of the last class-0 bin: (v > t) reproduces the bin split
    return float(edges[best_t])


def binarize_otsu(values):
    """Otsu threshold followed by strict-greater binarisation."""
    t = otsu_threshold(values)
    return np.asarray(values) > t


def connected_components(mask, connectivity=8):
    """Label true pixels and summarise each region, sorted by area descending.

    Uses two-pass union-find labelling.  Ties in area break on the bbox
    top-left corner (y, then x).
    """
    if connectivity != 8:
        raise ValueError("only 8-connectivity is supported")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent = [0]

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    next_label = 1
    for y in range(h):
        row = mask[y]
        for x in range(w):
            if not row[x]:
                continue
            neigh = []
            if x > 0 and labels[y, x - 1]:
                neigh.append(labels[y, x - 1])
            if y > 0:
                if labels[y - 1, x]:
                    neigh.append(labels[y - 1, x])
                if x > 0 and labels[y - 1, x - 1]:
                    neigh.append(labels[y - 1, x - 1])
                if x + 1 < w and labels[y - 1, x + 1]:
                    neigh.append(labels[y - 1, x + 1])
            if not neigh:
                labels[y, x] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                m = min(neigh)
                labels[y, x] = m
                for other in neigh:
                    union(m, other)

    if next_label == 1:
        return []

    roots = np.array([find(i) for i in range(next_label)], dtype=np.int64)
    flat_labels = roots[labels]
    ys, xs = np.nonzero(mask)
    comp_ids = flat_labels[ys, xs]
    components = []
    for cid in np.unique(comp_ids):
        sel = comp_ids == cid
        cx = xs[sel]
        cy = ys[sel]
        x0, x1 = int(cx.min()), int(cx.max())
        y0, y1 = int(cy.min()), int(cy.max())
        components.append(Component(
            area=int(sel.sum()),
            centroid=(float(cx.mean()), float(cy.mean())),
            bbox=(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
        ))
    components.sort(key=lambda c: (-c.area, c.bbox[1], c.bbox[0]))
    return components


def template_distance_map(img, template, stride=10):
    """Euclidean distance between the template and each stride-spaced window."""
    img = _check_gray(img).astype(np.float64)
    template = np.asarray(template, dtype=np.float64)
    th, tw = template.shape
    h, w = img.shape
    if h < th or w < tw:
        raise ValueError(f"template {th}x{tw} larger than image {h}x{w}")
    win = sliding_window_view(img, (th, tw))[::stride, ::stride]
    diff = win - template
    return np.sqrt((diff * diff).sum(axis=(2, 3)))


# ---------------------------------------------------------------------------
# PGM (P5) input/output
# ---------------------------------------------------------------------------

def read_pgm(path):
    """Read a binary 8-bit PGM (P5) file."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a P5 PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    if len(data) - pos < w * h:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def write_pgm(path, img):
    img = _check_gray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"PGM output requires uint8 pixels, got {img.dtype}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
