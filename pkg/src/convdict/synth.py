"""Synthetic stroke-rendered digit corpus for desk-scale experiments.

Each digit class is a set of polylines on the unit square, rendered through
a per-image random affine jitter (rotation, anisotropic scale, shear,
translation), variable stroke thickness, occasional stroke dropout, blur and
pixel noise. The corpus is deterministic under its seed and is emitted
through the standard IDX surface."""

from __future__ import annotations

import numpy as np

from .data import write_idx_images, write_idx_labels


def _circle(cx, cy, rx, ry, n=12, start=0.0):
    t = start + np.linspace(0.0, 2.0 * np.pi, n + 1)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


# polylines per class, coordinates (x, y) with y pointing down
GLYPHS: dict[int, list[np.ndarray]] = {
    0: [_circle(0.5, 0.5, 0.27, 0.36)],
    1: [np.array([[0.35, 0.28], [0.55, 0.12], [0.55, 0.88]])],
    2: [np.array([[0.24, 0.3], [0.33, 0.14], [0.62, 0.13], [0.74, 0.3],
                  [0.55, 0.55], [0.24, 0.84], [0.78, 0.84]])],
    3: [np.array([[0.26, 0.18], [0.6, 0.13], [0.72, 0.3], [0.5, 0.47],
                  [0.72, 0.62], [0.62, 0.85], [0.25, 0.82]])],
    4: [np.array([[0.63, 0.88], [0.63, 0.12], [0.22, 0.62], [0.82, 0.62]])],
    5: [np.array([[0.75, 0.14], [0.28, 0.14], [0.25, 0.47], [0.6, 0.44],
                  [0.75, 0.62], [0.64, 0.85], [0.24, 0.82]])],
    6: [np.array([[0.66, 0.12], [0.4, 0.35], [0.27, 0.62], [0.4, 0.86],
                  [0.66, 0.84], [0.73, 0.62], [0.55, 0.5], [0.3, 0.6]])],
    7: [np.array([[0.22, 0.14], [0.78, 0.14], [0.45, 0.88]]),
        np.array([[0.35, 0.5], [0.62, 0.5]])],
    8: [_circle(0.5, 0.3, 0.2, 0.17), _circle(0.5, 0.68, 0.24, 0.2)],
    9: [_circle(0.58, 0.34, 0.2, 0.2), np.array([[0.78, 0.36], [0.6, 0.88]])],
}


def _segment_distance(px, py, a, b):
    """Distance of grid points to segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.hypot(px - a[0], py - a[1])
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _blur3(img, strength):
    k = np.array([strength, 1.0, strength])
    k /= k.sum()
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="same"), 0, out)


def render_digit(digit: int, rng: np.random.Generator, rows: int = 28,
                 cols: int = 28, noise: float = 0.06,
                 drop_prob: float = 0.12) -> np.ndarray:
    """One jittered rendering of a digit in [0, 1]."""
    theta = rng.uniform(-0.25, 0.25)
    sx, sy = rng.uniform(0.72, 1.02, 2)
    shear = rng.uniform(-0.18, 0.18)
    tx, ty = rng.uniform(-2.2, 2.2, 2)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    scale = np.array([[sx, shear], [0.0, sy]])
    m = rot @ scale
    thickness = rng.uniform(0.85, 1.7)
    grid_y, grid_x = np.mgrid[0:rows, 0:cols]
    canvas = np.zeros((rows, cols))
    strokes = GLYPHS[digit]
    for poly in strokes:
        pts = (poly - 0.5) @ m.T + 0.5
        pts = pts * [cols - 8, rows - 8] + [4 + tx, 4 + ty]
        for i in range(len(pts) - 1):
            if len(strokes) > 1 or len(pts) > 4:
                if rng.uniform() < drop_prob:
                    continue
            d = _segment_distance(grid_x, grid_y, pts[i], pts[i + 1])
            canvas = np.maximum(canvas, np.exp(-(d / thickness) ** 2))
    canvas = _blur3(canvas, rng.uniform(0.25, 0.55))
    canvas *= rng.uniform(0.82, 1.0)
    canvas += noise * rng.standard_normal((rows, cols))
    return np.clip(canvas, 0.0, 1.0)


def make_digit_corpus(count: int, seed: int = 0, rows: int = 28, cols: int = 28,
                      noise: float = 0.06, drop_prob: float = 0.12):
    """Balanced, shuffled digit corpus; returns (images, labels)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    rng.shuffle(labels)
    images = np.empty((count, rows, cols))
    for i in range(count):
        images[i] = render_digit(int(labels[i]), rng, rows, cols, noise, drop_prob)
    return images, labels


def write_digit_corpus(images_path: str, labels_path: str, count: int,
                       seed: int = 0, **kwargs) -> None:
    images, labels = make_digit_corpus(count, seed, **kwargs)
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
