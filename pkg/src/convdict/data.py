"""Data ingestion and preprocessing: IDX files, PGM/PNG images, bilinear
resize, local contrast normalization."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 1 << 30  # dim-overflow guard


class DataError(ValueError):
    """Unreadable, malformed, or inconsistent input data."""


@dataclass
class DatasetHandle:
    """Loaded grayscale images in [0, 1] plus optional labels."""
    images: np.ndarray                 # (N, rows, cols) float64
    labels: np.ndarray | None = None   # (N,) int64
    provenance: str = ""

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DataError(
                f"label count {len(self.labels)} != image count {len(self.images)}")
        if not np.all(np.isfinite(self.images)):
            raise DataError("dataset contains non-finite pixels")

    @property
    def count(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_be32(f, path) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise DataError(f"{path}: truncated IDX header")
    return struct.unpack(">I", raw)[0]


def load_idx(path: str) -> np.ndarray:
    """Parse one IDX file: images (count, rows, cols) scaled to [0, 1], or
    labels (count,) int64."""
    if not os.path.isfile(path):
        raise DataError(f"{path}: no such file")
    with open(path, "rb") as f:
        magic = _read_be32(f, path)
        if magic == IDX_IMAGES_MAGIC:
            count = _read_be32(f, path)
            rows = _read_be32(f, path)
            cols = _read_be32(f, path)
            total = count * rows * cols
            if total > MAX_IDX_ELEMENTS:
                raise DataError(f"{path}: dimension overflow ({count}x{rows}x{cols})")
            raw = f.read(total)
            if len(raw) != total:
                raise DataError(f"{path}: truncated image payload "
                                f"({len(raw)} of {total} bytes)")
            pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
            return pixels.astype(np.float64) / 255.0
        if magic == IDX_LABELS_MAGIC:
            count = _read_be32(f, path)
            if count > MAX_IDX_ELEMENTS:
                raise DataError(f"{path}: dimension overflow ({count})")
            raw = f.read(count)
            if len(raw) != count:
                raise DataError(f"{path}: truncated label payload")
            return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}")


def load_idx_dataset(images_path: str, labels_path: str | None = None) -> DatasetHandle:
    images = load_idx(images_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected an image file, found labels")
    labels = None
    provenance = images_path
    if labels_path:
        labels = load_idx(labels_path)
        if labels.ndim != 1:
            raise DataError(f"{labels_path}: expected a label file, found images")
        provenance = f"{images_path}+{labels_path}"
    return DatasetHandle(images=images, labels=labels, provenance=provenance)


def write_idx_images(path: str, images: np.ndarray) -> None:
    """Emit images as IDX unsigned bytes (values clipped to [0, 1])."""
    a = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(a * 255.0).astype(np.uint8)
    n, rows, cols = pixels.shape
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    os.replace(tmp, path)


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    lab = np.asarray(labels)
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise DataError("labels must fit in a byte")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(lab)))
        f.write(lab.astype(np.uint8).tobytes())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255)
# ---------------------------------------------------------------------------

def read_pgm(path: str) -> np.ndarray:
    """Binary PGM to float64 in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a P5 PGM")
    fields: list[bytes] = []
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
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    cols, rows, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    payload = data[pos:pos + rows * cols]
    if len(payload) != rows * cols:
        raise DataError(f"{path}: truncated PGM payload")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols)
    return img.astype(np.float64) / 255.0


def write_pgm(path: str, image: np.ndarray) -> None:
    """Float image in [0, 1] (or uint8) to binary PGM."""
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    rows, cols = a.shape
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode())
        f.write(a.tobytes())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Image directories
# ---------------------------------------------------------------------------

def bilinear_resize(image: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Corner-aligned bilinear resampling."""
    a = np.asarray(image, dtype=np.float64)
    rows, cols = a.shape
    if (rows, cols) == (out_rows, out_cols):
        return a.copy()
    ri = (np.linspace(0, rows - 1, out_rows) if out_rows > 1 else np.zeros(1))
    ci = (np.linspace(0, cols - 1, out_cols) if out_cols > 1 else np.zeros(1))
    r0 = np.floor(ri).astype(int)
    c0 = np.floor(ci).astype(int)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    fr = (ri - r0)[:, None]
    fc = (ci - c0)[None, :]
    top = a[np.ix_(r0, c0)] * (1 - fc) + a[np.ix_(r0, c1)] * fc
    bot = a[np.ix_(r1, c0)] * (1 - fc) + a[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def load_image_dir(path: str, target_size: tuple[int, int]) -> DatasetHandle:
    """Read every PGM/PNG in the directory (sorted), grayscale, resized."""
    if not os.path.isdir(path):
        raise DataError(f"{path}: not a directory")
    names = sorted(n for n in os.listdir(path)
                   if n.lower().endswith((".pgm", ".png")))
    if not names:
        raise DataError(f"{path}: no PGM or PNG images found")
    rows, cols = target_size
    images = np.empty((len(names), rows, cols))
    for i, name in enumerate(names):
        full = os.path.join(path, name)
        if name.lower().endswith(".pgm"):
            img = read_pgm(full)
        else:
            try:
                from PIL import Image
            except ImportError as exc:
                raise DataError("PNG support requires pillow") from exc
            try:
                with Image.open(full) as im:
                    img = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            except Exception as exc:
                raise DataError(f"{full}: unreadable image ({exc})") from exc
        images[i] = bilinear_resize(img, rows, cols)
    return DatasetHandle(images=images, provenance=path)


# ---------------------------------------------------------------------------
# Local contrast normalization
# ---------------------------------------------------------------------------

def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = window // 2
    g = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _renormalized_blur(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size weighted local mean; border windows renormalized by the
    in-bounds kernel mass."""
    rows, cols = image.shape
    half = kernel.shape[0] // 2
    padded = np.pad(image, half)
    num = np.zeros((rows, cols))
    den = np.zeros((rows, cols))
    mask = np.pad(np.ones((rows, cols)), half)
    for i in range(kernel.shape[0]):
        for j in range(kernel.shape[1]):
            num += kernel[i, j] * padded[i:i + rows, j:j + cols]
            den += kernel[i, j] * mask[i:i + rows, j:j + cols]
    return num / den


def local_contrast_normalize(image: np.ndarray, window: int = 9,
                             sigma: float = 1.6) -> np.ndarray:
    """Subtractive then divisive normalization with a Gaussian window.

    v = x - blur(x); y = v / max(c, localstd(v)) with c the image mean of
    localstd, so flat regions are not amplified.
    """
    if window % 2 == 0:
        raise DataError("window must be odd")
    a = np.asarray(image, dtype=np.float64)
    kernel = _gaussian_kernel(window, sigma)
    v = a - _renormalized_blur(a, kernel)
    local_var = _renormalized_blur(v * v, kernel)
    local_std = np.sqrt(np.maximum(local_var, 0.0))
    c = float(local_std.mean())
    if c < 1e-12:  # flat image up to rounding noise
        return np.zeros_like(v)
    return v / np.maximum(c, local_std)
