"""Dense 2-D/3-D tensor carriers and the convolution-family operators.

All planes and stacks are float64 ndarrays. Two operators carry the whole
model: full 2-D convolution (zero-padded outside the kernel support) and
valid cross-correlation. Both have a direct path and an FFT path; the FFT
path takes over once the output is large enough to pay for the transforms.

Batched variants (leading image/plane axes) are provided as plumbing for the
samplers; they share the same arithmetic as the scalar ops.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as _fft

# Output size (rows*cols) above which convolve_auto switches to the FFT path.
FFT_THRESHOLD = 1024

# Worker threads handed to pocketfft for batched transforms.
FFT_WORKERS = 2


def set_fft_workers(n: int) -> None:
    global FFT_WORKERS
    FFT_WORKERS = max(1, int(n))


class DimensionError(ValueError):
    """Shapes incompatible with the requested operator."""


def as_plane(x) -> np.ndarray:
    """Validate and return a 2-D float64 plane with finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"expected a non-empty 2-D plane, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DimensionError("plane contains non-finite entries")
    return a


def as_stack(x) -> np.ndarray:
    """Validate and return a 3-D float64 stack (depth, rows, cols)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or a.size == 0:
        raise DimensionError(f"expected a non-empty 3-D stack, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DimensionError("stack contains non-finite entries")
    return a


def convolve_full(kernel, amap) -> np.ndarray:
    """Full 2-D convolution; output (rk+rm-1, ck+cm-1).

    Entry (i,j) = sum_{p,q} kernel[i-p, j-q] * amap[p, q], kernel treated as
    zero outside its support. Bilinear and symmetric in its arguments.
    """
    k = as_plane(kernel)
    m = as_plane(amap)
    rk, ck = k.shape
    rm, cm = m.shape
    out = np.zeros((rk + rm - 1, ck + cm - 1))
    # Accumulate shifted copies of the kernel weighted by map entries,
    # iterating over the smaller operand.
    if rk * ck <= rm * cm:
        small, big, rs, cs = k, m, rk, ck
        for p in range(rs):
            for q in range(cs):
                out[p:p + rm, q:q + cm] += small[p, q] * big
    else:
        for p in range(rm):
            for q in range(cm):
                out[p:p + rk, q:q + ck] += m[p, q] * k
    return out


def convolve_full_fft(kernel, amap) -> np.ndarray:
    """FFT path of convolve_full; equal within 1e-9 absolute for |x| <= 1e3."""
    k = as_plane(kernel)
    m = as_plane(amap)
    rows = k.shape[0] + m.shape[0] - 1
    cols = k.shape[1] + m.shape[1] - 1
    fr = _fft.next_fast_len(rows)
    fc = _fft.next_fast_len(cols)
    fk = _fft.rfft2(k, s=(fr, fc))
    fm = _fft.rfft2(m, s=(fr, fc))
    return _fft.irfft2(fk * fm, s=(fr, fc))[:rows, :cols].copy()


def convolve_auto(kernel, amap, threshold: int | None = None) -> np.ndarray:
    """Dispatch between the direct and FFT paths on output size."""
    t = FFT_THRESHOLD if threshold is None else threshold
    rows = kernel.shape[0] + amap.shape[0] - 1
    cols = kernel.shape[1] + amap.shape[1] - 1
    if rows * cols >= t:
        return convolve_full_fft(kernel, amap)
    return convolve_full(kernel, amap)


def correlate_valid(big, small) -> np.ndarray:
    """Valid cross-correlation; output (rb-rs+1, cb-cs+1).

    Entry (i,j) = sum_{p,q} big[i+p, j+q] * small[p, q].
    """
    b = as_plane(big)
    s = as_plane(small)
    rb, cb = b.shape
    rs, cs = s.shape
    if rs > rb or cs > cb:
        raise DimensionError(f"small {s.shape} exceeds big {b.shape}")
    out = np.zeros((rb - rs + 1, cb - cs + 1))
    orows, ocols = out.shape
    for p in range(rs):
        for q in range(cs):
            out += s[p, q] * b[p:p + orows, q:q + ocols]
    return out


def conv3_full(stack, weights) -> np.ndarray:
    """Full convolution of each plane of a 3-D stack with one 2-D map."""
    d = as_stack(stack)
    w = as_plane(weights)
    rows = d.shape[1] + w.shape[0] - 1
    cols = d.shape[2] + w.shape[1] - 1
    out = np.empty((d.shape[0], rows, cols))
    for i in range(d.shape[0]):
        out[i] = convolve_auto(d[i], w)
    return out


def sq_norm(x) -> float:
    """Sum of squared entries."""
    a = np.asarray(x, dtype=np.float64)
    return float(np.sum(a * a))


def per_plane_sq_norm(stack) -> np.ndarray:
    """Sum of squares over the trailing two axes."""
    a = np.asarray(stack, dtype=np.float64)
    return np.sum(a * a, axis=(-2, -1))


# ---------------------------------------------------------------------------
# Batched helpers for the samplers. Leading axes are image/plane indices.
# ---------------------------------------------------------------------------

def fft_shape(rows: int, cols: int) -> tuple[int, int]:
    return _fft.next_fast_len(rows), _fft.next_fast_len(cols)


def rfft2(x, s) -> np.ndarray:
    return _fft.rfft2(x, s=s, workers=FFT_WORKERS)


def irfft2(x, s) -> np.ndarray:
    return _fft.irfft2(x, s=s, workers=FFT_WORKERS)


def _use_fft(batch_elems: int, rows: int, cols: int) -> bool:
    return rows * cols >= FFT_THRESHOLD or batch_elems * rows * cols >= 16384


def batch_convolve_full(kernel, maps) -> np.ndarray:
    """Full convolution of one kernel with a batch of maps (N, rm, cm)."""
    k = as_plane(kernel)
    m = np.asarray(maps, dtype=np.float64)
    rows = k.shape[0] + m.shape[-2] - 1
    cols = k.shape[1] + m.shape[-1] - 1
    batch = int(np.prod(m.shape[:-2], initial=1))
    if _use_fft(batch, rows, cols):
        s = fft_shape(rows, cols)
        fk = _fft.rfft2(k, s=s)
        fm = rfft2(m, s=s)
        return irfft2(fm * fk, s=s)[..., :rows, :cols].copy()
    out = np.zeros(m.shape[:-2] + (rows, cols))
    rm, cm = m.shape[-2:]
    for p in range(k.shape[0]):
        for q in range(k.shape[1]):
            out[..., p:p + rm, q:q + cm] += k[p, q] * m
    return out


def batch_correlate_valid(big, small) -> np.ndarray:
    """Valid correlation of a batch of planes (..., rb, cb) with one kernel."""
    b = np.asarray(big, dtype=np.float64)
    s = as_plane(small)
    rb, cb = b.shape[-2:]
    rs, cs = s.shape
    orows, ocols = rb - rs + 1, cb - cs + 1
    if orows <= 0 or ocols <= 0:
        raise DimensionError(f"kernel {s.shape} exceeds planes {(rb, cb)}")
    batch = int(np.prod(b.shape[:-2], initial=1))
    if _use_fft(batch, rb, cb):
        fs = fft_shape(rb, cb)
        fb = rfft2(b, s=fs)
        fk = _fft.rfft2(s, s=fs)
        return irfft2(fb * np.conj(fk), s=fs)[..., :orows, :ocols].copy()
    out = np.zeros(b.shape[:-2] + (orows, ocols))
    for p in range(rs):
        for q in range(cs):
            out += s[p, q] * b[..., p:p + orows, q:q + ocols]
    return out
