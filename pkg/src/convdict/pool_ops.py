"""Block pooling / unpooling operator algebra.

An activation plane is partitioned into contiguous nx-by-ny blocks; within a
block at most one entry is nonzero (pretraining) or exactly one (refinement).
Four operators cover every use in the model:

  pool_blocks        block sum (equals the block's unique nonzero, or 0)
  unpool_indicator   scatter pooled values back through a 0/1 indicator
  upsample_replicate block-constant replication
  zero_insert        entries kept at stride positions, zeros in between

The composition laws (replicate and zero-insert compose multiplicatively;
unpool factors as replicate-then-mask; both distribute over convolution)
are exercised by the property suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ops import DimensionError, as_plane


@dataclass(frozen=True)
class PoolShape:
    """Block dimensions in pixels."""
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"block dims must be >= 1, got {self.nx}x{self.ny}")

    @property
    def size(self) -> int:
        return self.nx * self.ny


def check_divisible(rows: int, cols: int, shape: PoolShape) -> None:
    if rows % shape.nx or cols % shape.ny:
        raise DimensionError(
            f"plane {rows}x{cols} not divisible into {shape.nx}x{shape.ny} blocks")


def pad_to_blocks(x, shape: PoolShape) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad bottom/right to the next block multiple; returns original dims."""
    a = as_plane(x)
    r, c = a.shape
    pr = (-r) % shape.nx
    pc = (-c) % shape.ny
    if pr == 0 and pc == 0:
        return a, (r, c)
    return np.pad(a, ((0, pr), (0, pc))), (r, c)


def crop_to(x, dims: tuple[int, int]) -> np.ndarray:
    return np.asarray(x)[:dims[0], :dims[1]]


def block_view(x: np.ndarray, shape: PoolShape) -> np.ndarray:
    """Reshape (R, C) -> (R/nx, nx, C/ny, ny) without copying."""
    r, c = x.shape
    return x.reshape(r // shape.nx, shape.nx, c // shape.ny, shape.ny)


def pool_blocks(x, shape: PoolShape) -> np.ndarray:
    """Sum each nx-by-ny block down to one pixel.

    With at most one nonzero per block this is exactly max-pooling of the
    block's content; all-zero blocks map to 0.
    """
    a = as_plane(x)
    check_divisible(a.shape[0], a.shape[1], shape)
    return block_view(a, shape).sum(axis=(1, 3))


def upsample_replicate(y, shape: PoolShape) -> np.ndarray:
    """Replicate each entry of y over an nx-by-ny block."""
    a = as_plane(y)
    return np.repeat(np.repeat(a, shape.nx, axis=0), shape.ny, axis=1)


def unpool_indicator(y, z, shape: PoolShape) -> np.ndarray:
    """Scatter pooled values through indicator z: replicate(y) * z."""
    a = as_plane(y)
    zz = np.asarray(z, dtype=np.float64)
    expect = (a.shape[0] * shape.nx, a.shape[1] * shape.ny)
    if zz.shape != expect:
        raise DimensionError(f"indicator shape {zz.shape} != {expect}")
    return upsample_replicate(a, shape) * zz


def zero_insert(y, shape: PoolShape) -> np.ndarray:
    """Place y's entries at stride (nx, ny) positions, zeros elsewhere.

    Output is ((rows-1)*nx+1, (cols-1)*ny+1).
    """
    a = as_plane(y)
    r, c = a.shape
    out = np.zeros(((r - 1) * shape.nx + 1, (c - 1) * shape.ny + 1))
    out[::shape.nx, ::shape.ny] = a
    return out


def indicator_from_positions(pos: np.ndarray, shape: PoolShape,
                             rows: int, cols: int) -> np.ndarray:
    """Expand per-block position codes to a 0/1 plane.

    pos is (rows/nx, cols/ny) with values in [0, nx*ny) selecting the in-block
    entry in row-major order, or -1 for an all-zero block.
    """
    p = np.asarray(pos)
    z = np.zeros((p.shape[0], shape.nx, p.shape[1], shape.ny))
    act = p >= 0
    bi, bj = np.nonzero(act)
    sel = p[bi, bj]
    z[bi, sel // shape.ny, bj, sel % shape.ny] = 1.0
    return z.reshape(rows, cols)


def positions_from_indicator(z, shape: PoolShape) -> np.ndarray:
    """Inverse of indicator_from_positions; validates the block constraint."""
    a = as_plane(z)
    check_divisible(a.shape[0], a.shape[1], shape)
    bv = block_view(a, shape)
    counts = (bv != 0).sum(axis=(1, 3))
    if counts.max(initial=0) > 1:
        raise DimensionError("indicator has a block with more than one nonzero")
    flat = bv.transpose(0, 2, 1, 3).reshape(counts.shape[0], counts.shape[1], -1)
    pos = np.argmax(flat != 0, axis=2)
    pos[counts == 0] = -1
    return pos


def check_indicator(z, shape: PoolShape, exactly_one: bool = False) -> None:
    """Raise unless every block holds <=1 (or exactly 1) nonzero 0/1 entry."""
    a = as_plane(z)
    if not np.all((a == 0) | (a == 1)):
        raise DimensionError("indicator entries must be 0 or 1")
    check_divisible(a.shape[0], a.shape[1], shape)
    counts = block_view(a, shape).sum(axis=(1, 3))
    if counts.max(initial=0) > 1:
        raise DimensionError("indicator block with more than one nonzero")
    if exactly_one and counts.min(initial=1) < 1:
        raise DimensionError("indicator block with no nonzero in exactly-one regime")
