import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convdict import pool_ops as P
from convdict import tensor_ops as T
from convdict.pool_ops import PoolShape


def sparse_blocks(rng, rows, cols, shape, fill=0.7, exactly_one=False):
    """Random plane with <=1 (or exactly 1) nonzero per block."""
    out = np.zeros((rows, cols))
    for bi in range(rows // shape.nx):
        for bj in range(cols // shape.ny):
            if exactly_one or rng.uniform() < fill:
                i = rng.integers(shape.nx)
                j = rng.integers(shape.ny)
                out[bi * shape.nx + i, bj * shape.ny + j] = rng.standard_normal()
    return out


class TestPoolBlocks:
    def test_all_zero(self):
        assert np.array_equal(P.pool_blocks(np.zeros((4, 4)), PoolShape(2, 2)), np.zeros((2, 2)))

    def test_single_nonzero_definition(self):
        x = np.zeros((4, 4))
        x[1, 0] = 3.5  # block (0,0), in-block position (1,0)
        y = P.pool_blocks(x, PoolShape(2, 2))
        want = np.zeros((2, 2))
        want[0, 0] = 3.5
        assert np.array_equal(y, want)

    def test_matches_block_max_oracle(self, rng):
        shape = PoolShape(3, 3)
        x = sparse_blocks(rng, 6, 6, shape)
        got = P.pool_blocks(x, shape)
        # <=1 nonzero per block: the sum equals the entry with max magnitude
        want = np.zeros((2, 2))
        for bi in range(2):
            for bj in range(2):
                blk = x[bi * 3:(bi + 1) * 3, bj * 3:(bj + 1) * 3]
                want[bi, bj] = blk.flat[np.argmax(np.abs(blk))]
        np.testing.assert_allclose(got, want)

    def test_nondivisible_raises(self):
        with pytest.raises(T.DimensionError):
            P.pool_blocks(np.zeros((5, 4)), PoolShape(2, 2))

    def test_pad_and_crop(self, rng):
        x = rng.standard_normal((5, 7))
        padded, orig = P.pad_to_blocks(x, PoolShape(3, 3))
        assert padded.shape == (6, 9)
        assert orig == (5, 7)
        np.testing.assert_array_equal(P.crop_to(padded, orig), x)


class TestUnpool:
    def test_zero_indicator(self):
        y = np.ones((2, 2))
        z = np.zeros((4, 4))
        assert np.array_equal(P.unpool_indicator(y, z, PoolShape(2, 2)), np.zeros((4, 4)))

    def test_definition_case(self):
        y = np.array([[5.0]])
        z = np.zeros((2, 2))
        z[1, 0] = 1.0
        got = P.unpool_indicator(y, z, PoolShape(2, 2))
        assert np.array_equal(got, np.array([[0.0, 0.0], [5.0, 0.0]]))

    def test_roundtrip_exactly_one(self, rng):
        shape = PoolShape(2, 3)
        zfull = sparse_blocks(rng, 6, 9, shape, exactly_one=True)
        z = (zfull != 0).astype(float)
        y = rng.standard_normal((3, 3))
        x = P.unpool_indicator(y, z, shape)
        np.testing.assert_allclose(P.pool_blocks(x, shape), y, atol=1e-12)

    def test_factors_through_replicate(self, rng):
        shape = PoolShape(2, 2)
        y = rng.standard_normal((3, 3))
        z = (sparse_blocks(rng, 6, 6, shape) != 0).astype(float)
        lhs = P.unpool_indicator(y, z, shape)
        rhs = P.upsample_replicate(y, shape) * z
        np.testing.assert_array_equal(lhs, rhs)

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            P.unpool_indicator(np.ones((2, 2)), np.ones((3, 3)), PoolShape(2, 2))


class TestUpsampleReplicate:
    def test_unit_shape(self, rng):
        y = rng.standard_normal((3, 4))
        assert np.array_equal(P.upsample_replicate(y, PoolShape(1, 1)), y)

    def test_definition_case(self):
        y = np.array([[1.0, 2.0]])
        got = P.upsample_replicate(y, PoolShape(2, 2))
        assert np.array_equal(got, np.array([[1, 1, 2, 2], [1, 1, 2, 2]], dtype=float))

    def test_composition(self, rng):
        y = rng.standard_normal((2, 3))
        lhs = P.upsample_replicate(P.upsample_replicate(y, PoolShape(2, 2)), PoolShape(3, 3))
        rhs = P.upsample_replicate(y, PoolShape(6, 6))
        assert np.array_equal(lhs, rhs)


class TestZeroInsert:
    def test_single_entry(self):
        y = np.array([[7.0]])
        assert np.array_equal(P.zero_insert(y, PoolShape(4, 4)), y)

    def test_definition_case(self):
        y = np.array([[1.0, 2.0], [3.0, 4.0]])
        got = P.zero_insert(y, PoolShape(2, 2))
        want = np.array([[1, 0, 2], [0, 0, 0], [3, 0, 4]], dtype=float)
        assert np.array_equal(got, want)

    def test_composition(self, rng):
        y = rng.standard_normal((3, 2))
        lhs = P.zero_insert(P.zero_insert(y, PoolShape(2, 2)), PoolShape(3, 3))
        rhs = P.zero_insert(y, PoolShape(6, 6))
        assert np.array_equal(lhs, rhs)


@given(st.integers(2, 3), st.integers(2, 3), st.integers(1, 4), st.integers(1, 4),
       st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_replicate_distributes_over_convolution(nx, ny, rd, cd, rw, cw, seed):
    """replicate(D * W) == replicate(D) * zero_insert(W), on the replicate side's grid."""
    g = np.random.default_rng(seed)
    d = g.standard_normal((rd, cd))
    w = g.standard_normal((rw, cw))
    shape = PoolShape(nx, ny)
    lhs = P.upsample_replicate(T.convolve_full(d, w), shape)
    rhs = T.convolve_full(P.upsample_replicate(d, shape), P.zero_insert(w, shape))
    scale = max(1.0, np.max(np.abs(lhs)))
    assert np.max(np.abs(lhs - rhs[:lhs.shape[0], :lhs.shape[1]])) / scale < 1e-12


@given(st.integers(2, 3), st.integers(2, 3), st.integers(1, 4), st.integers(1, 4),
       st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_zero_insert_distributes_over_convolution(nx, ny, rd, cd, rw, cw, seed):
    """zero_insert(D * W) == zero_insert(D) * zero_insert(W), exactly."""
    g = np.random.default_rng(seed)
    d = g.standard_normal((rd, cd))
    w = g.standard_normal((rw, cw))
    shape = PoolShape(nx, ny)
    lhs = P.zero_insert(T.convolve_full(d, w), shape)
    rhs = T.convolve_full(P.zero_insert(d, shape), P.zero_insert(w, shape))
    scale = max(1.0, np.max(np.abs(lhs)))
    assert np.max(np.abs(lhs - rhs)) / scale < 1e-12


class TestPositionCodecs:
    def test_roundtrip(self, rng):
        shape = PoolShape(2, 3)
        zfull = sparse_blocks(rng, 4, 9, shape)
        z = (zfull != 0).astype(float)
        pos = P.positions_from_indicator(z, shape)
        z2 = P.indicator_from_positions(pos, shape, 4, 9)
        assert np.array_equal(z, z2)

    def test_check_indicator_regimes(self):
        shape = PoolShape(2, 2)
        z = np.zeros((4, 4))
        z[0, 0] = 1.0
        P.check_indicator(z, shape)  # <=1 per block ok
        with pytest.raises(T.DimensionError):
            P.check_indicator(z, shape, exactly_one=True)
        z[1, 1] = 1.0
        with pytest.raises(T.DimensionError):
            P.check_indicator(z, shape)
