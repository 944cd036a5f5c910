import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convdict import tensor_ops as T


def conv_full_loops(kernel, amap):
    """Brute-force nested-loop full convolution (independent oracle)."""
    rk, ck = kernel.shape
    rm, cm = amap.shape
    out = np.zeros((rk + rm - 1, ck + cm - 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            acc = 0.0
            for p in range(rm):
                for q in range(cm):
                    ki, kj = i - p, j - q
                    if 0 <= ki < rk and 0 <= kj < ck:
                        acc += kernel[ki, kj] * amap[p, q]
            out[i, j] = acc
    return out


def corr_valid_loops(big, small):
    """Brute-force nested-loop valid correlation (independent oracle)."""
    rb, cb = big.shape
    rs, cs = small.shape
    out = np.zeros((rb - rs + 1, cb - cs + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            acc = 0.0
            for p in range(rs):
                for q in range(cs):
                    acc += big[i + p, j + q] * small[p, q]
            out[i, j] = acc
    return out


class TestConvolveFull:
    def test_identity_kernel(self, rng):
        m = rng.standard_normal((5, 7))
        assert np.array_equal(T.convolve_full(np.ones((1, 1)), m), m)

    def test_output_shape_28(self, rng):
        k = rng.standard_normal((8, 8))
        m = rng.standard_normal((21, 21))
        assert T.convolve_full(k, m).shape == (28, 28)

    def test_matches_loop_oracle(self, rng):
        k = rng.standard_normal((3, 3))
        m = rng.standard_normal((4, 4))
        got = T.convolve_full(k, m)
        np.testing.assert_allclose(got, conv_full_loops(k, m), atol=1e-12)

    def test_commutes(self, rng):
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((6, 2))
        np.testing.assert_allclose(T.convolve_full(a, b), T.convolve_full(b, a), atol=1e-12)

    def test_bilinear(self, rng):
        a, b, c = (rng.standard_normal((3, 3)) for _ in range(3))
        lhs = T.convolve_full(a, 2.0 * b + c)
        rhs = 2.0 * T.convolve_full(a, b) + T.convolve_full(a, c)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestCorrelateValid:
    def test_same_shape_degenerate(self, rng):
        a = rng.standard_normal((4, 4))
        out = T.correlate_valid(a, a)
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(np.sum(a * a))

    def test_shape_algebra_roundtrip(self, rng):
        d = rng.standard_normal((3, 4))
        s = rng.standard_normal((5, 6))
        big = T.convolve_full(d, s)
        assert T.correlate_valid(big, d).shape == s.shape

    def test_matches_loop_oracle(self, rng):
        b = rng.standard_normal((6, 6))
        s = rng.standard_normal((3, 3))
        np.testing.assert_allclose(T.correlate_valid(b, s), corr_valid_loops(b, s), atol=1e-12)

    def test_small_exceeds_big(self, rng):
        with pytest.raises(T.DimensionError):
            T.correlate_valid(rng.standard_normal((2, 2)), rng.standard_normal((3, 3)))


class TestConvolveFullFFT:
    def test_identity_kernel(self, rng):
        m = rng.standard_normal((6, 6))
        np.testing.assert_allclose(T.convolve_full_fft(np.ones((1, 1)), m), m, atol=1e-12)

    def test_matches_direct(self, rng):
        k = rng.standard_normal((16, 16))
        m = rng.standard_normal((49, 49))
        got = T.convolve_full_fft(k, m)
        want = T.convolve_full(k, m)
        assert np.max(np.abs(got - want)) < 1e-9

    def test_matches_direct_image_scale(self, rng):
        # image-like map in [0, 1], kernel at dictionary scale
        k = 3.0 * rng.standard_normal((8, 8))
        m = rng.uniform(0, 1, (21, 21))
        got = T.convolve_full_fft(k, m)
        want = T.convolve_full(k, m)
        assert np.max(np.abs(got - want)) < 1e-9

    def test_zero_kernel(self, rng):
        out = T.convolve_full_fft(np.zeros((3, 3)), rng.standard_normal((5, 5)))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_auto_dispatch_agrees(self, rng):
        k = rng.standard_normal((4, 4))
        m = rng.standard_normal((9, 9))
        np.testing.assert_allclose(T.convolve_auto(k, m, threshold=1),
                                   T.convolve_auto(k, m, threshold=10**9), atol=1e-10)


class TestConv3Full:
    def test_depth_one_matches_2d(self, rng):
        d = rng.standard_normal((1, 3, 3))
        w = rng.standard_normal((4, 4))
        np.testing.assert_allclose(T.conv3_full(d, w)[0], T.convolve_full(d[0], w), atol=1e-12)

    def test_paper_config_shapes(self, rng):
        d = rng.standard_normal((32, 6, 6))
        w = rng.standard_normal((2, 2))
        assert T.conv3_full(d, w).shape == (32, 7, 7)

    def test_per_plane_oracle(self, rng):
        d = rng.standard_normal((3, 2, 3))
        w = rng.standard_normal((3, 2))
        got = T.conv3_full(d, w)
        for i in range(3):
            np.testing.assert_allclose(got[i], conv_full_loops(d[i], w), atol=1e-12)


class TestBatchedHelpers:
    def test_batch_convolve_matches_scalar(self, rng):
        k = rng.standard_normal((3, 3))
        maps = rng.standard_normal((4, 5, 5))
        got = T.batch_convolve_full(k, maps)
        for i in range(4):
            np.testing.assert_allclose(got[i], T.convolve_full(k, maps[i]), atol=1e-10)

    def test_batch_convolve_fft_branch(self, rng):
        k = rng.standard_normal((8, 8))
        maps = rng.standard_normal((3, 30, 30))
        got = T.batch_convolve_full(k, maps)
        for i in range(3):
            np.testing.assert_allclose(got[i], T.convolve_full(k, maps[i]), atol=1e-9)

    def test_batch_correlate_matches_scalar(self, rng):
        k = rng.standard_normal((3, 3))
        planes = rng.standard_normal((4, 6, 7))
        got = T.batch_correlate_valid(planes, k)
        for i in range(4):
            np.testing.assert_allclose(got[i], T.correlate_valid(planes[i], k), atol=1e-10)

    def test_batch_correlate_fft_branch(self, rng):
        k = rng.standard_normal((8, 8))
        planes = rng.standard_normal((3, 40, 33))
        got = T.batch_correlate_valid(planes, k)
        for i in range(3):
            np.testing.assert_allclose(got[i], T.correlate_valid(planes[i], k), atol=1e-9)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5),
       st.integers(0, 2**31 - 1))
def test_conv_shapes_property(rk, ck, rm, cm, seed):
    g = np.random.default_rng(seed)
    k = g.standard_normal((rk, ck))
    m = g.standard_normal((rm, cm))
    out = T.convolve_full(k, m)
    assert out.shape == (rk + rm - 1, ck + cm - 1)
    back = T.correlate_valid(out, k)
    assert back.shape == m.shape


def test_validators_reject_nonfinite():
    with pytest.raises(T.DimensionError):
        T.as_plane(np.array([[1.0, np.nan]]))
    with pytest.raises(T.DimensionError):
        T.as_stack(np.full((1, 2, 2), np.inf))
