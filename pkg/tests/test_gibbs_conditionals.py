"""Single-site conditional correctness on tiny fixed models.

Every sampler is checked against an independent brute-force oracle: the full
joint density evaluated by nested loops at each candidate outcome (discrete
draws), or closed-form Gaussian/gamma moments (continuous draws).
"""

import math

import numpy as np
import pytest

from convdict import gibbs as G
from convdict import model as M
from convdict.engine import LayerChain
from convdict.model import Hyperparams, LayerState
from convdict.pool_ops import PoolShape

HYPER = Hyperparams(a0=0.3, b0=0.7, a_w=2.0, b_w=3.0, a_d=1.5, b_d=2.5,
                    a_e=2.5, b_e=1.5)


# ---------------------------------------------------------------------------
# Brute-force joint (independent oracle; nested loops only)
# ---------------------------------------------------------------------------

def loop_conv_full(kernel, amap):
    rk, ck = kernel.shape
    rm, cm = amap.shape
    out = np.zeros((rk + rm - 1, ck + cm - 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for p in range(rm):
                for q in range(cm):
                    ki, kj = i - p, j - q
                    if 0 <= ki < rk and 0 <= kj < ck:
                        out[i, j] += kernel[ki, kj] * amap[p, q]
    return out


def s_from_state(st, pool):
    n, k, wr, wc = st.weights.shape
    s = np.zeros((n, k, wr, wc))
    if st.regime == M.REGIME_BERNOULLI:
        return st.weights * st.z_mask
    for ni in range(n):
        for ki in range(k):
            for bi in range(st.z_pos.shape[2]):
                for bj in range(st.z_pos.shape[3]):
                    p = st.z_pos[ni, ki, bi, bj]
                    if p >= 0:
                        r = bi * pool.nx + p // pool.ny
                        c = bj * pool.ny + p % pool.ny
                        s[ni, ki, r, c] = st.weights[ni, ki, r, c]
    return s


def ln_norm(v, gamma):
    return 0.5 * math.log(gamma / (2 * math.pi)) - 0.5 * gamma * v * v


def ln_gamma_pdf(g, a, b):
    return a * math.log(b) - math.lgamma(a) + (a - 1) * math.log(g) - b * g


def brute_joint(x, st, hyper, pool):
    """Full layered joint by nested loops (one layer)."""
    n, k = st.weights.shape[:2]
    depth = st.dictionary.shape[1]
    s = s_from_state(st, pool)
    total = 0.0
    for ni in range(n):
        for d in range(depth):
            recon = np.zeros((x.shape[2], x.shape[3]))
            for ki in range(k):
                recon += loop_conv_full(st.dictionary[ki, d], s[ni, ki])
            g_e = st.gamma_e[ni, d]
            for i in range(x.shape[2]):
                for j in range(x.shape[3]):
                    total += ln_norm(x[ni, d, i, j] - recon[i, j], g_e)
            total += ln_gamma_pdf(g_e, hyper.a_e, hyper.b_e)
    for ki in range(k):
        for d in range(depth):
            g_d = st.gamma_d[ki, d]
            for v in st.dictionary[ki, d].ravel():
                total += ln_norm(v, g_d)
            total += ln_gamma_pdf(g_d, hyper.a_d, hyper.b_d)
    for ni in range(n):
        for ki in range(k):
            for (w, gw) in zip(st.weights[ni, ki].ravel(), st.gamma_w[ni, ki].ravel()):
                total += ln_norm(w, gw) + ln_gamma_pdf(gw, hyper.a_w, hyper.b_w)
    if st.regime == M.REGIME_BERNOULLI:
        a0, b0 = hyper.beta_prior(k) if k > 1 else (hyper.a0, hyper.b0)
        for ni in range(n):
            for ki in range(k):
                for (z, pi) in zip(st.z_mask[ni, ki].ravel(), st.pi[ni, ki].ravel()):
                    total += z * math.log(pi) + (1 - z) * math.log(1 - pi)
                    total += (a0 - 1) * math.log(pi) + (b0 - 1) * math.log(1 - pi) \
                        + math.lgamma(a0 + b0) - math.lgamma(a0) - math.lgamma(b0)
    else:
        m_pos = pool.size
        with_empty = st.pool_regime == M.POOL_AT_MOST_ONE
        m = m_pos + 1 if with_empty else m_pos
        alpha0 = 1.0 / m
        for ni in range(n):
            for ki in range(k):
                theta = st.theta[ni, ki]
                for bi in range(st.z_pos.shape[2]):
                    for bj in range(st.z_pos.shape[3]):
                        p = st.z_pos[ni, ki, bi, bj]
                        total += math.log(theta[p] if p >= 0 else theta[m - 1])
                total += math.lgamma(m * alpha0) - m * math.lgamma(alpha0)
                total += (alpha0 - 1) * sum(math.log(t) for t in theta)
    return total


# ---------------------------------------------------------------------------
# Tiny fixed models
# ---------------------------------------------------------------------------

def tiny_multinomial_chain(seed=7, exactly_one=False):
    """One 6x6 image, K=1, 3x3 dictionary, 2x2 pooling."""
    rng = np.random.default_rng(seed)
    pool = PoolShape(2, 2)
    m = 4 if exactly_one else 5
    theta = rng.uniform(0.2, 1.0, (1, 1, m))
    theta /= theta.sum(axis=-1, keepdims=True)
    st = LayerState(
        regime=M.REGIME_MULTINOMIAL,
        dictionary=rng.standard_normal((1, 1, 3, 3)),
        weights=rng.standard_normal((1, 1, 4, 4)),
        gamma_w=rng.uniform(0.5, 2.0, (1, 1, 4, 4)),
        gamma_d=rng.uniform(0.5, 2.0, (1, 1)),
        gamma_e=np.array([[1.7]]),
        z_pos=rng.integers(0 if exactly_one else -1, 4, (1, 1, 2, 2)).astype(np.int16),
        theta=theta,
        pool_regime=M.POOL_EXACTLY_ONE if exactly_one else M.POOL_AT_MOST_ONE,
    )
    x = rng.standard_normal((1, 1, 6, 6)) * 0.5
    # embed some signal so the conditional is not flat
    x += M.reconstruct_input(st) * 0.8
    return LayerChain(x, st, HYPER), x, pool


def tiny_bernoulli_chain(seed=11):
    """One 4x4 image, K=1, 3x3 dictionary, top-layer Bernoulli."""
    rng = np.random.default_rng(seed)
    st = LayerState(
        regime=M.REGIME_BERNOULLI,
        dictionary=rng.standard_normal((1, 1, 3, 3)),
        weights=rng.standard_normal((1, 1, 2, 2)),
        gamma_w=rng.uniform(0.5, 2.0, (1, 1, 2, 2)),
        gamma_d=rng.uniform(0.5, 2.0, (1, 1)),
        gamma_e=np.array([[2.1]]),
        z_mask=rng.integers(0, 2, (1, 1, 2, 2)).astype(np.uint8),
        pi=rng.uniform(0.2, 0.8, (1, 1, 2, 2)),
    )
    x = rng.standard_normal((1, 1, 4, 4)) * 0.4
    x += M.reconstruct_input(st) * 0.9
    return LayerChain(x, st, HYPER), x


def enumerate_block_conditional(x, st, hyper, pool, bi, bj):
    """Exact conditional over block outcomes by evaluating the full joint."""
    m = pool.size
    outcomes = list(range(m)) + ([-1] if st.pool_regime == M.POOL_AT_MOST_ONE else [])
    logs = []
    for o in outcomes:
        st2 = st.copy()
        st2.z_pos[0, 0, bi, bj] = o
        logs.append(brute_joint(x, st2, hyper, pool))
    logs = np.array(logs)
    p = np.exp(logs - logs.max())
    return p / p.sum()


def enumerate_element_conditional(x, st, hyper, er, ec):
    logs = []
    for z in (0, 1):
        st2 = st.copy()
        st2.z_mask[0, 0, er, ec] = z
        logs.append(brute_joint(x, st2, hyper, PoolShape(1, 1)))
    logs = np.array(logs)
    p = np.exp(logs - logs.max())
    return p / p.sum()  # [P(z=0), P(z=1)]


# ---------------------------------------------------------------------------
# Block indicator conditional
# ---------------------------------------------------------------------------

class TestBlockIndicatorConditional:
    @pytest.mark.parametrize("block", [(0, 0), (0, 1), (1, 1)])
    def test_probs_match_enumeration(self, block):
        chain, x, pool = tiny_multinomial_chain()
        bi, bj = block
        want = enumerate_block_conditional(x, chain.state, HYPER, pool, bi, bj)
        got = chain.block_probs(0, bi, bj)[0]
        # sampler orders outcomes positions-then-empty, like the oracle
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_empirical_tv_small(self):
        chain, x, pool = tiny_multinomial_chain()
        bi, bj = 0, 1
        want = enumerate_block_conditional(x, chain.state, HYPER, pool, bi, bj)
        zp0 = chain.state.z_pos[0, 0, bi, bj]
        rng = np.random.default_rng(99)
        counts = np.zeros(5)
        n_draws = 4000
        for _ in range(n_draws):
            chain.sample_block(0, bi, bj, rng)
            out = chain.state.z_pos[0, 0, bi, bj]
            counts[out if out >= 0 else 4] += 1
            chain.set_block(0, bi, bj, np.array([zp0], dtype=np.int16))
        tv = 0.5 * np.abs(counts / n_draws - want).sum()
        assert tv < 0.03
        assert chain.residual_drift() < 1e-8

    def test_exactly_one_regime_has_no_empty(self):
        chain, x, pool = tiny_multinomial_chain(exactly_one=True)
        probs = chain.block_probs(0, 0, 0)
        assert probs.shape == (1, 4)
        rng = np.random.default_rng(3)
        chain.sample_block(0, 0, 0, rng)
        assert chain.state.z_pos[0, 0, 0, 0] >= 0

    def test_symmetry_when_flat(self):
        """Uniform position probabilities and all-equal energies: outcomes
        equiprobable."""
        chain, x, pool = tiny_multinomial_chain()
        chain.state.weights[:] = 0.0  # energies vanish
        chain.state.theta[:] = 1.0 / 5.0
        chain.resync()
        probs = chain.block_probs(0, 1, 0)[0]
        np.testing.assert_allclose(probs, 0.2, atol=1e-12)

    def test_huge_energy_prefers_empty(self):
        chain, x, pool = tiny_multinomial_chain()
        chain.state.weights[:] = 50.0  # any activation devastates the fit
        chain.resync()
        probs = chain.block_probs(0, 0, 0)[0]
        assert probs[-1] > 0.999


def tiny_deep_chain(seed=23):
    """Two images, depth-2 input (like a second layer), K=2 atoms."""
    rng = np.random.default_rng(seed)
    pool = PoolShape(2, 2)
    theta = rng.uniform(0.2, 1.0, (2, 2, 5))
    theta /= theta.sum(axis=-1, keepdims=True)
    st = LayerState(
        regime=M.REGIME_MULTINOMIAL,
        dictionary=rng.standard_normal((2, 2, 2, 2)),
        weights=rng.standard_normal((2, 2, 4, 4)),
        gamma_w=rng.uniform(0.5, 2.0, (2, 2, 4, 4)),
        gamma_d=rng.uniform(0.5, 2.0, (2, 2)),
        gamma_e=rng.uniform(0.8, 2.5, (2, 2)),
        z_pos=rng.integers(-1, 4, (2, 2, 2, 2)).astype(np.int16),
        theta=theta,
    )
    x = rng.standard_normal((2, 2, 5, 5)) * 0.5
    x += M.reconstruct_input(st) * 0.8
    return LayerChain(x, st, HYPER), x, pool


class TestDepthTwoConditional:
    def test_block_probs_match_enumeration_per_image(self):
        chain, x, pool = tiny_deep_chain()
        got = chain.block_probs(1, 1, 0)
        for ni in range(2):
            logs = []
            for o in [0, 1, 2, 3, -1]:
                st2 = chain.state.copy()
                st2.z_pos[ni, 1, 1, 0] = o
                logs.append(brute_joint(x[ni:ni + 1], _slice_state(st2, ni),
                                        HYPER, pool))
            logs = np.array(logs)
            want = np.exp(logs - logs.max())
            want /= want.sum()
            np.testing.assert_allclose(got[ni], want, atol=1e-10)


def _slice_state(st, ni):
    out = st.copy()
    out.weights = st.weights[ni:ni + 1]
    out.gamma_w = st.gamma_w[ni:ni + 1]
    out.gamma_e = st.gamma_e[ni:ni + 1]
    out.z_pos = st.z_pos[ni:ni + 1]
    out.theta = st.theta[ni:ni + 1]
    return out


class TestBernoulliConditional:
    @pytest.mark.parametrize("elem", [(0, 0), (1, 0), (1, 1)])
    def test_probs_match_enumeration(self, elem):
        chain, x = tiny_bernoulli_chain()
        er, ec = elem
        want = enumerate_element_conditional(x, chain.state, HYPER, er, ec)
        got_on = chain.element_on_probability(0, er, ec)[0]
        np.testing.assert_allclose([1 - got_on, got_on], want, atol=1e-10)

    def test_empirical_tv_small(self):
        chain, x = tiny_bernoulli_chain()
        er, ec = 0, 1
        want = enumerate_element_conditional(x, chain.state, HYPER, er, ec)
        z0 = chain.state.z_mask[0, 0, er, ec]
        rng = np.random.default_rng(5)
        n_draws = 4000
        ones = 0
        for _ in range(n_draws):
            chain.sample_element(0, er, ec, rng)
            ones += int(chain.state.z_mask[0, 0, er, ec])
            chain.set_element(0, er, ec, np.array([z0], dtype=np.uint8))
        tv = abs(ones / n_draws - want[1])
        assert tv < 0.03

    def test_fair_coin_at_neutral_state(self):
        chain, x = tiny_bernoulli_chain()
        chain.state.weights[:] = 0.0
        chain.state.pi[:] = 0.5
        chain.resync()
        p = chain.element_on_probability(0, 0, 0)[0]
        assert p == pytest.approx(0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# Gaussian conditionals (weights, dictionary)
# ---------------------------------------------------------------------------

def weight_posterior_oracle(x, st, pool, er, ec):
    """Scalar Bayesian regression for the active weight at (er, ec):
    residual excluding the element, against the placed dictionary copy."""
    st2 = st.copy()
    st2.weights[0, 0, er, ec] = 0.0
    s = s_from_state(st2, pool)
    resid = x[0, 0] - loop_conv_full(st.dictionary[0, 0], s[0, 0])
    g_e = st.gamma_e[0, 0]
    d = st.dictionary[0, 0]
    b = 0.0
    for p in range(3):
        for q in range(3):
            b += resid[er + p, ec + q] * d[p, q]
    prec = g_e * np.sum(d * d) + st.gamma_w[0, 0, er, ec]
    return g_e * b / prec, 1.0 / prec


class TestWeightConditional:
    def test_prior_when_inactive(self):
        chain, x, pool = tiny_multinomial_chain()
        chain.state.z_pos[:] = -1
        chain.state.gamma_w[:] = 1.7
        chain.resync()
        rng = np.random.default_rng(21)
        draws = []
        for _ in range(1500):
            chain.sample_weights(0, rng)
            draws.append(chain.state.weights[0, 0].copy())
        draws = np.array(draws).ravel()
        se_mean = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean()) < 3 * se_mean
        var = draws.var()
        se_var = var * math.sqrt(2.0 / (draws.size - 1))
        assert abs(var - 1 / 1.7) < 3 * se_var

    def test_active_posterior_matches_regression_oracle(self):
        chain, x, pool = tiny_multinomial_chain(exactly_one=False)
        # exactly one active block so the scalar oracle applies cleanly
        chain.state.z_pos[:] = -1
        chain.state.z_pos[0, 0, 0, 0] = 3  # position (1,1) -> element (1,1)
        chain.resync()
        er, ec = 1, 1
        mu_want, var_want = weight_posterior_oracle(x, chain.state, pool, er, ec)
        rng = np.random.default_rng(31)
        draws = np.empty(6000)
        w_keep = chain.state.weights.copy()
        for t in range(draws.size):
            chain.sample_weights(0, rng)
            draws[t] = chain.state.weights[0, 0, er, ec]
            # restore exact conditioning state
            chain.set_block(0, 0, 0, np.array([-1], dtype=np.int16))
            chain.state.weights[:] = w_keep
            chain.set_block(0, 0, 0, np.array([3], dtype=np.int16))
        se = math.sqrt(var_want / draws.size)
        assert abs(draws.mean() - mu_want) < 3 * se
        se_var = var_want * math.sqrt(2.0 / (draws.size - 1))
        assert abs(draws.var() - var_want) < 3 * se_var

    def test_least_squares_limit(self):
        chain, x, pool = tiny_multinomial_chain()
        chain.state.z_pos[:] = -1
        chain.state.z_pos[0, 0, 1, 1] = 0  # element (2,2)
        chain.state.gamma_e[:] = 1e9
        chain.resync()
        mu_want, var_want = weight_posterior_oracle(x, chain.state, pool, 2, 2)
        d = chain.state.dictionary[0, 0]
        st2 = chain.state.copy()
        st2.weights[0, 0, 2, 2] = 0.0
        resid = x[0, 0] - loop_conv_full(d, s_from_state(st2, pool)[0, 0])
        ls = np.sum(resid[2:5, 2:5] * d) / np.sum(d * d)
        assert mu_want == pytest.approx(ls, rel=1e-6)
        rng = np.random.default_rng(41)
        chain.sample_weights(0, rng)
        assert chain.state.weights[0, 0, 2, 2] == pytest.approx(ls, abs=1e-3)


class TestDictionaryConditional:
    def test_prior_when_weights_zero(self):
        chain, x, pool = tiny_multinomial_chain()
        chain.state.z_pos[:] = -1
        chain.state.weights[:] = 0.0
        chain.state.gamma_d[:] = 2.2
        chain.resync()
        rng = np.random.default_rng(17)
        draws = []
        for _ in range(1500):
            chain.sample_dictionary(rng)
            draws.append(chain.state.dictionary[0, 0].copy())
        draws = np.array(draws).ravel()
        var = draws.var()
        se_var = var * math.sqrt(2.0 / (draws.size - 1))
        assert abs(draws.mean()) < 3 * draws.std() / math.sqrt(draws.size)
        assert abs(var - 1 / 2.2) < 3 * se_var

    def test_unit_spike_matches_scalar_regression(self):
        chain, x, pool = tiny_multinomial_chain()
        chain.state.z_pos[:] = -1
        chain.state.weights[:] = 0.0
        chain.state.z_pos[0, 0, 0, 1] = 1  # block (0,1) position (0,1) -> element (0,3)
        chain.state.weights[0, 0, 0, 3] = 1.0
        chain.resync()
        g_e = chain.state.gamma_e[0, 0]
        g_d = chain.state.gamma_d[0, 0]
        var_want = 1.0 / (g_e * 1.0 + g_d)
        patch = x[0, 0, 0:3, 3:6]  # image under the unit spike at (0, 3)
        mu_want = g_e * patch * var_want
        d0 = chain.state.dictionary.copy()
        rng = np.random.default_rng(19)
        n = 6000
        acc = np.zeros((3, 3))
        acc2 = np.zeros((3, 3))
        for _ in range(n):
            chain.sample_dictionary(rng)
            acc += chain.state.dictionary[0, 0]
            acc2 += chain.state.dictionary[0, 0] ** 2
            chain.state.dictionary[:] = d0
            chain.resync()
        mean = acc / n
        se = math.sqrt(var_want / n)
        assert np.max(np.abs(mean - mu_want)) < 4 * se
        var = acc2 / n - mean ** 2
        se_var = var_want * math.sqrt(2.0 / (n - 1))
        assert np.max(np.abs(var - var_want)) < 4 * se_var

    def test_variance_monotone_in_activation_energy(self):
        g_e, g_d = 1.3, 0.9
        small = 1.0 / (g_e * 1.0 + g_d)
        big = 1.0 / (g_e * 25.0 + g_d)
        assert big < small


# ---------------------------------------------------------------------------
# Dirichlet and gamma conditionals
# ---------------------------------------------------------------------------

class TestThetaConditional:
    def test_symmetric_when_unused(self):
        chain, x, pool = tiny_multinomial_chain()
        chain.state.z_pos[:] = -1
        rng = np.random.default_rng(51)
        # every block empty: counts hit only the empty slot
        acc = np.zeros(5)
        n = 4000
        for _ in range(n):
            chain.sample_position_probs(rng)
            acc += chain.state.theta[0, 0]
        mean = acc / n
        alpha = np.array([0.2, 0.2, 0.2, 0.2, 0.2 + 4.0])
        want = alpha / alpha.sum()
        assert np.max(np.abs(mean - want)) < 0.02

    def test_concentration_follows_counts(self):
        chain, x, pool = tiny_multinomial_chain()
        chain.state.z_pos[:] = 1  # every block picks position 1
        rng = np.random.default_rng(52)
        acc = np.zeros(5)
        n = 4000
        for _ in range(n):
            chain.sample_position_probs(rng)
            acc += chain.state.theta[0, 0]
        alpha = np.array([0.2, 4.2, 0.2, 0.2, 0.2])
        want = alpha / alpha.sum()
        assert np.max(np.abs(acc / n - want)) < 0.02

    def test_refinement_regime_dimension(self):
        chain, x, pool = tiny_multinomial_chain(exactly_one=True)
        rng = np.random.default_rng(53)
        chain.sample_position_probs(rng)
        assert chain.state.theta.shape[-1] == 4
        np.testing.assert_allclose(chain.state.theta.sum(-1), 1.0, atol=1e-12)


class TestPrecisionConditionals:
    def test_gamma_w_at_zero_weight(self):
        chain, x, pool = tiny_multinomial_chain()
        chain.state.weights[:] = 0.0
        chain.resync()
        rng = np.random.default_rng(61)
        draws = []
        for _ in range(3000):
            chain.sample_precisions(rng)
            draws.append(chain.state.gamma_w[0, 0, 0, 0])
        draws = np.array(draws)
        want_mean = (HYPER.a_w + 0.5) / HYPER.b_w
        se = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - want_mean) < 3 * se

    def test_gamma_d_slice_moments(self):
        chain, x, pool = tiny_multinomial_chain()
        d_sq = float(np.sum(chain.state.dictionary[0, 0] ** 2))
        a = HYPER.a_d + 0.5 * 9
        b = HYPER.b_d + 0.5 * d_sq
        rng = np.random.default_rng(62)
        draws = []
        d0 = chain.state.dictionary.copy()
        for _ in range(3000):
            chain.sample_precisions(rng)
            draws.append(chain.state.gamma_d[0, 0])
            chain.state.dictionary[:] = d0
        draws = np.array(draws)
        se = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - a / b) < 3 * se

    def test_gamma_e_explodes_at_zero_residual(self):
        chain, x, pool = tiny_multinomial_chain()
        # make the data equal the reconstruction
        recon = M.reconstruct_input(chain.state)
        chain.input_changed(recon)
        rng = np.random.default_rng(63)
        chain.sample_precisions(rng)
        want_mean = (HYPER.a_e + 0.5 * 36) / HYPER.b_e
        assert chain.state.gamma_e[0, 0] > 0.01 * want_mean


# ---------------------------------------------------------------------------
# Sweep-level invariants
# ---------------------------------------------------------------------------

class TestSweepInvariants:
    def test_shapes_and_constraints_preserved(self):
        chain, x, pool = tiny_multinomial_chain()
        from convdict.rng import StreamFactory
        factory = StreamFactory(12, 1, 0)
        streams = lambda s, op, atom: factory.stream(op, s, atom)  # noqa: E731
        for sweep in range(1, 8):
            chain.sweep(streams, sweep)
            st = chain.state
            assert st.weights.shape == (1, 1, 4, 4)
            assert st.z_pos.min() >= -1 and st.z_pos.max() < 4
            np.testing.assert_allclose(st.theta.sum(-1), 1.0, atol=1e-12)
            assert np.all(st.gamma_w > 0) and np.all(st.gamma_d > 0) \
                and np.all(st.gamma_e > 0)
        assert chain.residual_drift() < 1e-8

    def test_residual_identity_bernoulli(self):
        chain, x = tiny_bernoulli_chain()
        from convdict.rng import StreamFactory
        factory = StreamFactory(13, 1, 0)
        streams = lambda s, op, atom: factory.stream(op, s, atom)  # noqa: E731
        for sweep in range(1, 8):
            chain.sweep(streams, sweep)
        assert chain.residual_drift() < 1e-8

    def test_determinism_same_seed(self):
        from convdict.rng import StreamFactory
        results = []
        for _ in range(2):
            chain, x, pool = tiny_multinomial_chain()
            factory = StreamFactory(37, 1, 0)
            streams = lambda s, op, atom: factory.stream(op, s, atom)  # noqa: E731
            for sweep in range(1, 6):
                chain.sweep(streams, sweep)
            results.append((chain.state.weights.copy(), chain.state.z_pos.copy(),
                            chain.state.dictionary.copy(), chain.state.theta.copy()))
        for a, b in zip(results[0], results[1]):
            assert np.array_equal(a, b)
