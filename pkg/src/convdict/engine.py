"""Image-batched Gibbs machinery for one layer.

A LayerChain owns one layer's latent state plus its input planes and keeps
the residual (input minus reconstruction) consistent through every draw.
Blocks and elements are updated sequentially with the residual excluding
exactly the site being updated, so each draw is the exact full conditional;
the chain is vectorized across images, which are conditionally independent
given the dictionary.

Residual bookkeeping is pluggable:

  DirectBackend  real-space residual, per-atom correlations by windowed
                 contraction; any depth, best for small planes.
  FftBackend     frequency-domain residual with cached atom/activation
                 transforms; depth-1 layers with large planes.
  XcorrBackend   fixed dictionary only: keeps correlations for every atom
                 up to date through cross-correlation tables, so sweeps cost
                 O(changes) instead of O(recompute).
"""

from __future__ import annotations

import numpy as np

from .model import LayerState, POOL_AT_MOST_ONE, REGIME_BERNOULLI, REGIME_MULTINOMIAL, \
    indicators_from_zpos
from .tensor_ops import FFT_WORKERS, batch_convolve_full, batch_correlate_valid, \
    convolve_full, fft_shape
import scipy.fft as _fft
from scipy.special import expit

FFT_PLANE_THRESHOLD = 400  # input-plane pixels at which depth-1 layers go frequency-domain


def _flip2(d: np.ndarray) -> np.ndarray:
    return d[..., ::-1, ::-1]


def xcorr_table(d_a: np.ndarray, d_b: np.ndarray,
                half_r: int | None = None, half_c: int | None = None) -> np.ndarray:
    """Depth-summed cross-correlation of two atoms.

    table[half_r+u, half_c+v] = sum_{d,a,b} d_a[d, a+u, b+v] * d_b[d, a, b]
    for lags |u| <= half_r, |v| <= half_c (default: the full dictionary span).
    """
    dr, dc = d_a.shape[1:]
    acc = None
    for d in range(d_a.shape[0]):
        t = convolve_full(d_a[d], _flip2(d_b[d]))
        acc = t if acc is None else acc + t
    if half_r is None:
        return acc
    # crop around the center (dr-1, dc-1); lags beyond the span are zero
    out = np.zeros((2 * half_r + 1, 2 * half_c + 1))
    u0, u1 = max(-half_r, -(dr - 1)), min(half_r, dr - 1)
    v0, v1 = max(-half_c, -(dc - 1)), min(half_c, dc - 1)
    out[half_r + u0:half_r + u1 + 1, half_c + v0:half_c + v1 + 1] = \
        acc[dr - 1 + u0:dr - 1 + u1 + 1, dc - 1 + v0:dc - 1 + v1 + 1]
    return out


def _win(p_r: int, p_c: int, wr: int, wc: int, half_r: int, half_c: int):
    """Grid window around (p_r, p_c) reachable within half_r/half_c lags,
    plus the matching slice of a lag table centered at (half_r, half_c)."""
    r0, r1 = max(0, p_r - half_r), min(wr - 1, p_r + half_r)
    c0, c1 = max(0, p_c - half_c), min(wc - 1, p_c + half_c)
    tr0 = r0 - p_r + half_r
    tc0 = c0 - p_c + half_c
    grid = (slice(r0, r1 + 1), slice(c0, c1 + 1))
    tab = (slice(tr0, tr0 + r1 - r0 + 1), slice(tc0, tc0 + c1 - c0 + 1))
    return grid, tab


def _lag_halves(state: LayerState) -> tuple[int, int]:
    """Lag span that matters on the activation grid."""
    dr, dc = state.dictionary.shape[2:]
    wr, wc = state.weights.shape[2:]
    return min(dr - 1, wr - 1), min(dc - 1, wc - 1)


class DirectBackend:
    """Real-space residual; correlations recomputed per atom."""

    kind = "direct"

    def __init__(self, x: np.ndarray, state: LayerState):
        self.state = state
        self.x = x
        self.resync()

    def resync(self) -> None:
        self.r = self.x - reconstruct(self.state)

    def input_changed(self, x_new: np.ndarray) -> None:
        self.r += x_new - self.x
        self.x = x_new

    def begin_atom(self, k: int, gamma_e: np.ndarray) -> np.ndarray:
        d = self.state.dictionary[k]
        depth, dr, dc = d.shape
        n = self.r.shape[0]
        wr = self.r.shape[2] - dr + 1
        wc = self.r.shape[3] - dc + 1
        if wr * wc <= dr * dc:
            # few activation sites: one contraction per site
            corr = np.empty((n, wr, wc))
            for i in range(wr):
                for j in range(wc):
                    corr[:, i, j] = np.einsum(
                        "nd,ndab,dab->n", gamma_e,
                        self.r[:, :, i:i + dr, j:j + dc], d, optimize=True)
            return corr
        corr = np.zeros((n, wr, wc))
        for a in range(dr):
            for b in range(dc):
                corr += np.einsum("nd,ndij,d->nij", gamma_e,
                                  self.r[:, :, a:a + wr, b:b + wc], d[:, a, b],
                                  optimize=True)
        return corr

    def spikes_changed(self, k: int, sel: np.ndarray, p_r: int, p_c: int,
                       ds: np.ndarray) -> None:
        d = self.state.dictionary[k]
        dr, dc = d.shape[1:]
        self.r[sel, :, p_r:p_r + dr, p_c:p_c + dc] -= ds[:, None, None, None] * d[None]

    def end_atom(self, k: int) -> None:
        pass

    def dict_numerator(self, k: int, s_k: np.ndarray, gamma_e: np.ndarray) -> np.ndarray:
        d = self.state.dictionary[k]
        depth, dr, dc = d.shape
        n, wr, wc = s_k.shape
        xk = self.r.copy()
        self._add_conv(xk, d, s_k, 1.0)
        num = np.zeros((depth, dr, dc))
        ws = gamma_e[:, :, None, None] * s_k[:, None]  # (n, depth, wr, wc)
        for a in range(wr):
            for b in range(wc):
                num += np.einsum("nd,ndij->dij", ws[:, :, a, b],
                                 xk[:, :, a:a + dr, b:b + dc], optimize=True)
        return num

    def act_autocorr(self, k: int, s_k: np.ndarray, gamma_e: np.ndarray) -> np.ndarray:
        """Gamma-weighted activation autocorrelation per depth plane:
        table[d, dr-1+u, dc-1+v] = sum_n gamma_e[n,d] sum_x s_n(x) s_n(x+lag)."""
        depth = self.state.dictionary.shape[1]
        dr, dc = self.state.dictionary.shape[2:]
        n, wr, wc = s_k.shape
        out = np.empty((depth, 2 * dr - 1, 2 * dc - 1))
        for du in range(-(dr - 1), dr):
            r0, r1 = max(0, du), min(wr, wr + du)
            for dv in range(-(dc - 1), dc):
                c0, c1 = max(0, dv), min(wc, wc + dv)
                prod = np.sum(s_k[:, r0:r1, c0:c1]
                              * s_k[:, r0 - du:r1 - du, c0 - dv:c1 - dv],
                              axis=(1, 2))
                out[:, dr - 1 + du, dc - 1 + dv] = prod @ gamma_e
        return out

    @staticmethod
    def _add_conv(target: np.ndarray, d: np.ndarray, s_k: np.ndarray,
                  sign: float) -> None:
        """target += sign * (D * S), looping over the smaller grid."""
        depth, dr, dc = d.shape
        n, wr, wc = s_k.shape
        if wr * wc <= dr * dc:
            for a in range(wr):
                for b in range(wc):
                    target[:, :, a:a + dr, b:b + dc] += \
                        (sign * s_k[:, a, b])[:, None, None, None] * d[None]
        else:
            for a in range(dr):
                for b in range(dc):
                    target[:, :, a:a + wr, b:b + wc] += \
                        sign * d[None, :, a, b, None, None] * s_k[:, None]

    def dict_updated(self, k: int, d_old: np.ndarray, d_new: np.ndarray,
                     s_k: np.ndarray) -> None:
        self._add_conv(self.r, d_old - d_new, s_k, 1.0)

    def plane_sq_norms(self) -> np.ndarray:
        return np.sum(self.r * self.r, axis=(2, 3))

    def residual_real(self) -> np.ndarray:
        return self.r


class FftBackend:
    """Frequency-domain residual for depth-1 layers with large planes."""

    kind = "fft"

    def __init__(self, x: np.ndarray, state: LayerState):
        assert x.shape[1] == 1, "frequency backend is depth-1 only"
        self.state = state
        self.x = x
        rows, cols = x.shape[2], x.shape[3]
        self.rows, self.cols = rows, cols
        self.fshape = fft_shape(rows, cols)
        fr_n = self.fshape[1] // 2 + 1
        # Parseval column weights for the rfft layout
        w = np.full(fr_n, 2.0)
        w[0] = 1.0
        if self.fshape[1] % 2 == 0:
            w[-1] = 1.0
        self._pars_w = w / (self.fshape[0] * self.fshape[1])
        self.resync()

    def _rfft(self, a):
        return _fft.rfft2(a, s=self.fshape, workers=FFT_WORKERS)

    def _irfft(self, a):
        return _fft.irfft2(a, s=self.fshape, workers=FFT_WORKERS)

    def resync(self) -> None:
        st = self.state
        self.fx = self._rfft(self.x[:, 0])
        self.fd = np.stack([self._rfft(st.dictionary[k, 0]) for k in range(st.atoms)])
        fs = [self._rfft(s_plane(st, k)) for k in range(st.atoms)]
        self.fs = np.stack(fs, axis=1)  # (N, K, fr, fc)
        self.fr = self.fx - self._recon_freq()
        self._dirty = None

    def _recon_freq(self) -> np.ndarray:
        acc = np.zeros_like(self.fx)
        for k in range(self.state.atoms):
            acc += self.fd[k][None] * self.fs[:, k]
        return acc

    def input_changed(self, x_new: np.ndarray) -> None:
        fx_new = self._rfft(x_new[:, 0])
        self.fr += fx_new - self.fx
        self.fx = fx_new
        self.x = x_new

    def begin_atom(self, k: int, gamma_e: np.ndarray) -> np.ndarray:
        dr, dc = self.state.dictionary.shape[2:]
        wr, wc = self.rows - dr + 1, self.cols - dc + 1
        corr = self._irfft(self.fr * np.conj(self.fd[k])[None])[:, :wr, :wc].copy()
        corr *= gamma_e[:, 0, None, None]
        self._dirty = k
        return corr

    def spikes_changed(self, k, sel, p_r, p_c, ds) -> None:
        self._dirty = k  # residual update deferred to end_atom via FS refresh

    def end_atom(self, k: int) -> None:
        if self._dirty is None:
            return
        fs_new = self._rfft(s_plane(self.state, k))
        self.fr += self.fd[k][None] * (self.fs[:, k] - fs_new)
        self.fs[:, k] = fs_new
        self._dirty = None

    def dict_numerator(self, k, s_k, gamma_e) -> np.ndarray:
        dr, dc = self.state.dictionary.shape[2:]
        fxk = self.fr + self.fd[k][None] * self.fs[:, k]
        fxk *= np.conj(self.fs[:, k])
        # weighted image sum in the frequency domain, then one small inverse
        freq = np.einsum("n,nab->ab", gamma_e[:, 0], fxk)
        return self._irfft(freq)[None, :dr, :dc].copy()

    def act_autocorr(self, k, s_k, gamma_e) -> np.ndarray:
        dr, dc = self.state.dictionary.shape[2:]
        power = self.fs[:, k].real ** 2 + self.fs[:, k].imag ** 2
        freq = gamma_e[:, 0] @ power.reshape(power.shape[0], -1)
        full = self._irfft(freq.reshape(power.shape[1:]))
        fr, fc = self.fshape
        ri = [(lag % fr) for lag in range(-(dr - 1), dr)]
        ci = [(lag % fc) for lag in range(-(dc - 1), dc)]
        return full[ri][:, ci][None].copy()

    def dict_updated(self, k, d_old, d_new, s_k) -> None:
        fd_new = self._rfft(d_new[0])
        self.fr += (self.fd[k] - fd_new)[None] * self.fs[:, k]
        self.fd[k] = fd_new

    def plane_sq_norms(self) -> np.ndarray:
        sq = np.abs(self.fr) ** 2
        return np.sum(sq * self._pars_w[None, None, :], axis=(1, 2))[:, None]

    def residual_real(self) -> np.ndarray:
        return self._irfft(self.fr)[:, None, :self.rows, :self.cols].copy()


class XcorrBackend:
    """Fixed-dictionary inference: all-atom correlations maintained via
    cross-correlation tables; only state changes cost work."""

    kind = "xcorr"

    def __init__(self, x: np.ndarray, state: LayerState):
        assert x.shape[1] == 1, "xcorr backend is depth-1 only"
        self.state = state
        self.x = x
        k = state.atoms
        self.half_r, self.half_c = _lag_halves(state)
        self.xc = self._build_tables(state.dictionary[:, 0],
                                     self.half_r, self.half_c)
        self.resync()

    @staticmethod
    def _build_tables(atoms: np.ndarray, half_r: int, half_c: int) -> np.ndarray:
        """All pairwise cross-correlation tables through one batched FFT."""
        k, dr, dc = atoms.shape
        fr, fc = fft_shape(2 * dr - 1, 2 * dc - 1)
        fa = _fft.rfft2(atoms, s=(fr, fc), workers=FFT_WORKERS)
        prod = fa[:, None] * np.conj(fa[None])
        full = _fft.irfft2(prod, s=(fr, fc), workers=FFT_WORKERS)
        # full[t, u, i, j] = sum_ab atoms[t, a+i', b+j'] ... recover lags:
        # correlation at lag (u, v) sits at index (u mod fr, v mod fc)
        out = np.empty((k, k, 2 * half_r + 1, 2 * half_c + 1))
        ri = [(lag % fr) for lag in range(-half_r, half_r + 1)]
        ci = [(lag % fc) for lag in range(-half_c, half_c + 1)]
        out[:] = full[:, :, ri][:, :, :, ci]
        return out

    def resync(self) -> None:
        st = self.state
        self.r = self.x - reconstruct(st)
        dr, dc = st.dictionary.shape[2:]
        wr = self.x.shape[2] - dr + 1
        wc = self.x.shape[3] - dc + 1
        n = self.x.shape[0]
        self.corr = np.empty((n, st.atoms, wr, wc))
        for k in range(st.atoms):
            self.corr[:, k] = batch_correlate_valid(self.r[:, 0], st.dictionary[k, 0])

    def input_changed(self, x_new: np.ndarray) -> None:
        self.r += x_new - self.x
        self.x = x_new
        for k in range(self.state.atoms):
            self.corr[:, k] = batch_correlate_valid(self.r[:, 0], self.state.dictionary[k, 0])

    def begin_atom(self, k: int, gamma_e: np.ndarray) -> np.ndarray:
        return self.corr[:, k] * gamma_e[:, 0, None, None]

    def spikes_changed(self, k, sel, p_r, p_c, ds) -> None:
        d = self.state.dictionary[k]
        dr, dc = d.shape[1:]
        self.r[sel, :, p_r:p_r + dr, p_c:p_c + dc] -= ds[:, None, None, None] * d[None]
        wr, wc = self.corr.shape[2:]
        grid, tab = _win(p_r, p_c, wr, wc, self.half_r, self.half_c)
        self.corr[sel, :, grid[0], grid[1]] -= \
            ds[:, None, None, None] * self.xc[k][None, :, tab[0], tab[1]]

    def end_atom(self, k: int) -> None:
        pass

    def dict_numerator(self, k, s_k, gamma_e):
        raise RuntimeError("dictionary is fixed under the xcorr backend")

    def dict_updated(self, k, d_old, d_new, s_k):
        raise RuntimeError("dictionary is fixed under the xcorr backend")

    def plane_sq_norms(self) -> np.ndarray:
        return np.sum(self.r * self.r, axis=(2, 3))

    def residual_real(self) -> np.ndarray:
        return self.r


def s_plane(state: LayerState, k: int) -> np.ndarray:
    """Activation plane S of atom k, (N, wr, wc)."""
    n, _, wr, wc = state.weights.shape
    if state.regime == REGIME_BERNOULLI:
        return state.weights[:, k] * state.z_mask[:, k]
    shape = state.pool_shape()
    out = np.zeros((n, wr, wc))
    zp = state.z_pos[:, k]
    ni, bi, bj = np.nonzero(zp >= 0)
    pos = zp[ni, bi, bj]
    rows = bi * shape.nx + pos // shape.ny
    cols = bj * shape.ny + pos % shape.ny
    out[ni, rows, cols] = state.weights[ni, k, rows, cols]
    return out


def reconstruct(state: LayerState) -> np.ndarray:
    """Sum over atoms of D * S at this layer's input scale."""
    n, k_atoms, wr, wc = state.weights.shape
    depth = state.depth
    dr, dc = state.dictionary.shape[2:]
    out = np.zeros((n, depth, wr + dr - 1, wc + dc - 1))
    for k in range(k_atoms):
        sk = s_plane(state, k)
        if not np.any(sk):
            continue
        for d in range(depth):
            out[:, d] += batch_convolve_full(state.dictionary[k, d], sk)
    return out


def make_backend(x: np.ndarray, state: LayerState, fixed_dictionary: bool = False):
    depth, rows, cols = x.shape[1], x.shape[2], x.shape[3]
    # cross-correlation maintenance pays off only for sparse Bernoulli flips
    if fixed_dictionary and depth == 1 and state.regime == REGIME_BERNOULLI:
        return XcorrBackend(x, state)
    if depth == 1 and rows * cols >= FFT_PLANE_THRESHOLD:
        return FftBackend(x, state)
    return DirectBackend(x, state)


class LayerChain:
    """One layer's Gibbs chain over an image batch.

    mode 'pretrain': free weights with zero-mean prior; multinomial layers
    allow the all-zero block outcome. mode 'refine': block values are copies
    of the parent plane (prior mean = parent reconstruction with the coupling
    precision supplied per sweep); every block holds exactly one nonzero
    unless allow_empty is set.
    """

    def __init__(self, x: np.ndarray, state: LayerState, hyper, *,
                 mode: str = "pretrain", fixed_dictionary: bool = False,
                 allow_empty: bool | None = None):
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        self.state = state
        self.hyper = hyper
        self.mode = mode
        self.fixed_dictionary = fixed_dictionary
        if state.regime == REGIME_MULTINOMIAL:
            self.pool = state.pool_shape()
            if allow_empty is None:
                allow_empty = state.pool_regime == POOL_AT_MOST_ONE
            self.allow_empty = allow_empty
        else:
            self.pool = None
            self.allow_empty = True
        self.backend = make_backend(self.x, state, fixed_dictionary)
        self._halves = _lag_halves(state)
        self._corr = None
        self._corr_atom = None
        self._gnorm = None
        self._gac = None
        self._ac_cache: dict = {}  # per-atom lag tables when D is fixed

    # -- residual/corr plumbing ---------------------------------------------

    @property
    def n_images(self) -> int:
        return self.x.shape[0]

    @property
    def w_shape(self) -> tuple[int, int]:
        return self.state.weights.shape[2], self.state.weights.shape[3]

    def _finish_atom(self) -> None:
        if self._corr_atom is not None:
            self.backend.end_atom(self._corr_atom)
            self._corr_atom = None
            self._corr = None

    def _ensure_atom(self, k: int) -> None:
        if self._corr_atom == k:
            return
        self._finish_atom()
        d = self.state.dictionary[k]
        g_e = self.state.gamma_e
        hr, hc = self._halves
        if d.shape[0] == 1:
            # depth 1: the gamma weight is a per-image scalar, so keep one
            # shared lag table and scale at use
            if self.fixed_dictionary and k in self._ac_cache:
                self._ac = self._ac_cache[k]
            else:
                self._ac = self._per_depth_ac(d, hr, hc)[0]
                if self.fixed_dictionary:
                    self._ac_cache[k] = self._ac
            self._gev = g_e[:, 0]
            self._gac = None
            self._gnorm = self._gev * self._ac[hr, hc]
        else:
            self._ac = None
            self._gev = None
            self._gac = np.tensordot(g_e, self._per_depth_ac(d, hr, hc), axes=(1, 0))
            self._gnorm = self._gac[:, hr, hc].copy()
        self._apad = None
        if self._ac is not None and self.pool is not None:
            key = ("apad", k)
            if self.fixed_dictionary and key in self._ac_cache:
                self._apad = self._ac_cache[key]
            else:
                # lag table pre-placed at every in-block offset, for batched
                # whole-block correlation updates
                nx, ny = self.pool.nx, self.pool.ny
                apad = np.zeros((nx * ny, nx + 2 * hr, ny + 2 * hc))
                for p in range(nx * ny):
                    pr, pc = p // ny, p % ny
                    apad[p, pr:pr + 2 * hr + 1, pc:pc + 2 * hc + 1] = self._ac
                self._apad = apad
                if self.fixed_dictionary:
                    self._ac_cache[key] = apad
        self._corr = self.backend.begin_atom(k, g_e)
        self._corr_atom = k

    @staticmethod
    def _per_depth_ac(d: np.ndarray, half_r: int, half_c: int) -> np.ndarray:
        out = np.empty((d.shape[0], 2 * half_r + 1, 2 * half_c + 1))
        for di in range(d.shape[0]):
            out[di] = xcorr_table(d[di:di + 1], d[di:di + 1], half_r, half_c)
        return out

    def _apply_change(self, k: int, sel: np.ndarray, p_r: int, p_c: int,
                      ds: np.ndarray) -> None:
        """Activation of atom k changed by ds at (p_r, p_c) for images sel."""
        if sel.size == 0:
            return
        self.backend.spikes_changed(k, sel, p_r, p_c, ds)
        wr, wc = self.w_shape
        hr, hc = self._halves
        grid, tab = _win(p_r, p_c, wr, wc, hr, hc)
        if self._ac is not None:
            self._corr[sel, grid[0], grid[1]] -= \
                (ds * self._gev[sel])[:, None, None] * self._ac[tab[0], tab[1]]
        else:
            self._corr[sel, grid[0], grid[1]] -= \
                ds[:, None, None] * self._gac[sel][:, tab[0], tab[1]]

    def _apply_block_multi(self, k: int, bi: int, bj: int, sel: np.ndarray,
                           pos: np.ndarray, ds: np.ndarray) -> None:
        """Activations of atom k changed by ds at per-image in-block
        positions of block (bi, bj): one batched correlation update."""
        if sel.size == 0:
            return
        nx, ny = self.pool.nx, self.pool.ny
        if self._apad is None:
            for p in np.unique(pos):
                m = pos == p
                self._apply_change(k, sel[m], bi * nx + int(p) // ny,
                                   bj * ny + int(p) % ny, ds[m])
            return
        if self.backend.kind == "fft":
            self.backend.spikes_changed(k, sel, 0, 0, ds)  # marks deferred
        else:
            for p in np.unique(pos):
                m = pos == p
                self.backend.spikes_changed(k, sel[m], bi * nx + int(p) // ny,
                                            bj * ny + int(p) % ny, ds[m])
        hr, hc = self._halves
        wr, wc = self.w_shape
        r0, c0 = bi * nx - hr, bj * ny - hc
        gr0, gc0 = max(0, r0), max(0, c0)
        gr1 = min(wr, bi * nx + nx + hr)
        gc1 = min(wc, bj * ny + ny + hc)
        tr0, tc0 = gr0 - r0, gc0 - c0
        delta = (ds * self._gev[sel])[:, None, None] * \
            self._apad[pos, tr0:tr0 + gr1 - gr0, tc0:tc0 + gc1 - gc0]
        self._corr[sel, gr0:gr1, gc0:gc1] -= delta

    def resync(self) -> None:
        self._finish_atom()
        self.backend.resync()

    def input_changed(self, x_new: np.ndarray) -> None:
        self._finish_atom()
        self.x = np.ascontiguousarray(x_new, dtype=np.float64)
        self.backend.input_changed(self.x)

    def residual_drift(self) -> float:
        """Max |maintained residual - recomputed residual|."""
        self._finish_atom()
        fresh = self.x - reconstruct(self.state)
        return float(np.max(np.abs(self.backend.residual_real() - fresh)))

    # -- indicator draws ------------------------------------------------------

    def sample_indicators(self, k: int, rng: np.random.Generator,
                          values: np.ndarray | None = None) -> None:
        if self.state.regime == REGIME_BERNOULLI:
            self._sample_bernoulli_mask(k, rng)
        else:
            self._sample_block_positions(k, rng)

    def _block_lag_table(self) -> np.ndarray:
        """In-block lag sub-table: (N, M, M) with [., p, m] = gac(m - p) for
        general depth, or the shared (M, M) table for depth 1 (callers scale
        by the per-image gamma factor)."""
        nx, ny = self.pool.nx, self.pool.ny
        hr, hc = self._halves
        m = nx * ny
        base = self._ac if self._ac is not None else None
        shape = (m, m) if base is not None else (self.n_images, m, m)
        tab = np.zeros(shape)
        for p in range(m):
            pr, pc = p // ny, p % ny
            for q in range(m):
                qr, qc = q // ny, q % ny
                ur, uc = qr - pr + hr, qc - pc + hc
                if 0 <= ur < 2 * hr + 1 and 0 <= uc < 2 * hc + 1:
                    tab[..., p, q] = base[ur, uc] if base is not None \
                        else self._gac[:, ur, uc]
        return tab

    def block_energies(self, k: int, bi: int, bj: int) -> np.ndarray:
        """Per-position energies Y for block (bi, bj) of atom k, residual
        excluding the block itself; shape (N, nx*ny)."""
        self._ensure_atom(k)
        nx, ny = self.pool.nx, self.pool.ny
        n = self.n_images
        m = nx * ny
        wblk = self.state.weights[:, k, bi * nx:(bi + 1) * nx,
                                  bj * ny:(bj + 1) * ny].reshape(n, m)
        cblk = self._corr[:, bi * nx:(bi + 1) * nx, bj * ny:(bj + 1) * ny].reshape(n, m).copy()
        zp = self.state.z_pos[:, k, bi, bj]
        act = zp >= 0
        if np.any(act):
            lag = self._block_lag_table()
            idx = np.where(act, zp, 0)
            w_cur = wblk[np.arange(n), idx]
            corr_fix = lag[np.arange(n), idx] * (w_cur * act)[:, None]
            cblk += corr_fix
        return self._gnorm[:, None] * wblk * wblk - 2.0 * cblk * wblk

    def _block_probs(self, k: int, bi: int, bj: int, lag: np.ndarray,
                     log_theta: np.ndarray) -> np.ndarray:
        """Outcome probabilities for one block at the current state."""
        nx, ny = self.pool.nx, self.pool.ny
        n = self.n_images
        m = nx * ny
        wblk = self.state.weights[:, k, bi * nx:(bi + 1) * nx,
                                  bj * ny:(bj + 1) * ny].reshape(n, m)
        cblk = self._corr[:, bi * nx:(bi + 1) * nx,
                          bj * ny:(bj + 1) * ny].reshape(n, m).copy()
        zp = self.state.z_pos[:, k, bi, bj]
        act = zp >= 0
        idx_cur = np.where(act, zp, 0)
        w_cur = wblk[np.arange(n), idx_cur] * act
        if lag.ndim == 2:
            cblk += lag[idx_cur] * (w_cur * self._gev)[:, None]
        else:
            cblk += lag[np.arange(n), idx_cur] * w_cur[:, None]
        y = self._gnorm[:, None] * wblk * wblk - 2.0 * cblk * wblk
        logits = log_theta[:, :m] - 0.5 * y
        if self.allow_empty:
            logits = np.concatenate([logits, log_theta[:, m:m + 1]], axis=1)
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        return probs

    def set_block(self, k: int, bi: int, bj: int, new_zp: np.ndarray) -> None:
        """Move block (bi, bj) of atom k to the given outcome codes, keeping
        residual and correlations exact."""
        self._ensure_atom(k)
        nx, ny = self.pool.nx, self.pool.ny
        new_zp = np.asarray(new_zp, dtype=np.int16)
        zp = self.state.z_pos[:, k, bi, bj]
        changed = new_zp != zp
        sel_d = np.flatnonzero(changed & (zp >= 0))
        if sel_d.size:
            pos = zp[sel_d].astype(np.int64)
            rows = bi * nx + pos // ny
            cols = bj * ny + pos % ny
            w_old = self.state.weights[sel_d, k, rows, cols]
            self._apply_block_multi(k, bi, bj, sel_d, pos, -w_old)
        sel_a = np.flatnonzero(changed & (new_zp >= 0))
        if sel_a.size:
            pos = new_zp[sel_a].astype(np.int64)
            rows = bi * nx + pos // ny
            cols = bj * ny + pos % ny
            w_new = self.state.weights[sel_a, k, rows, cols]
            self._apply_block_multi(k, bi, bj, sel_a, pos, w_new)
        self.state.z_pos[:, k, bi, bj] = new_zp

    def _block_step(self, k: int, bi: int, bj: int, uniform: np.ndarray,
                    lag: np.ndarray, log_theta: np.ndarray) -> None:
        m = self.pool.size
        probs = self._block_probs(k, bi, bj, lag, log_theta)
        cdf = np.cumsum(probs, axis=1)
        out = (uniform[:, None] > cdf).sum(axis=1)
        new_zp = np.where(out >= m, -1, out).astype(np.int16)
        self.set_block(k, bi, bj, new_zp)

    def sample_block(self, k: int, bi: int, bj: int, rng: np.random.Generator) -> None:
        """One multinomial draw for a single block (exact conditional)."""
        self._ensure_atom(k)
        log_theta = np.log(np.clip(self.state.theta[:, k], 1e-300, None))
        self._block_step(k, bi, bj, rng.random(self.n_images),
                         self._block_lag_table(), log_theta)

    def block_probs(self, k: int, bi: int, bj: int) -> np.ndarray:
        """Conditional outcome probabilities of one block, (N, n_outcomes)."""
        self._ensure_atom(k)
        log_theta = np.log(np.clip(self.state.theta[:, k], 1e-300, None))
        return self._block_probs(k, bi, bj, self._block_lag_table(), log_theta)

    def _sample_block_positions(self, k: int, rng: np.random.Generator) -> None:
        self._ensure_atom(k)
        nx, ny = self.pool.nx, self.pool.ny
        wr, wc = self.w_shape
        br, bc = wr // nx, wc // ny
        log_theta = np.log(np.clip(self.state.theta[:, k], 1e-300, None))
        lag = self._block_lag_table()
        uniforms = rng.random((br, bc, self.n_images))
        for bi in range(br):
            for bj in range(bc):
                self._block_step(k, bi, bj, uniforms[bi, bj], lag, log_theta)

    def element_energy(self, k: int, e_r: int, e_c: int) -> np.ndarray:
        """Bernoulli activation energy at one element, self-excluded residual."""
        self._ensure_atom(k)
        w = self.state.weights[:, k, e_r, e_c]
        z = self.state.z_mask[:, k, e_r, e_c].astype(np.float64)
        c = self._corr[:, e_r, e_c] + z * w * self._gnorm
        return self._gnorm * w * w - 2.0 * c * w

    def element_on_probability(self, k: int, e_r: int, e_c: int) -> np.ndarray:
        """Conditional P(z=1) for one top-layer element, (N,)."""
        self._ensure_atom(k)
        pi = np.clip(self.state.pi[:, k, e_r, e_c], 1e-12, 1.0 - 1e-12)
        y = self.element_energy(k, e_r, e_c)
        logit = np.log(pi) - np.log1p(-pi) - 0.5 * y
        return expit(logit)

    def set_element(self, k: int, e_r: int, e_c: int, z_new: np.ndarray) -> None:
        self._ensure_atom(k)
        z = self.state.z_mask[:, k, e_r, e_c]
        w = self.state.weights[:, k, e_r, e_c]
        z_new = np.asarray(z_new, dtype=np.uint8)
        flip_on = np.flatnonzero((z == 0) & (z_new == 1))
        flip_off = np.flatnonzero((z == 1) & (z_new == 0))
        if flip_on.size:
            self._apply_change(k, flip_on, e_r, e_c, w[flip_on])
        if flip_off.size:
            self._apply_change(k, flip_off, e_r, e_c, -w[flip_off])
        self.state.z_mask[:, k, e_r, e_c] = z_new

    def sample_element(self, k: int, e_r: int, e_c: int,
                       rng: np.random.Generator) -> None:
        """One Bernoulli draw for a single top-layer element."""
        p1 = self.element_on_probability(k, e_r, e_c)
        self.set_element(k, e_r, e_c, (rng.random(self.n_images) < p1).astype(np.uint8))

    def _sample_bernoulli_mask(self, k: int, rng: np.random.Generator) -> None:
        self._ensure_atom(k)
        wr, wc = self.w_shape
        uniforms = rng.random((wr, wc, self.n_images))
        for e_r in range(wr):
            for e_c in range(wc):
                p1 = self.element_on_probability(k, e_r, e_c)
                self.set_element(k, e_r, e_c,
                                 (uniforms[e_r, e_c] < p1).astype(np.uint8))

    def sample_pi(self, k: int, rng: np.random.Generator) -> None:
        a0, b0 = self.hyper.beta_prior(self.state.atoms)
        z = self.state.z_mask[:, k].astype(np.float64)
        self.state.pi[:, k] = rng.beta(a0 + z, b0 + 1.0 - z)

    # -- weight draws ---------------------------------------------------------

    def sample_weights(self, k: int, rng: np.random.Generator) -> None:
        """Active positions from their exact conditionals (sequentially),
        inactive positions from the prior."""
        self._ensure_atom(k)
        wr, wc = self.w_shape
        n = self.n_images
        g_w = self.state.gamma_w[:, k]
        if self.state.regime == REGIME_BERNOULLI:
            normals = rng.standard_normal((wr, wc, n))
            for e_r in range(wr):
                for e_c in range(wc):
                    sel = np.flatnonzero(self.state.z_mask[:, k, e_r, e_c] == 1)
                    if sel.size == 0:
                        continue
                    self._draw_active(k, sel, e_r, e_c, normals[e_r, e_c, sel])
        else:
            nx, ny = self.pool.nx, self.pool.ny
            br, bc = wr // nx, wc // ny
            normals = rng.standard_normal((br, bc, n))
            for bi in range(br):
                for bj in range(bc):
                    zp = self.state.z_pos[:, k, bi, bj]
                    sel = np.flatnonzero(zp >= 0)
                    if sel.size == 0:
                        continue
                    pos = zp[sel].astype(np.int64)
                    rows = bi * nx + pos // ny
                    cols = bj * ny + pos % ny
                    w_cur = self.state.weights[sel, k, rows, cols]
                    b = self._corr[sel, rows, cols] + w_cur * self._gnorm[sel]
                    lam = 1.0 / (self._gnorm[sel]
                                 + self.state.gamma_w[sel, k, rows, cols])
                    w_new = lam * b + np.sqrt(lam) * normals[bi, bj, sel]
                    self._apply_block_multi(k, bi, bj, sel, pos, w_new - w_cur)
                    self.state.weights[sel, k, rows, cols] = w_new
        # prior redraw at inactive positions (does not touch the residual)
        prior = rng.standard_normal((n, wr, wc)) / np.sqrt(g_w)
        if self.state.regime == REGIME_BERNOULLI:
            active = self.state.z_mask[:, k] == 1
        else:
            active = indicators_from_zpos(self.state.z_pos[:, k:k + 1],
                                          self.pool, wr, wc)[:, 0] > 0
        self.state.weights[:, k] = np.where(active, self.state.weights[:, k], prior)

    def _draw_active(self, k: int, sel: np.ndarray, p_r: int, p_c: int,
                     normals: np.ndarray) -> None:
        w_cur = self.state.weights[sel, k, p_r, p_c]
        b = self._corr[sel, p_r, p_c] + w_cur * self._gnorm[sel]
        lam = 1.0 / (self._gnorm[sel] + self.state.gamma_w[sel, k, p_r, p_c])
        w_new = lam * b + np.sqrt(lam) * normals
        self._apply_change(k, sel, p_r, p_c, w_new - w_cur)
        self.state.weights[sel, k, p_r, p_c] = w_new

    def sample_parent_values(self, k: int, rng: np.random.Generator,
                             parent_mean: np.ndarray,
                             coupling: np.ndarray) -> None:
        """Refined mode: redraw each block's value (shared by the block).

        parent_mean (N, br, bc): reconstruction of this plane by the layer
        above. coupling (N,): its precision. The data side enters through the
        residual correlation at the block's active position.
        """
        self._ensure_atom(k)
        nx, ny = self.pool.nx, self.pool.ny
        wr, wc = self.w_shape
        br, bc = wr // nx, wc // ny
        n = self.n_images
        normals = rng.standard_normal((br, bc, n))
        for bi in range(br):
            for bj in range(bc):
                zp = self.state.z_pos[:, k, bi, bj]
                mean_b = parent_mean[:, bi, bj]
                blk = (slice(bi * nx, (bi + 1) * nx), slice(bj * ny, (bj + 1) * ny))
                v_new_all = np.empty(n)
                empty = np.flatnonzero(zp < 0)
                if empty.size:
                    # empty block: the value has no data term
                    v_new_all[empty] = mean_b[empty] \
                        + normals[bi, bj, empty] / np.sqrt(coupling[empty])
                sel = np.flatnonzero(zp >= 0)
                if sel.size:
                    pos = zp[sel].astype(np.int64)
                    rows = bi * nx + pos // ny
                    cols = bj * ny + pos % ny
                    v_cur = self.state.weights[sel, k, rows, cols]
                    b = self._corr[sel, rows, cols] + v_cur * self._gnorm[sel]
                    lam = 1.0 / (self._gnorm[sel] + coupling[sel])
                    v_new = lam * (b + coupling[sel] * mean_b[sel]) \
                        + np.sqrt(lam) * normals[bi, bj, sel]
                    self._apply_block_multi(k, bi, bj, sel, pos, v_new - v_cur)
                    v_new_all[sel] = v_new
                self.state.weights[:, k, blk[0], blk[1]] = v_new_all[:, None, None]

    # -- dictionary / probabilities / precisions ------------------------------

    def sample_dictionary(self, rng: np.random.Generator) -> None:
        """Element-wise exact redraw of every dictionary slice.

        Activations of one atom overlap when placed closer than the filter
        extent, so sibling elements share evidence; each element is drawn
        with the others' current contributions excluded, which the activation
        autocorrelation table provides in closed form.
        """
        if self.fixed_dictionary:
            raise RuntimeError("dictionary is fixed for this chain")
        self._finish_atom()
        st = self.state
        g_e = st.gamma_e
        dr, dc = st.dictionary.shape[2:]
        for k in range(st.atoms):
            s_k = s_plane(st, k)
            v = self.backend.dict_numerator(k, s_k, g_e)   # (depth, dr, dc)
            gacs = self.backend.act_autocorr(k, s_k, g_e)  # (depth, 2dr-1, 2dc-1)
            ssq = np.sum(s_k * s_k, axis=(1, 2))
            den = g_e.T @ ssq + st.gamma_d[k]  # (depth,)
            var = 1.0 / den
            sd = np.sqrt(var)
            gacs0 = gacs[:, dr - 1, dc - 1]
            d_old = st.dictionary[k].copy()
            d_cur = d_old.copy()
            # m_field[d, a, b] = sum_{a'b'} d_cur[d, a', b'] * gacs[d, a'-a, b'-b]
            m_field = np.empty_like(d_cur)
            for a in range(dr):
                for b in range(dc):
                    m_field[:, a, b] = np.sum(
                        d_cur * gacs[:, dr - 1 - a:2 * dr - 1 - a,
                                     dc - 1 - b:2 * dc - 1 - b], axis=(1, 2))
            normals = rng.standard_normal(d_cur.shape)
            for a in range(dr):
                for b in range(dc):
                    bvec = v[:, a, b] - m_field[:, a, b] + d_cur[:, a, b] * gacs0
                    d_new = var * bvec + sd * normals[:, a, b]
                    delta = d_new - d_cur[:, a, b]
                    # m_field[a'', b''] gains delta * gacs(a - a'', b - b'')
                    win = gacs[:, a:a + dr, b:b + dc][:, ::-1, ::-1]
                    m_field += delta[:, None, None] * win
                    d_cur[:, a, b] = d_new
            st.dictionary[k] = d_cur
            self.backend.dict_updated(k, d_old, d_cur, s_k)

    def sample_position_probs(self, rng: np.random.Generator) -> None:
        """Dirichlet redraw of per-(image, atom) position probabilities."""
        st = self.state
        m_pos = self.pool.size
        with_empty = self.allow_empty
        m = m_pos + 1 if with_empty else m_pos
        n, k_atoms, br, bc = st.z_pos.shape
        flat = st.z_pos.reshape(n, k_atoms, br * bc)
        counts = np.zeros((n, k_atoms, m))
        offs = np.where(flat >= 0, flat, m - 1)
        np.add.at(counts.reshape(n * k_atoms, m),
                  (np.repeat(np.arange(n * k_atoms), br * bc), offs.reshape(-1)), 1.0)
        alpha = 1.0 / m + counts
        draws = rng.standard_gamma(alpha)
        draws = np.clip(draws, 1e-300, None)
        st.theta = draws / draws.sum(axis=2, keepdims=True)

    def sample_precisions(self, rng: np.random.Generator, *,
                          update_gamma_w: bool | None = None) -> None:
        st = self.state
        h = self.hyper
        if update_gamma_w is None:
            update_gamma_w = self.mode == "pretrain"
        if update_gamma_w:
            rate = h.b_w + 0.5 * st.weights * st.weights
            st.gamma_w = rng.standard_gamma(h.a_w + 0.5, size=rate.shape) / rate
        if not self.fixed_dictionary:
            d_sq = np.sum(st.dictionary ** 2, axis=(2, 3))
            p_d = st.dictionary.shape[2] * st.dictionary.shape[3]
            rate = h.b_d + 0.5 * d_sq
            st.gamma_d = rng.standard_gamma(h.a_d + 0.5 * p_d, size=rate.shape) / rate
        self._finish_atom()
        sq = self.backend.plane_sq_norms()
        p_plane = self.x.shape[2] * self.x.shape[3]
        rate = h.b_e + 0.5 * sq
        st.gamma_e = rng.standard_gamma(h.a_e + 0.5 * p_plane, size=rate.shape) / rate

    # -- per-sweep composite --------------------------------------------------

    def sweep(self, streams, sweep_idx: int) -> None:
        """One full Gibbs sweep in pretrain/test mode."""
        st = self.state
        for k in range(st.atoms):
            self.sample_indicators(k, streams(sweep_idx, 0, k))
            if st.regime == REGIME_BERNOULLI:
                self.sample_pi(k, streams(sweep_idx, 5, k))
            self.sample_weights(k, streams(sweep_idx, 1, k))
        if not self.fixed_dictionary:
            self.sample_dictionary(streams(sweep_idx, 2, 0))
        if st.regime == REGIME_MULTINOMIAL:
            self.sample_position_probs(streams(sweep_idx, 3, 0))
        self.sample_precisions(streams(sweep_idx, 4, 0))
