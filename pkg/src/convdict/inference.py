"""Test-time inference against a collapsed dictionary.

Deconvolution is a single-layer Bernoulli Gibbs chain per image (images run
as one vectorized batch; the chains never interact). Missing pixels are
handled by data augmentation: each sweep imputes them from the current
reconstruction plus noise at the model's noise level, leaving every
conditional untouched. Generation runs the refined generative path top-down
from population-averaged priors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .collapse import CollapsedDictionary, project_dictionary, select_ml_pool_maps
from .data import DataError
from .engine import LayerChain
from .gibbs import RESYNC_EVERY, SamplerSchedule, TEST_SCHEDULE
from .model import Hyperparams, LayerState, NetworkModel, PHASE_REFINED, \
    REGIME_BERNOULLI, reconstruct_from
from .rng import OP_IMPUTE, STAGE_GENERATE, STAGE_TEST, StreamFactory

FEATURE_ORDER = "atom-major,row-major"


@dataclass
class FeatureSet:
    """Unfolded top-layer activation vectors, one row per image."""
    features: np.ndarray               # (N, atoms * rows * cols)
    atoms: int
    grid_rows: int
    grid_cols: int
    labels: np.ndarray | None = None
    order: str = FEATURE_ORDER

    def __post_init__(self):
        dim = self.atoms * self.grid_rows * self.grid_cols
        if self.features.ndim != 2 or self.features.shape[1] != dim:
            raise ValueError(f"feature dim {self.features.shape} != {dim}")
        if self.labels is not None and len(self.labels) != len(self.features):
            raise ValueError("label count mismatch")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def save_features(fs: FeatureSet, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        header = (
            "convdict-features-v1\n"
            f"count={fs.count}\n"
            f"dim={fs.dim}\n"
            f"atoms={fs.atoms}\n"
            f"grid_rows={fs.grid_rows}\n"
            f"grid_cols={fs.grid_cols}\n"
            f"order={fs.order}\n"
            f"labels={0 if fs.labels is None else 1}\n"
            "END\n")
        f.write(header.encode())
        f.write(np.ascontiguousarray(fs.features, dtype="<f8").tobytes())
    os.replace(tmp, path)
    if fs.labels is not None:
        ltmp = path + ".labels.tmp"
        with open(ltmp, "w") as f:
            f.write("\n".join(str(int(v)) for v in fs.labels) + "\n")
        os.replace(ltmp, path + ".labels")


def load_features(path: str) -> FeatureSet:
    with open(path, "rb") as f:
        first = f.readline().strip()
        if first != b"convdict-features-v1":
            raise DataError(f"{path}: not a feature file")
        meta = {}
        while True:
            line = f.readline()
            if not line:
                raise DataError(f"{path}: missing END marker")
            if line.strip() == b"END":
                break
            k, v = line.decode().strip().split("=", 1)
            meta[k] = v
        count, dim = int(meta["count"]), int(meta["dim"])
        payload = f.read(count * dim * 8)
        if len(payload) != count * dim * 8:
            raise DataError(f"{path}: truncated feature payload")
        feats = np.frombuffer(payload, dtype="<f8").reshape(count, dim).copy()
    labels = None
    if meta.get("labels") == "1":
        with open(path + ".labels") as f:
            labels = np.array([int(line) for line in f if line.strip()])
    return FeatureSet(features=feats, atoms=int(meta["atoms"]),
                      grid_rows=int(meta["grid_rows"]),
                      grid_cols=int(meta["grid_cols"]),
                      labels=labels, order=meta.get("order", FEATURE_ORDER))


# ---------------------------------------------------------------------------
# Deconvolution
# ---------------------------------------------------------------------------

def _per_image_joint(chain: LayerChain) -> np.ndarray:
    """Per-image log joint of the test-time latents (the fixed dictionary
    contributes a constant and is left out)."""
    st = chain.state
    h = chain.hyper
    p_plane = chain.x.shape[2] * chain.x.shape[3]
    g_e = st.gamma_e
    sq = chain.backend.plane_sq_norms()
    log2pi = np.log(2.0 * np.pi)
    total = np.sum(0.5 * p_plane * (np.log(g_e) - log2pi) - 0.5 * g_e * sq, axis=1)
    total += np.sum(h.a_e * np.log(h.b_e) - gammaln(h.a_e)
                    + (h.a_e - 1.0) * np.log(g_e) - h.b_e * g_e, axis=1)
    gw = st.gamma_w
    w = st.weights
    total += np.sum(0.5 * (np.log(gw) - log2pi) - 0.5 * gw * w * w, axis=(1, 2, 3))
    total += np.sum(h.a_w * np.log(h.b_w) - gammaln(h.a_w)
                    + (h.a_w - 1.0) * np.log(gw) - h.b_w * gw, axis=(1, 2, 3))
    a0, b0 = h.beta_prior(st.atoms)
    pi = np.clip(st.pi, 1e-300, 1 - 1e-16)
    z = st.z_mask.astype(np.float64)
    total += np.sum(z * np.log(pi) + (1 - z) * np.log1p(-pi), axis=(1, 2, 3))
    const = gammaln(a0 + b0) - gammaln(a0) - gammaln(b0)
    total += np.sum((a0 - 1) * np.log(pi) + (b0 - 1) * np.log1p(-pi) + const,
                    axis=(1, 2, 3))
    return total


def _init_test_state(collapsed: CollapsedDictionary, n: int, wr: int, wc: int,
                     hyper: Hyperparams) -> LayerState:
    k = collapsed.atoms
    a0, b0 = hyper.beta_prior(k)
    return LayerState(
        regime=REGIME_BERNOULLI,
        dictionary=collapsed.filters[:, None],
        weights=np.zeros((n, k, wr, wc)),
        gamma_w=np.full((n, k, wr, wc), hyper.a_w / hyper.b_w),
        gamma_d=np.ones((k, 1)),
        gamma_e=np.full((n, 1), hyper.a_e / hyper.b_e),
        z_mask=np.zeros((n, k, wr, wc), dtype=np.uint8),
        pi=np.full((n, k, wr, wc), a0 / (a0 + b0)),
    )


def _run_test_chain(images: np.ndarray, collapsed: CollapsedDictionary,
                    hyper: Hyperparams, schedule: SamplerSchedule, seed: int,
                    mask: np.ndarray | None = None):
    """MAP per-image latents; returns (best_s, best_recon)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    n, rows, cols = x.shape
    wr, wc = collapsed.feature_grid(rows, cols)
    missing = None
    if mask is not None:
        obs = np.asarray(mask).astype(bool)
        if obs.shape != (rows, cols):
            raise DataError(f"mask shape {obs.shape} != image shape {(rows, cols)}")
        if not obs.any():
            raise DataError("empty observed set")
        if not obs.all():
            missing = ~obs
    x_chain = x[:, None].copy()
    if missing is not None:
        x_chain[:, 0, missing] = 0.0
    state = _init_test_state(collapsed, n, wr, wc, hyper)
    chain = LayerChain(x_chain, state, hyper, mode="pretrain", fixed_dictionary=True)
    factory = StreamFactory(seed, STAGE_TEST)
    streams = lambda s, op, atom: factory.stream(op, s, atom)  # noqa: E731
    best_score = np.full(n, -np.inf)
    best_s = np.zeros((n, collapsed.atoms, wr, wc))
    best_recon = np.zeros((n, rows, cols))
    for sweep in range(1, schedule.total + 1):
        if missing is not None:
            recon = chain.x - chain.backend.residual_real()
            noise = factory.stream(OP_IMPUTE, sweep).standard_normal(
                (n, int(missing.sum())))
            x_new = chain.x.copy()
            x_new[:, 0, missing] = recon[:, 0, missing] \
                + noise / np.sqrt(chain.state.gamma_e[:, :1])
            chain.input_changed(x_new)
        chain.sweep(streams, sweep)
        if sweep % RESYNC_EVERY == 0:
            chain.resync()
        if sweep > schedule.burn_in:
            scores = _per_image_joint(chain)
            better = scores > best_score
            if np.any(better):
                best_score[better] = scores[better]
                s_all = chain.state.weights * chain.state.z_mask
                best_s[better] = s_all[better]
                recon = (chain.x - chain.backend.residual_real())[:, 0]
                best_recon[better] = recon[better]
    return best_s, best_recon


def deconvolve_features(images: np.ndarray, collapsed: CollapsedDictionary,
                        hyper: Hyperparams | None = None,
                        schedule: SamplerSchedule = TEST_SCHEDULE,
                        seed: int = 0,
                        labels: np.ndarray | None = None) -> FeatureSet:
    """Infer MAP activations of every image against the collapsed dictionary
    and unfold them (atom-major, then row-major) into feature vectors."""
    hyper = hyper or Hyperparams()
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    wr, wc = collapsed.feature_grid(x.shape[1], x.shape[2])
    best_s, _ = _run_test_chain(x, collapsed, hyper, schedule, seed)
    feats = best_s.reshape(x.shape[0], collapsed.atoms * wr * wc)
    return FeatureSet(features=feats, atoms=collapsed.atoms, grid_rows=wr,
                      grid_cols=wc, labels=labels)


def _per_image_multinomial_joint(chain: LayerChain) -> np.ndarray:
    """Per-image log joint of a fixed-dictionary multinomial inference chain."""
    from .model import POOL_AT_MOST_ONE, zpos_counts
    st = chain.state
    h = chain.hyper
    p_plane = chain.x.shape[2] * chain.x.shape[3]
    g_e = st.gamma_e
    sq = chain.backend.plane_sq_norms()
    log2pi = np.log(2.0 * np.pi)
    total = np.sum(0.5 * p_plane * (np.log(g_e) - log2pi) - 0.5 * g_e * sq, axis=1)
    total += np.sum(h.a_e * np.log(h.b_e) - gammaln(h.a_e)
                    + (h.a_e - 1.0) * np.log(g_e) - h.b_e * g_e, axis=1)
    gw = st.gamma_w
    w = st.weights
    total += np.sum(0.5 * (np.log(gw) - log2pi) - 0.5 * gw * w * w, axis=(1, 2, 3))
    total += np.sum(h.a_w * np.log(h.b_w) - gammaln(h.a_w)
                    + (h.a_w - 1.0) * np.log(gw) - h.b_w * gw, axis=(1, 2, 3))
    shape = st.pool_shape()
    with_empty = st.pool_regime == POOL_AT_MOST_ONE
    m = shape.size + 1 if with_empty else shape.size
    counts = zpos_counts(st.z_pos, m, with_empty)
    theta = np.clip(st.theta, 1e-300, None)
    total += np.sum(counts * np.log(theta), axis=(1, 2))
    alpha0 = 1.0 / m
    total += np.sum((alpha0 - 1.0) * np.log(theta), axis=(1, 2)) \
        + st.atoms * (gammaln(m * alpha0) - m * gammaln(alpha0))
    return total


def layer_by_layer_features(model: NetworkModel, images: np.ndarray,
                            schedule: SamplerSchedule = TEST_SCHEDULE,
                            seed: int = 0,
                            labels: np.ndarray | None = None) -> FeatureSet:
    """Debug path: deconvolve one layer at a time with the trained
    dictionaries (MAP activations per layer, pooled upward); the unfolded
    top-layer activations are the features."""
    from .gibbs import init_layer_state
    from .model import pool_activations
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    n = x.shape[0]
    hyper = model.hyper
    x_in = x[:, None]
    factory = StreamFactory(seed, STAGE_TEST)
    for li, spec in enumerate(model.specs):
        top = li == model.n_layers - 1
        state = init_layer_state(spec, x_in.shape[1], n, x_in.shape[2],
                                 x_in.shape[3], hyper, factory.stream(9, li), top)
        state.dictionary = model.states[li].dictionary.copy()
        chain = LayerChain(x_in, state, hyper, mode="pretrain",
                           fixed_dictionary=True)
        streams = lambda s, op, atom: factory.stream(li, op, s, atom)  # noqa: E731
        best_score = np.full(n, -np.inf)
        best_state = state.copy()
        for sweep in range(1, schedule.total + 1):
            chain.sweep(streams, sweep)
            if sweep % RESYNC_EVERY == 0:
                chain.resync()
            if sweep > schedule.burn_in:
                if top:
                    scores = _per_image_joint(chain)
                else:
                    scores = _per_image_multinomial_joint(chain)
                better = scores > best_score
                if np.any(better):
                    best_score[better] = scores[better]
                    best_state.weights[better] = state.weights[better]
                    if top:
                        best_state.z_mask[better] = state.z_mask[better]
                    else:
                        best_state.z_pos[better] = state.z_pos[better]
        if top:
            s_top = best_state.weights * best_state.z_mask
            wr, wc = s_top.shape[2:]
            return FeatureSet(features=s_top.reshape(n, -1), atoms=spec.atoms,
                              grid_rows=wr, grid_cols=wc, labels=labels)
        x_in = pool_activations(best_state)
    raise RuntimeError("unreachable")


def truncated_collapse(model: NetworkModel,
                       layers_to_use: int | None = None) -> CollapsedDictionary:
    """Collapsed dictionary of the bottom `layers_to_use` layers."""
    use = model.n_layers if layers_to_use is None else int(layers_to_use)
    if not 1 <= use <= model.n_layers:
        raise ValueError(f"layers_to_use must be in [1, {model.n_layers}]")
    sub = NetworkModel(model.specs[:use], model.hyper, model.rng_seed,
                       model.data_rows, model.data_cols, model.phase,
                       model.states[:use])
    maps = select_ml_pool_maps(model)[:use - 1]
    return project_dictionary(sub, maps)


def interpolate_missing(images: np.ndarray, mask: np.ndarray,
                        source: NetworkModel | CollapsedDictionary,
                        layers_to_use: int | None = None,
                        hyper: Hyperparams | None = None,
                        schedule: SamplerSchedule = TEST_SCHEDULE,
                        seed: int = 0) -> np.ndarray:
    """Complete unobserved pixels (mask 1 = observed) from the MAP
    reconstruction; observed pixels pass through unchanged."""
    if isinstance(source, NetworkModel):
        collapsed = truncated_collapse(source, layers_to_use)
        hyper = hyper or source.hyper
    else:
        collapsed = source
        hyper = hyper or Hyperparams()
    x = np.asarray(images, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    obs = np.asarray(mask).astype(bool)
    _, best_recon = _run_test_chain(x, collapsed, hyper, schedule, seed, mask=obs)
    out = np.where(obs[None], x, best_recon)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate_images(model: NetworkModel, count: int, seed: int = 0, *,
                    use_ml_maps: bool = False) -> np.ndarray:
    """Draw images from the refined generative path: top-layer activations
    from the learned priors (averaged over training images), pooling
    positions from the learned position probabilities, no data-plane noise."""
    if model.phase != PHASE_REFINED:
        raise ValueError("generation expects a refined model")
    factory = StreamFactory(seed, STAGE_GENERATE)
    top = model.states[-1]
    k, wr, wc = top.pi.shape[1:]
    pi_mean = top.pi.mean(axis=0)
    gw_mean = top.gamma_w.mean(axis=0)
    rng = factory.stream(0)
    z = (rng.random((count, k, wr, wc)) < pi_mean[None]).astype(np.float64)
    w = rng.standard_normal((count, k, wr, wc)) / np.sqrt(gw_mean)[None]
    x_above = reconstruct_from(top.dictionary, z * w)
    maps = select_ml_pool_maps(model) if use_ml_maps else None
    for li in range(model.n_layers - 2, -1, -1):
        st = model.states[li]
        shape = st.pool_shape()
        m = shape.size
        br, bc = x_above.shape[2], x_above.shape[3]
        k_here = st.atoms
        theta = np.clip(st.theta[:, :, :m].mean(axis=0), 1e-300, None)
        theta /= theta.sum(axis=1, keepdims=True)   # (K, m)
        if use_ml_maps:
            pos = np.broadcast_to(maps[li][None, :, None, None],
                                  (count, k_here, br, bc)).copy()
        else:
            rng = factory.stream(1, li)
            u = rng.random((count, k_here, br, bc))
            cdf = np.cumsum(theta, axis=1)  # (K, m)
            pos = (u[..., None] > cdf[None, :, None, None, :]).sum(axis=-1)
        pos = np.minimum(pos, m - 1)
        s = np.zeros((count, k_here, br * shape.nx, bc * shape.ny))
        ni, ki, bi, bj = np.indices(pos.shape).reshape(4, -1)
        p = pos.reshape(-1)
        rows = bi * shape.nx + p // shape.ny
        cols = bj * shape.ny + p % shape.ny
        s[ni, ki, rows, cols] = x_above[ni, ki, bi, bj]
        wr_l = st.weights.shape[2]
        wc_l = st.weights.shape[3]
        x_above = reconstruct_from(st.dictionary, s[:, :, :wr_l, :wc_l])
    return x_above[:, 0]
