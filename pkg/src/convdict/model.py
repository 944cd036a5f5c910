"""Model-state containers, shape-chain validation, log-joint density, storage.

A network is an ordered bottom-to-top list of layers. Each non-top layer
carries block-multinomial pooling indicators; the top layer carries a
per-element Bernoulli mask. The log-joint implemented here is the reference
density used for MAP sample selection; no additive constants are dropped
(all normalizers, including gamma/beta/Dirichlet constants, are included),
so values are comparable across phases of one model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import storage
from .pool_ops import PoolShape, indicator_from_positions
from .tensor_ops import batch_convolve_full

PHASE_PRETRAINED = "pretrained"
PHASE_REFINED = "refined"

REGIME_MULTINOMIAL = "multinomial"
REGIME_BERNOULLI = "bernoulli"

POOL_AT_MOST_ONE = "at-most-one"
POOL_EXACTLY_ONE = "exactly-one"

_TINY = 1e-300


@dataclass(frozen=True)
class Hyperparams:
    """Prior hyperparameters; a0/b0 default to 1/K and 1-1/K per layer."""
    a0: float | None = None
    b0: float | None = None
    a_w: float = 1e-6
    b_w: float = 1e-6
    a_d: float = 1e-6
    b_d: float = 1e-6
    a_e: float = 1e-6
    b_e: float = 1e-6

    def __post_init__(self):
        for name in ("a_w", "b_w", "a_d", "b_d", "a_e", "b_e"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("a0", "b0"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0 when given")

    def beta_prior(self, atoms: int) -> tuple[float, float]:
        # default 1/K, 1-1/K degenerates at K=1; require explicit values there
        if atoms < 2 and (self.a0 is None or self.b0 is None):
            raise ValueError("single-atom layer needs explicit a0/b0")
        a0 = self.a0 if self.a0 is not None else 1.0 / atoms
        b0 = self.b0 if self.b0 is not None else 1.0 - 1.0 / atoms
        return a0, b0


@dataclass(frozen=True)
class LayerSpec:
    """Atom count, dictionary spatial size, pooling (absent on top layer)."""
    atoms: int
    dict_rows: int
    dict_cols: int
    pool: PoolShape | None = None

    def __post_init__(self):
        if self.atoms < 1:
            raise ValueError("atoms must be >= 1")
        if self.dict_rows < 1 or self.dict_cols < 1:
            raise ValueError("dictionary dims must be >= 1")


@dataclass
class LayerState:
    """Per-layer latent state, image-batched.

    dictionary (K, depth, dr, dc); weights (N, K, wr, wc);
    z_pos (N, K, br, bc) int16 with -1 = all-zero block (multinomial layers);
    z_mask (N, K, wr, wc) uint8 (bernoulli top layer);
    theta (N, K, M) position probabilities; pi (N, K, wr, wc);
    gamma_w (N, K, wr, wc); gamma_d (K, depth); gamma_e (N, depth).
    """
    regime: str
    dictionary: np.ndarray
    weights: np.ndarray
    gamma_w: np.ndarray
    gamma_d: np.ndarray
    gamma_e: np.ndarray
    z_pos: np.ndarray | None = None
    theta: np.ndarray | None = None
    pool_regime: str = POOL_AT_MOST_ONE
    z_mask: np.ndarray | None = None
    pi: np.ndarray | None = None

    @property
    def n_images(self) -> int:
        return self.weights.shape[0]

    @property
    def atoms(self) -> int:
        return self.dictionary.shape[0]

    @property
    def depth(self) -> int:
        return self.dictionary.shape[1]

    def activations(self) -> np.ndarray:
        """S = Z (.) W, shape (N, K, wr, wc)."""
        if self.regime == REGIME_BERNOULLI:
            return self.weights * self.z_mask
        n, k, wr, wc = self.weights.shape
        z = indicators_from_zpos(self.z_pos, self.pool_shape(), wr, wc)
        return self.weights * z

    def pool_shape(self) -> PoolShape:
        if self.z_pos is None:
            raise ValueError("bernoulli layer has no pool shape")
        br, bc = self.z_pos.shape[2:]
        wr, wc = self.weights.shape[2:]
        return PoolShape(wr // br, wc // bc)

    def copy(self) -> "LayerState":
        return LayerState(
            regime=self.regime,
            dictionary=self.dictionary.copy(),
            weights=self.weights.copy(),
            gamma_w=self.gamma_w.copy(),
            gamma_d=self.gamma_d.copy(),
            gamma_e=self.gamma_e.copy(),
            z_pos=None if self.z_pos is None else self.z_pos.copy(),
            theta=None if self.theta is None else self.theta.copy(),
            pool_regime=self.pool_regime,
            z_mask=None if self.z_mask is None else self.z_mask.copy(),
            pi=None if self.pi is None else self.pi.copy(),
        )


def indicators_from_zpos(z_pos: np.ndarray, shape: PoolShape,
                         wr: int, wc: int) -> np.ndarray:
    """Expand (N, K, br, bc) position codes to (N, K, wr, wc) 0/1 planes."""
    n, k, br, bc = z_pos.shape
    z = np.zeros((n, k, br, shape.nx, bc, shape.ny))
    ni, ki, bi, bj = np.nonzero(z_pos >= 0)
    sel = z_pos[ni, ki, bi, bj]
    z[ni, ki, bi, sel // shape.ny, bj, sel % shape.ny] = 1.0
    return z.reshape(n, k, wr, wc)


@dataclass
class NetworkModel:
    """Ordered layers (bottom to top) plus global settings."""
    specs: list[LayerSpec]
    hyper: Hyperparams
    rng_seed: int
    data_rows: int
    data_cols: int
    phase: str = PHASE_PRETRAINED
    states: list[LayerState] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.specs)

    def top_spec(self) -> LayerSpec:
        return self.specs[-1]


# ---------------------------------------------------------------------------
# Shape chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerShapes:
    in_rows: int
    in_cols: int
    depth: int
    w_rows: int
    w_cols: int
    out_rows: int | None
    out_cols: int | None


def chain_shapes(specs: list[LayerSpec], data_rows: int, data_cols: int) -> list[LayerShapes]:
    """Per-layer shape algebra; raises ValueError on a broken chain."""
    rows, cols, depth = data_rows, data_cols, 1
    out = []
    for i, spec in enumerate(specs):
        wr = rows - spec.dict_rows + 1
        wc = cols - spec.dict_cols + 1
        if wr < 1 or wc < 1:
            raise ValueError(
                f"layer {i}: dictionary {spec.dict_rows}x{spec.dict_cols} "
                f"does not fit input {rows}x{cols}")
        if spec.pool is not None:
            orows = -(-wr // spec.pool.nx)
            ocols = -(-wc // spec.pool.ny)
        else:
            orows = ocols = None
        out.append(LayerShapes(rows, cols, depth, wr, wc, orows, ocols))
        if spec.pool is not None:
            rows, cols, depth = orows, ocols, spec.atoms
    return out


def validate_chain(model: NetworkModel) -> list[str]:
    """All shape-chain violations; empty list iff the configuration is valid."""
    issues: list[str] = []
    rows, cols, depth = model.data_rows, model.data_cols, 1
    for i, spec in enumerate(model.specs):
        top = i == len(model.specs) - 1
        if top and spec.pool is not None:
            issues.append(f"layer {i}: top layer must not declare pooling")
        if not top and spec.pool is None:
            issues.append(f"layer {i}: non-top layer must declare pooling")
        wr = rows - spec.dict_rows + 1
        wc = cols - spec.dict_cols + 1
        if wr < 1 or wc < 1:
            issues.append(
                f"layer {i}: dictionary {spec.dict_rows}x{spec.dict_cols} "
                f"exceeds input {rows}x{cols}")
            break
        if spec.pool is not None:
            if wr % spec.pool.nx or wc % spec.pool.ny:
                issues.append(
                    f"layer {i}: activation {wr}x{wc} not divisible by pool "
                    f"{spec.pool.nx}x{spec.pool.ny} (padding advisory)")
            rows = -(-wr // spec.pool.nx)
            cols = -(-wc // spec.pool.ny)
            depth = spec.atoms
    # state-array consistency against the computed chain
    if model.states:
        try:
            shapes = chain_shapes(model.specs, model.data_rows, model.data_cols)
        except ValueError:
            return issues
        for i, st in enumerate(model.states):
            if st is None:
                continue
            sh = shapes[i]
            spec = model.specs[i]
            if st.dictionary.shape != (spec.atoms, sh.depth, spec.dict_rows, spec.dict_cols):
                issues.append(f"layer {i}: dictionary shape {st.dictionary.shape} != "
                              f"{(spec.atoms, sh.depth, spec.dict_rows, spec.dict_cols)}")
            if st.weights.shape[1:] != (spec.atoms, sh.w_rows, sh.w_cols):
                issues.append(f"layer {i}: weights shape {st.weights.shape} mismatch")
    return issues


# ---------------------------------------------------------------------------
# Log densities (full, no dropped constants)
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_term(residual_sq_sum, n_elems, gamma) -> float:
    """Sum of log N(x; mu, 1/gamma) with per-entry scalar gamma arrays."""
    g = np.asarray(gamma, dtype=np.float64)
    r = np.asarray(residual_sq_sum, dtype=np.float64)
    n = np.asarray(n_elems, dtype=np.float64)
    return float(np.sum(0.5 * n * (np.log(g) - _LOG_2PI) - 0.5 * g * r))


def gamma_prior_term(gamma, a, b) -> float:
    g = np.asarray(gamma, dtype=np.float64)
    return float(np.sum(a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(g) - b * g))


def gaussian_with_gamma_prior(x_sq, gamma, a, b) -> float:
    """gaussian_term(x_sq, 1, gamma) + gamma_prior_term(gamma, a, b) with a
    single log pass over gamma (the per-element arrays get large)."""
    g = np.asarray(gamma, dtype=np.float64)
    n = g.size
    sum_lg = float(np.sum(np.log(g)))
    sum_g = float(np.sum(g))
    sum_gx = float(np.sum(g * np.asarray(x_sq, dtype=np.float64)))
    return (0.5 * sum_lg - 0.5 * n * _LOG_2PI - 0.5 * sum_gx
            + n * (a * float(np.log(b)) - float(gammaln(a)))
            + (a - 1.0) * sum_lg - b * sum_g)


def beta_prior_term(pi, a0, b0) -> float:
    p = np.clip(np.asarray(pi, dtype=np.float64), _TINY, 1.0 - 1e-16)
    const = gammaln(a0 + b0) - gammaln(a0) - gammaln(b0)
    return float(np.sum((a0 - 1.0) * np.log(p) + (b0 - 1.0) * np.log1p(-p) + const))


def bernoulli_term(z, pi) -> float:
    p = np.clip(np.asarray(pi, dtype=np.float64), _TINY, 1.0 - 1e-16)
    zz = np.asarray(z, dtype=np.float64)
    return float(np.sum(zz * np.log(p) + (1.0 - zz) * np.log1p(-p)))


def dirichlet_prior_term(theta, alpha0) -> float:
    t = np.clip(np.asarray(theta, dtype=np.float64), _TINY, None)
    m = t.shape[-1]
    const = gammaln(m * alpha0) - m * gammaln(alpha0)
    per_vec = (alpha0 - 1.0) * np.sum(np.log(t), axis=-1) + const
    return float(np.sum(per_vec))


def categorical_term(theta, counts) -> float:
    """Sum over vectors of counts . log(theta)."""
    t = np.clip(np.asarray(theta, dtype=np.float64), _TINY, None)
    return float(np.sum(np.asarray(counts, dtype=np.float64) * np.log(t)))


def zpos_counts(z_pos: np.ndarray, m_outcomes: int, with_empty_slot: bool) -> np.ndarray:
    """Per-(image, atom) outcome counts from position codes, shape (N, K, M)."""
    n, k = z_pos.shape[:2]
    nblocks = z_pos.shape[2] * z_pos.shape[3]
    flat = z_pos.reshape(n, k, nblocks)
    counts = np.zeros((n, k, m_outcomes))
    offsets = np.where(flat >= 0, flat, m_outcomes - 1 if with_empty_slot else 0)
    if not with_empty_slot and np.any(flat < 0):
        raise ValueError("empty block in exactly-one regime")
    np.add.at(counts.reshape(n * k, m_outcomes),
              (np.repeat(np.arange(n * k), nblocks), offsets.reshape(-1)), 1.0)
    return counts


def reconstruct_from(dictionary: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Sum over atoms of D * S for dictionary (K, depth, dr, dc) and
    activations (N, K, wr, wc); output (N, depth, R, C)."""
    n, k, wr, wc = s.shape
    depth, dr, dc = dictionary.shape[1:]
    out = np.zeros((n, depth, wr + dr - 1, wc + dc - 1))
    if wr * wc <= 4 * dr * dc:
        # scatter shifted dictionary stacks, vectorized over depth
        for kk in range(k):
            d_k = dictionary[kk]
            for a in range(wr):
                for b in range(wc):
                    out[:, :, a:a + dr, b:b + dc] += \
                        s[:, kk, a, b, None, None, None] * d_k[None]
    else:
        for kk in range(k):
            for d in range(depth):
                out[:, d] += batch_convolve_full(dictionary[kk, d], s[:, kk])
    return out


def reconstruct_input(state: LayerState) -> np.ndarray:
    """Sum over atoms of D * S, shape (N, depth, R, C)."""
    return reconstruct_from(state.dictionary, state.activations())


def pool_activations(state: LayerState) -> np.ndarray:
    """Next layer's input: per-plane block pooling of S, shape (N, K, br, bc)."""
    s = state.activations()
    shape = state.pool_shape()
    n, k, wr, wc = s.shape
    return s.reshape(n, k, wr // shape.nx, shape.nx, wc // shape.ny, shape.ny).sum(axis=(3, 5))


def layer_prior_terms(state: LayerState, hyper: Hyperparams) -> float:
    """Every prior term of one layer in the layered (pretraining) model,
    excluding the input-fit Gaussian."""
    total = gamma_prior_term(state.gamma_e, hyper.a_e, hyper.b_e)
    d_sq = np.sum(state.dictionary ** 2, axis=(2, 3))
    p_dict = state.dictionary.shape[2] * state.dictionary.shape[3]
    total += gaussian_term(d_sq, p_dict, state.gamma_d)
    total += gamma_prior_term(state.gamma_d, hyper.a_d, hyper.b_d)
    total += gaussian_with_gamma_prior(state.weights ** 2, state.gamma_w,
                                       hyper.a_w, hyper.b_w)
    if state.regime == REGIME_BERNOULLI:
        a0, b0 = hyper.beta_prior(state.atoms)
        total += bernoulli_term(state.z_mask, state.pi)
        total += beta_prior_term(state.pi, a0, b0)
    else:
        shape = state.pool_shape()
        with_empty = state.pool_regime == POOL_AT_MOST_ONE
        m = shape.size + 1 if with_empty else shape.size
        counts = zpos_counts(state.z_pos, m, with_empty)
        total += categorical_term(state.theta, counts)
        total += dirichlet_prior_term(state.theta, 1.0 / m)
    return total


def layer_local_log_joint(state: LayerState, x_input: np.ndarray,
                          hyper: Hyperparams) -> float:
    """Likelihood of this layer's input plus all of the layer's prior terms."""
    recon = reconstruct_input(state)
    resid = x_input - recon
    p_plane = resid.shape[2] * resid.shape[3]
    total = gaussian_term(np.sum(resid * resid, axis=(2, 3)), p_plane, state.gamma_e)
    return total + layer_prior_terms(state, hyper)


def _refined_layer_terms(state: LayerState, hyper: Hyperparams, top: bool) -> float:
    """Prior terms of one layer in the refined model (no intermediate W priors)."""
    total = 0.0
    d_sq = np.sum(state.dictionary ** 2, axis=(2, 3))
    p_dict = state.dictionary.shape[2] * state.dictionary.shape[3]
    total += gaussian_term(d_sq, p_dict, state.gamma_d)
    total += gamma_prior_term(state.gamma_d, hyper.a_d, hyper.b_d)
    if top:
        total += gaussian_term(state.weights ** 2, 1.0, state.gamma_w)
        total += gamma_prior_term(state.gamma_w, hyper.a_w, hyper.b_w)
        a0, b0 = hyper.beta_prior(state.atoms)
        total += bernoulli_term(state.z_mask, state.pi)
        total += beta_prior_term(state.pi, a0, b0)
    else:
        shape = state.pool_shape()
        with_empty = state.pool_regime == POOL_AT_MOST_ONE
        m = shape.size + 1 if with_empty else shape.size
        counts = zpos_counts(state.z_pos, m, with_empty)
        total += categorical_term(state.theta, counts)
        total += dirichlet_prior_term(state.theta, 1.0 / m)
    return total


def compose_top_down(model: NetworkModel) -> np.ndarray:
    """Deterministic refined-phase composition down to the data plane.

    Returns the data-plane reconstruction (N, rows, cols). Each non-top
    layer's activation values are the convolution output of the layer above,
    scattered through its pooling indicators.
    """
    top = model.states[-1]
    x_above = reconstruct_input(top)  # input of the top layer, (N, K_{L-1}, r, c)
    for li in range(model.n_layers - 2, -1, -1):
        st = model.states[li]
        shape = st.pool_shape()
        n, k, wr, wc = st.weights.shape
        z = indicators_from_zpos(st.z_pos, shape, wr, wc)
        vals = np.repeat(np.repeat(x_above, shape.nx, axis=2), shape.ny, axis=3)
        s = z * vals[:, :, :wr, :wc]
        x_above = reconstruct_from(st.dictionary, s)
    return x_above[:, 0]


def log_joint(model: NetworkModel, data: np.ndarray) -> float:
    """Full joint log density of the model state given the data.

    Pretrained phase: sum of per-layer local joints, each layer's input being
    the pooled activations of the layer below. Refined phase: Gaussian data
    fit of the deterministic top-down composition plus every prior term.
    Raises ValueError on non-finite state.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if not model.states or any(s is None for s in model.states):
        raise ValueError("model has no sampled state")
    total = 0.0
    if model.phase == PHASE_PRETRAINED:
        x_in = x[:, None]
        for li, st in enumerate(model.states):
            total += layer_local_log_joint(st, x_in, model.hyper)
            if li < model.n_layers - 1:
                x_in = pool_activations(st)
    else:
        recon = compose_top_down(model)
        resid = x - recon
        p = x.shape[1] * x.shape[2]
        g_e = model.states[0].gamma_e[:, 0]
        total += gaussian_term(np.sum(resid * resid, axis=(1, 2)), p, g_e)
        total += gamma_prior_term(g_e, model.hyper.a_e, model.hyper.b_e)
        for li, st in enumerate(model.states):
            total += _refined_layer_terms(st, model.hyper, top=li == model.n_layers - 1)
    if not np.isfinite(total):
        raise ValueError("log joint is not finite")
    return float(total)


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------

def state_to_tensors(st: LayerState, prefix: str, header: dict, tensors: dict) -> None:
    header[f"{prefix}.regime"] = st.regime
    header[f"{prefix}.pool_regime"] = st.pool_regime
    tensors[f"{prefix}.dictionary"] = st.dictionary
    tensors[f"{prefix}.weights"] = st.weights
    tensors[f"{prefix}.gamma_w"] = st.gamma_w
    tensors[f"{prefix}.gamma_d"] = st.gamma_d
    tensors[f"{prefix}.gamma_e"] = st.gamma_e
    if st.regime == REGIME_MULTINOMIAL:
        tensors[f"{prefix}.z_pos"] = st.z_pos.astype(np.float64)
        tensors[f"{prefix}.theta"] = st.theta
    else:
        tensors[f"{prefix}.z_mask"] = st.z_mask.astype(np.float64)
        tensors[f"{prefix}.pi"] = st.pi


def state_from_tensors(prefix: str, header: dict, tensors: dict) -> LayerState:
    regime = header[f"{prefix}.regime"]
    st = LayerState(
        regime=regime,
        dictionary=tensors[f"{prefix}.dictionary"],
        weights=tensors[f"{prefix}.weights"],
        gamma_w=tensors[f"{prefix}.gamma_w"],
        gamma_d=tensors[f"{prefix}.gamma_d"],
        gamma_e=tensors[f"{prefix}.gamma_e"],
        pool_regime=header[f"{prefix}.pool_regime"],
    )
    if regime == REGIME_MULTINOMIAL:
        st.z_pos = tensors[f"{prefix}.z_pos"].astype(np.int16)
        st.theta = tensors[f"{prefix}.theta"]
    else:
        st.z_mask = tensors[f"{prefix}.z_mask"].astype(np.uint8)
        st.pi = tensors[f"{prefix}.pi"]
    return st


def save_model(model: NetworkModel, path: str) -> None:
    header: dict = {
        "format": "convdict-model-v1",
        "phase": model.phase,
        "seed": model.rng_seed,
        "data_rows": model.data_rows,
        "data_cols": model.data_cols,
        "layers": model.n_layers,
    }
    for name in ("a0", "b0", "a_w", "b_w", "a_d", "b_d", "a_e", "b_e"):
        v = getattr(model.hyper, name)
        header[f"hyper.{name}"] = "none" if v is None else repr(v)
    tensors: dict = {}
    for i, (spec, st) in enumerate(zip(model.specs, model.states)):
        p = f"layer{i}"
        header[f"{p}.atoms"] = spec.atoms
        header[f"{p}.dict_rows"] = spec.dict_rows
        header[f"{p}.dict_cols"] = spec.dict_cols
        header[f"{p}.pool"] = "none" if spec.pool is None else f"{spec.pool.nx}x{spec.pool.ny}"
        state_to_tensors(st, p, header, tensors)
    storage.write_dir(path, header, tensors)


def load_model(path: str) -> NetworkModel:
    header, tensors = storage.read_dir(path)
    if header.get("format") != "convdict-model-v1":
        raise storage.StorageError(f"{path}: not a model directory")
    hyper_kwargs = {}
    for name in ("a0", "b0", "a_w", "b_w", "a_d", "b_d", "a_e", "b_e"):
        v = header[f"hyper.{name}"]
        hyper_kwargs[name] = None if v == "none" else float(v)
    n_layers = int(header["layers"])
    specs, states = [], []
    for i in range(n_layers):
        p = f"layer{i}"
        pool_s = header[f"{p}.pool"]
        pool = None
        if pool_s != "none":
            nx, ny = pool_s.split("x")
            pool = PoolShape(int(nx), int(ny))
        specs.append(LayerSpec(atoms=int(header[f"{p}.atoms"]),
                               dict_rows=int(header[f"{p}.dict_rows"]),
                               dict_cols=int(header[f"{p}.dict_cols"]),
                               pool=pool))
        states.append(state_from_tensors(p, header, tensors))
    return NetworkModel(
        specs=specs,
        hyper=Hyperparams(**hyper_kwargs),
        rng_seed=int(header["seed"]),
        data_rows=int(header["data_rows"]),
        data_cols=int(header["data_cols"]),
        phase=header["phase"],
        states=states,
    )
