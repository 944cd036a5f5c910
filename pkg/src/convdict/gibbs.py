"""Gibbs training: bottom-up pretraining, top-down refinement, pruning.

Pretraining learns one layer at a time against the pooled MAP activations of
the layer below; each layer's reported state is the collected sample with the
highest layer-local log joint. Refinement runs a joint chain over all layers
in which the values carried between layers are free variables coupled to the
layer-above reconstruction through an auxiliary precision; reported samples
are scored (and the winner stored) under the noiseless top-down composition.

Identical seed and schedule reproduce every draw bit-exactly, including
across checkpoint resume, because streams are derived from coordinates
rather than consumed from a shared sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from . import storage
from .engine import LayerChain
from .model import Hyperparams, LayerSpec, LayerState, NetworkModel, \
    PHASE_PRETRAINED, PHASE_REFINED, POOL_AT_MOST_ONE, POOL_EXACTLY_ONE, \
    REGIME_BERNOULLI, REGIME_MULTINOMIAL
from .pool_ops import PoolShape
from .rng import STAGE_INIT, STAGE_PRETRAIN, STAGE_REFINE, StreamFactory

logger = logging.getLogger("convdict")

RESYNC_EVERY = 25  # sweeps between exact residual refreshes


@dataclass(frozen=True)
class SamplerSchedule:
    """Burn-in and collection sweep counts."""
    burn_in: int
    collect: int
    regime: str = "pretrain"  # pretrain | refine | test

    def __post_init__(self):
        if self.burn_in < 1 or self.collect < 1:
            raise ValueError("burn_in and collect must be >= 1")

    @property
    def total(self) -> int:
        return self.burn_in + self.collect


PRETRAIN_SCHEDULE = SamplerSchedule(1500, 500, "pretrain")
REFINE_SCHEDULE = SamplerSchedule(1500, 500, "refine")
TEST_SCHEDULE = SamplerSchedule(500, 200, "test")


# ---------------------------------------------------------------------------
# Spec-level sampler ops (thin wrappers over the chain; used by the
# conditional-correctness suite)
# ---------------------------------------------------------------------------

def sample_dictionary(chain: LayerChain, rng: np.random.Generator) -> None:
    chain.sample_dictionary(rng)


def sample_weights(chain: LayerChain, k: int, rng: np.random.Generator) -> None:
    chain.sample_weights(k, rng)


def sample_pool_indicators(chain: LayerChain, k: int, rng: np.random.Generator) -> None:
    chain.sample_indicators(k, rng)


def sample_bernoulli_top(chain: LayerChain, k: int, rng: np.random.Generator) -> None:
    chain.sample_indicators(k, rng)
    chain.sample_pi(k, rng)


def sample_theta(chain: LayerChain, rng: np.random.Generator) -> None:
    chain.sample_position_probs(rng)


def sample_precisions(chain: LayerChain, rng: np.random.Generator) -> None:
    chain.sample_precisions(rng)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

EMPTY_START_MASS = 0.9  # initial position-probability mass on the empty slot


def init_layer_state(spec: LayerSpec, depth: int, n_images: int,
                     in_rows: int, in_cols: int, hyper: Hyperparams,
                     rng: np.random.Generator, top: bool,
                     x_input: np.ndarray | None = None) -> LayerState:
    """Fresh pretraining state.

    The dictionary starts from unit-norm random input patches when the input
    is given (a prior draw otherwise): a prior-scale dictionary leaves the
    first sweeps fitting nothing, the noise precision then collapses and the
    activation energies flatten, which lets runaway prior-drawn weights into
    the model (see the decisions ledger). Weights start at zero, indicators
    empty, position probabilities near the empty slot, precisions at prior
    means.
    """
    wr = in_rows - spec.dict_rows + 1
    wc = in_cols - spec.dict_cols + 1
    gamma_d0 = hyper.a_d / hyper.b_d
    if x_input is not None and x_input.shape[0] > 0:
        dictionary = np.empty((spec.atoms, depth, spec.dict_rows, spec.dict_cols))
        for k in range(spec.atoms):
            ni = int(rng.integers(x_input.shape[0]))
            r = int(rng.integers(wr))
            c = int(rng.integers(wc))
            patch = x_input[ni, :, r:r + spec.dict_rows, c:c + spec.dict_cols]
            patch = patch + 0.02 * rng.standard_normal(patch.shape)
            norm = float(np.sqrt(np.sum(patch * patch)))
            if norm < 1e-8:
                patch = rng.standard_normal(patch.shape)
                norm = float(np.sqrt(np.sum(patch * patch)))
            dictionary[k] = patch / norm
    else:
        dictionary = rng.standard_normal((spec.atoms, depth, spec.dict_rows,
                                          spec.dict_cols)) / np.sqrt(gamma_d0)
    common = dict(
        dictionary=dictionary,
        weights=np.zeros((n_images, spec.atoms, wr, wc)),
        gamma_w=np.full((n_images, spec.atoms, wr, wc), hyper.a_w / hyper.b_w),
        gamma_d=np.full((spec.atoms, depth), gamma_d0),
        gamma_e=np.full((n_images, depth), hyper.a_e / hyper.b_e),
    )
    if top:
        a0, b0 = hyper.beta_prior(spec.atoms)
        return LayerState(
            regime=REGIME_BERNOULLI,
            z_mask=np.zeros((n_images, spec.atoms, wr, wc), dtype=np.uint8),
            pi=np.full((n_images, spec.atoms, wr, wc), a0 / (a0 + b0)),
            **common)
    if spec.pool is None:
        raise ValueError("non-top layer needs a pool shape")
    if wr % spec.pool.nx or wc % spec.pool.ny:
        raise ValueError(
            f"activations {wr}x{wc} not divisible by pool {spec.pool.nx}x{spec.pool.ny}; "
            "choose dimensions that divide (padding is only supported by the "
            "pooling operators, not the training engine)")
    br, bc = wr // spec.pool.nx, wc // spec.pool.ny
    m = spec.pool.size + 1
    theta = np.full((n_images, spec.atoms, m),
                    (1.0 - EMPTY_START_MASS) / (m - 1))
    theta[:, :, m - 1] = EMPTY_START_MASS
    return LayerState(
        regime=REGIME_MULTINOMIAL,
        z_pos=np.full((n_images, spec.atoms, br, bc), -1, dtype=np.int16),
        theta=theta,
        pool_regime=POOL_AT_MOST_ONE,
        **common)


# ---------------------------------------------------------------------------
# Scores and usage
# ---------------------------------------------------------------------------

def chain_local_log_joint(chain: LayerChain) -> float:
    """Layer-local joint from maintained residual norms (matches
    model.layer_local_log_joint up to floating-point association)."""
    p_plane = chain.x.shape[2] * chain.x.shape[3]
    fit = M.gaussian_term(chain.backend.plane_sq_norms(), p_plane,
                          chain.state.gamma_e)
    return fit + M.layer_prior_terms(chain.state, chain.hyper)


def atom_usage(state: LayerState) -> np.ndarray:
    """Fraction of nonzero indicators per atom, over images and blocks."""
    if state.regime == REGIME_BERNOULLI:
        return state.z_mask.mean(axis=(0, 2, 3))
    return (state.z_pos >= 0).mean(axis=(0, 2, 3))


def prune_atoms(model: NetworkModel, usage_threshold: float,
                layers: list[int] | None = None) -> NetworkModel:
    """Drop atoms whose indicator usage falls below the threshold.

    Pruning a non-top layer also slices the matching input planes out of the
    layer above. The resulting chain is revalidated.
    """
    specs = list(model.specs)
    states = [st.copy() for st in model.states]
    for li in (range(model.n_layers) if layers is None else layers):
        st = states[li]
        usage = atom_usage(st)
        keep = np.flatnonzero(usage >= usage_threshold)
        if keep.size == 0:
            raise ValueError(f"layer {li}: pruning at {usage_threshold} removes every atom")
        if keep.size == st.atoms:
            continue
        st.dictionary = st.dictionary[keep]
        st.weights = st.weights[:, keep]
        st.gamma_w = st.gamma_w[:, keep]
        st.gamma_d = st.gamma_d[keep]
        if st.regime == REGIME_BERNOULLI:
            st.z_mask = st.z_mask[:, keep]
            st.pi = st.pi[:, keep]
        else:
            st.z_pos = st.z_pos[:, keep]
            st.theta = st.theta[:, keep]
        specs[li] = replace(specs[li], atoms=int(keep.size))
        if li + 1 < len(states):
            up = states[li + 1]
            up.dictionary = up.dictionary[:, keep]
            up.gamma_d = up.gamma_d[:, keep]
            up.gamma_e = up.gamma_e[:, keep]
    out = NetworkModel(specs, model.hyper, model.rng_seed, model.data_rows,
                       model.data_cols, model.phase, states)
    issues = M.validate_chain(out)
    if issues:
        raise ValueError("pruned model fails chain validation: " + "; ".join(issues))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_checkpoint(path: str, stage: str, layer_index: int, sweep: int,
                      best_score: float, done: list[LayerState],
                      current: list[LayerState],
                      best: list[LayerState] | None) -> None:
    header = {"format": "convdict-checkpoint-v1", "stage": stage,
              "layer_index": layer_index, "sweep": sweep,
              "best_score": repr(best_score), "n_done": len(done),
              "n_current": len(current),
              "n_best": 0 if best is None else len(best)}
    tensors: dict = {}
    for i, st in enumerate(done):
        M.state_to_tensors(st, f"done{i}", header, tensors)
    for i, st in enumerate(current):
        M.state_to_tensors(st, f"current{i}", header, tensors)
    for i, st in enumerate(best or []):
        M.state_to_tensors(st, f"best{i}", header, tensors)
    storage.write_dir(path, header, tensors)


def _read_checkpoint(path: str):
    header, tensors = storage.read_dir(path)
    if header.get("format") != "convdict-checkpoint-v1":
        raise storage.StorageError(f"{path}: not a checkpoint")
    done = [M.state_from_tensors(f"done{i}", header, tensors)
            for i in range(int(header["n_done"]))]
    current = [M.state_from_tensors(f"current{i}", header, tensors)
               for i in range(int(header["n_current"]))]
    n_best = int(header["n_best"])
    best = [M.state_from_tensors(f"best{i}", header, tensors)
            for i in range(n_best)] if n_best else None
    return (header["stage"], int(header["layer_index"]), int(header["sweep"]),
            float(header["best_score"]), done, current, best)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

def pretrain(data: np.ndarray, specs: list[LayerSpec], hyper: Hyperparams,
             schedule: SamplerSchedule = PRETRAIN_SCHEDULE, seed: int = 0, *,
             prune_thresholds: list[float] | None = None,
             log_every: int = 25,
             checkpoint_dir: str | None = None,
             checkpoint_every: int = 0,
             resume: bool = False,
             trace: list | None = None) -> NetworkModel:
    """Bottom-up layer-at-a-time Gibbs learning with per-layer MAP selection.

    trace, when given, receives ("pretrain", layer, sweep, score) tuples for
    every collected sweep."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    n = x.shape[0]
    model = NetworkModel(list(specs), hyper, seed, x.shape[1], x.shape[2],
                         PHASE_PRETRAINED, [])
    issues = [s for s in M.validate_chain(model) if "padding advisory" not in s]
    if issues:
        raise ValueError("invalid layer chain: " + "; ".join(issues))

    resume_state = None
    if resume and checkpoint_dir:
        try:
            resume_state = _read_checkpoint(checkpoint_dir)
        except (OSError, storage.StorageError):
            resume_state = None

    states: list[LayerState] = []
    out_specs: list[LayerSpec] = []
    start_layer, start_sweep = 0, 1
    current = best = None
    best_score = -np.inf
    if resume_state is not None:
        stage, li0, sweep0, sc0, done, cur_list, best_list = resume_state
        if stage == "pretrain" and li0 < len(specs):
            states = done
            current = cur_list[0]
            best = best_list[0] if best_list else None
            best_score = sc0
            start_layer, start_sweep = li0, sweep0 + 1

    for li in range(len(specs)):
        spec = specs[li]
        top = li == len(specs) - 1
        # recompose this layer's input from the layers already kept
        x_in = x[:, None]
        for st_done in states:
            x_in = M.pool_activations(st_done)
        if li < start_layer:
            out_specs.append(replace(spec, atoms=states[li].atoms))
            continue
        init_rng = StreamFactory(seed, STAGE_INIT, li).stream(0)
        if li == start_layer and current is not None:
            state = current
            first_sweep = start_sweep
        else:
            state = init_layer_state(spec, x_in.shape[1], n, x_in.shape[2],
                                     x_in.shape[3], hyper, init_rng, top,
                                     x_input=x_in)
            first_sweep = 1
            best, best_score = None, -np.inf
        chain = LayerChain(x_in, state, hyper, mode="pretrain")
        factory = StreamFactory(seed, STAGE_PRETRAIN, li)
        streams = lambda sweep, op, atom: factory.stream(op, sweep, atom)  # noqa: E731
        for sweep in range(first_sweep, schedule.total + 1):
            chain.sweep(streams, sweep)
            if sweep % RESYNC_EVERY == 0:
                chain.resync()
            collecting = sweep > schedule.burn_in
            score = None
            if collecting or sweep % log_every == 0 or sweep == 1:
                score = chain_local_log_joint(chain)
                res = float(np.sqrt(np.sum(chain.backend.plane_sq_norms())))
                logger.info("pretrain layer=%d iter=%d log_joint=%.6e residual=%.6e",
                            li, sweep, score, res)
            if collecting:
                if trace is not None:
                    trace.append(("pretrain", li, sweep, score))
                if score > best_score:
                    best_score = score
                    best = state.copy()
            if checkpoint_dir and checkpoint_every and sweep % checkpoint_every == 0:
                # a resumed run rebuilds the residual from the stored state,
                # so realign this run's float state the same way
                chain.resync()
                _write_checkpoint(checkpoint_dir, "pretrain", li, sweep,
                                  best_score, states, [state],
                                  None if best is None else [best])
        states.append(best)
        out_specs.append(spec)
        current = None
        if prune_thresholds and prune_thresholds[li] > 0:
            partial = NetworkModel(out_specs[:], hyper, seed, x.shape[1], x.shape[2],
                                   PHASE_PRETRAINED, states[:])
            partial = prune_atoms(partial, prune_thresholds[li], layers=[li])
            states = partial.states
            out_specs = list(partial.specs)
            logger.info("pretrain layer=%d pruned to %d atoms", li, out_specs[li].atoms)
    return NetworkModel(out_specs, hyper, seed, x.shape[1], x.shape[2],
                        PHASE_PRETRAINED, states)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def _upsample_grid(vals: np.ndarray, shape: PoolShape) -> np.ndarray:
    """Block-constant expansion of (N, K, br, bc) to (N, K, wr, wc)."""
    return np.repeat(np.repeat(vals, shape.nx, axis=2), shape.ny, axis=3)


def _prepare_refined_states(model: NetworkModel, allow_empty: bool) -> list[LayerState]:
    """Initialize refinement from a pretrained model: position probabilities
    renormalized to the position-only simplex, empty blocks filled at the
    most probable position, value grids set to the pooled activations."""
    states = [st.copy() for st in model.states]
    for li in range(model.n_layers - 1):
        st = states[li]
        shape = st.pool_shape()
        if not allow_empty:
            m = shape.size
            theta = st.theta[:, :, :m]
            theta = theta / np.clip(theta.sum(axis=2, keepdims=True), 1e-300, None)
            st.theta = theta
            fill = np.argmax(theta, axis=2).astype(np.int16)  # (N, K)
            empty = st.z_pos < 0
            st.z_pos = np.where(empty, fill[:, :, None, None], st.z_pos).astype(np.int16)
            st.pool_regime = POOL_EXACTLY_ONE
        vals = M.pool_activations(st)
        st.weights = _upsample_grid(vals, shape)
    return states


def refined_score(model_like: NetworkModel, data: np.ndarray) -> float:
    return M.log_joint(model_like, data)


def _project_values(states: list[LayerState]) -> list[LayerState]:
    """Make value grids equal to the layer-above reconstruction (top-down)."""
    proj = [st.copy() for st in states]
    x_above = M.reconstruct_input(proj[-1])
    for li in range(len(states) - 2, -1, -1):
        st = proj[li]
        shape = st.pool_shape()
        st.weights = _upsample_grid(x_above, shape)
        x_above = M.reconstruct_input(st)
    return proj


def refine(model: NetworkModel, data: np.ndarray,
           schedule: SamplerSchedule = REFINE_SCHEDULE, *,
           allow_empty: bool = False,
           log_every: int = 25,
           checkpoint_dir: str | None = None,
           checkpoint_every: int = 0,
           resume: bool = False,
           trace: list | None = None) -> NetworkModel:
    """Top-down joint refinement; returns the MAP sample under the
    noiseless-composition log joint. trace receives ("refine", 0, sweep,
    score) tuples for collected sweeps."""
    if model.phase != PHASE_PRETRAINED:
        raise ValueError("refine expects a pretrained model")
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    seed = model.rng_seed
    hyper = model.hyper
    L = model.n_layers

    states = _prepare_refined_states(model, allow_empty)
    start_sweep = 1
    best_states = None
    best_score = -np.inf
    if resume and checkpoint_dir:
        try:
            stage, _, sweep0, sc, _, cur_list, best_list = _read_checkpoint(checkpoint_dir)
            if stage == "refine":
                states = cur_list
                best_states = best_list
                best_score = sc
                start_sweep = sweep0 + 1
        except (OSError, storage.StorageError):
            pass

    chains: list[LayerChain] = []
    for li in range(L):
        if li == 0:
            target = x[:, None]
        else:
            target = M.pool_activations(states[li - 1])
        mode = "pretrain" if li == L - 1 else "refine"
        chains.append(LayerChain(target, states[li], hyper, mode=mode,
                                 allow_empty=allow_empty))

    factory = StreamFactory(seed, STAGE_REFINE)
    out_model = NetworkModel(list(model.specs), hyper, seed, model.data_rows,
                             model.data_cols, PHASE_REFINED, states)

    for sweep in range(start_sweep, schedule.total + 1):
        # top layer: plain Gibbs against its current value planes
        top = chains[-1]
        top_streams = lambda s, op, atom: factory.stream(L - 1, op, s, atom)  # noqa: E731
        top.sweep(top_streams, sweep)
        # descend: positions, values, dictionary, probabilities, precisions
        for li in range(L - 2, -1, -1):
            ch = chains[li]
            above = chains[li + 1]
            manifest = above.x - above.backend.residual_real()  # (N, K_li, br, bc)
            coupling = above.state.gamma_e  # (N, K_li)
            for k in range(ch.state.atoms):
                ch.sample_indicators(k, factory.stream(li, 0, sweep, k))
                ch.sample_parent_values(k, factory.stream(li, 1, sweep, k),
                                        manifest[:, k], coupling[:, k])
            ch.sample_dictionary(factory.stream(li, 2, sweep, 0))
            ch.sample_position_probs(factory.stream(li, 3, sweep, 0))
            ch.sample_precisions(factory.stream(li, 4, sweep, 0),
                                 update_gamma_w=False)
            above.input_changed(M.pool_activations(ch.state))
        if sweep % RESYNC_EVERY == 0:
            for ch in chains:
                ch.resync()
        collecting = sweep > schedule.burn_in
        if collecting or sweep % log_every == 0 or sweep == 1:
            score = refined_score(out_model, x)
            res = float(np.sqrt(np.sum(chains[0].backend.plane_sq_norms())))
            logger.info("refine iter=%d log_joint=%.6e residual=%.6e",
                        sweep, score, res)
            if collecting:
                if trace is not None:
                    trace.append(("refine", 0, sweep, score))
                if score > best_score:
                    best_score = score
                    best_states = [st.copy() for st in states]
        if checkpoint_dir and checkpoint_every and sweep % checkpoint_every == 0:
            for ch in chains:
                ch.resync()
            _write_checkpoint(checkpoint_dir, "refine", 0, sweep, best_score,
                              [], states, best_states)
    if best_states is None:
        best_states = [st.copy() for st in states]
    # store the winner in self-consistent (projected) form
    final_states = _project_values(best_states)
    return NetworkModel(list(model.specs), hyper, seed, model.data_rows,
                        model.data_cols, PHASE_REFINED, final_states)
