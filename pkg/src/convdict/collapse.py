"""Projection of top-layer dictionary atoms to the data plane.

Replacing each layer's stochastic in-block pooling choice with a single
maximum-likelihood position makes the whole multi-layer composition a plain
sum of convolutions, so the top-layer atoms collapse to data-scale filters.
The projection is exact whenever the sampled pooling agrees with the chosen
deterministic maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import storage
from .model import NetworkModel
from .pool_ops import PoolShape, indicator_from_positions, upsample_replicate, zero_insert
from .tensor_ops import convolve_auto


@dataclass
class CollapsedDictionary:
    """Data-plane filters for every top-layer atom, plus the deterministic
    pooling maps and composite upsample ratio that produced them."""
    filters: np.ndarray          # (K_top, rows, cols)
    maps: list[np.ndarray]       # per non-top layer: (K_layer,) in-block positions
    ratio: tuple[int, int]       # product of pool dims across non-top layers
    pools: list[PoolShape]       # pool shape per non-top layer

    @property
    def atoms(self) -> int:
        return self.filters.shape[0]

    def feature_grid(self, data_rows: int, data_cols: int) -> tuple[int, int]:
        """Activation-grid dims of the collapsed single-layer model."""
        wr = data_rows - self.filters.shape[1] + 1
        wc = data_cols - self.filters.shape[2] + 1
        if wr < 1 or wc < 1:
            raise ValueError("collapsed filters exceed the image")
        return wr, wc


def select_ml_pool_maps(model: NetworkModel) -> list[np.ndarray]:
    """Per (non-top layer, atom): the position maximizing the summed log of
    the learned position probabilities over all images (ties: lowest index)."""
    maps = []
    for li in range(model.n_layers - 1):
        st = model.states[li]
        m = st.pool_shape().size
        theta = np.clip(st.theta[:, :, :m], 1e-300, None)
        scores = np.log(theta).sum(axis=0)  # (K, m)
        maps.append(np.argmax(scores, axis=1).astype(np.int64))
    return maps


def project_dictionary(model: NetworkModel, maps: list[np.ndarray]) -> CollapsedDictionary:
    """Collapse the layer stack into one data-plane filter per top atom.

    Working bottom-up: each layer's atoms are expanded to the scale of the
    accumulated grid (block replication masked by the deterministic map,
    then zero insertion at the accumulated ratio) and convolved into the
    filters from below, summing over matching plane indices.
    """
    if len(maps) != model.n_layers - 1:
        raise ValueError(f"need {model.n_layers - 1} map sets, got {len(maps)}")
    st0 = model.states[0]
    if st0.depth != 1:
        raise ValueError("bottom layer must sit on the data plane")
    filters = [st0.dictionary[k, 0] for k in range(st0.atoms)]
    rx, ry = 1, 1
    pools = []
    for li in range(1, model.n_layers):
        below = model.states[li - 1]
        pool = below.pool_shape()
        pools.append(pool)
        st = model.states[li]
        k_prev, k_here = below.atoms, st.atoms
        if st.depth != k_prev or maps[li - 1].shape[0] != k_prev:
            raise ValueError(f"layer {li}: plane count mismatch")
        new_filters = []
        masks = []
        for kp in range(k_prev):
            rows = st.dictionary.shape[2] * pool.nx
            cols = st.dictionary.shape[3] * pool.ny
            pos = np.full((st.dictionary.shape[2], st.dictionary.shape[3]),
                          maps[li - 1][kp], dtype=np.int64)
            masks.append(indicator_from_positions(pos, pool, rows, cols))
        for kh in range(k_here):
            acc = None
            for kp in range(k_prev):
                up = upsample_replicate(st.dictionary[kh, kp], pool) * masks[kp]
                if rx > 1 or ry > 1:
                    up = zero_insert(up, PoolShape(rx, ry))
                term = convolve_auto(filters[kp], up)
                acc = term if acc is None else acc + term
            new_filters.append(acc)
        filters = new_filters
        rx *= pool.nx
        ry *= pool.ny
    return CollapsedDictionary(filters=np.stack(filters), maps=list(maps),
                               ratio=(rx, ry), pools=pools)


def collapsed_reconstruct(collapsed: CollapsedDictionary,
                          s_top: np.ndarray) -> np.ndarray:
    """Data-plane reconstruction from native-grid top activations (K, sr, sc):
    sum of filters convolved with the zero-inserted activation maps."""
    shape = PoolShape(*collapsed.ratio)
    acc = None
    for k in range(collapsed.atoms):
        term = convolve_auto(collapsed.filters[k], zero_insert(s_top[k], shape))
        acc = term if acc is None else acc + term
    return acc


def visualize_atoms(collapsed: CollapsedDictionary,
                    threshold_quantile: float | None = None
                    ) -> tuple[list[np.ndarray], np.ndarray]:
    """Min-max normalized 8-bit images, one per atom, plus a tiled sheet.

    With a threshold quantile, normalized values below that quantile are
    forced to black.
    """
    images = []
    for k in range(collapsed.atoms):
        a = collapsed.filters[k]
        lo, hi = float(a.min()), float(a.max())
        norm = (a - lo) / (hi - lo) if hi > lo else np.full_like(a, 0.5)
        if threshold_quantile is not None:
            t = np.quantile(norm, threshold_quantile)
            norm = np.where(norm < t, 0.0, norm)
        images.append(np.clip(np.round(norm * 255.0), 0, 255).astype(np.uint8))
    per_row = int(np.ceil(np.sqrt(len(images))))
    rows, cols = images[0].shape
    sheet = np.zeros((per_row * (rows + 1) + 1, per_row * (cols + 1) + 1),
                     dtype=np.uint8)
    for i, img in enumerate(images):
        r = (i // per_row) * (rows + 1) + 1
        c = (i % per_row) * (cols + 1) + 1
        sheet[r:r + rows, c:c + cols] = img
    return images, sheet


def save_collapsed(collapsed: CollapsedDictionary, path: str) -> None:
    header = {
        "format": "convdict-collapsed-v1",
        "atoms": collapsed.atoms,
        "ratio": f"{collapsed.ratio[0]}x{collapsed.ratio[1]}",
        "map_layers": len(collapsed.maps),
    }
    tensors = {"filters": collapsed.filters}
    for i, (m, p) in enumerate(zip(collapsed.maps, collapsed.pools)):
        header[f"pool{i}"] = f"{p.nx}x{p.ny}"
        tensors[f"maps{i}"] = m.astype(np.float64)
    storage.write_dir(path, header, tensors)


def load_collapsed(path: str) -> CollapsedDictionary:
    header, tensors = storage.read_dir(path)
    if header.get("format") != "convdict-collapsed-v1":
        raise storage.StorageError(f"{path}: not a collapsed dictionary")
    rx, ry = header["ratio"].split("x")
    maps, pools = [], []
    for i in range(int(header["map_layers"])):
        maps.append(tensors[f"maps{i}"].astype(np.int64))
        nx, ny = header[f"pool{i}"].split("x")
        pools.append(PoolShape(int(nx), int(ny)))
    return CollapsedDictionary(filters=tensors["filters"], maps=maps,
                               ratio=(int(rx), int(ry)), pools=pools)
