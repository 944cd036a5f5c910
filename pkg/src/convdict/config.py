"""Run configuration: plain-text key=value files, overridable by flags."""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import Hyperparams, LayerSpec
from .pool_ops import PoolShape


class UsageError(ValueError):
    """Bad command line or configuration."""


@dataclass
class RunConfig:
    out_dir: str = "run"
    seed: int = 0
    # data
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    image_dir: str | None = None
    image_size: tuple[int, int] = (128, 128)
    limit_train: int | None = None
    limit_test: int | None = None
    lcn: bool = False
    lcn_window: int = 9
    lcn_sigma: float = 1.6
    # model
    layers: list[LayerSpec] = field(default_factory=list)
    a0: float | None = None
    b0: float | None = None
    prior_scale: float = 1e-6
    # schedules
    pretrain_burn: int = 1500
    pretrain_collect: int = 500
    refine_burn: int = 1500
    refine_collect: int = 500
    test_burn: int = 500
    test_collect: int = 200
    # behavior
    prune: list[float] = field(default_factory=list)
    refine_allow_empty: bool = False
    per_class: bool = False
    checkpoint_every: int = 0
    log_every: int = 25

    def hyper(self) -> Hyperparams:
        s = self.prior_scale
        return Hyperparams(a0=self.a0, b0=self.b0, a_w=s, b_w=s, a_d=s, b_d=s,
                           a_e=s, b_e=s)

    def prune_thresholds(self) -> list[float]:
        if not self.prune:
            return [0.0] * len(self.layers)
        if len(self.prune) == 1:
            return [self.prune[0]] * len(self.layers)
        if len(self.prune) != len(self.layers):
            raise UsageError(f"prune needs 1 or {len(self.layers)} values")
        return list(self.prune)


def parse_layers(text: str) -> list[LayerSpec]:
    """K:RxC[:pNXxNY] entries, comma separated; pooling absent on the top."""
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) not in (2, 3):
            raise UsageError(f"bad layer spec {part!r} (want K:RxC[:pNXxNY])")
        try:
            atoms = int(bits[0])
            r, c = bits[1].lower().split("x")
            pool = None
            if len(bits) == 3:
                p = bits[2].lower()
                if not p.startswith("p"):
                    raise ValueError
                nx, ny = p[1:].split("x")
                pool = PoolShape(int(nx), int(ny))
            specs.append(LayerSpec(atoms, int(r), int(c), pool))
        except (ValueError, IndexError) as exc:
            raise UsageError(f"bad layer spec {part!r}") from exc
    if not specs:
        raise UsageError("empty layer list")
    return specs


def layers_to_text(specs: list[LayerSpec]) -> str:
    parts = []
    for s in specs:
        t = f"{s.atoms}:{s.dict_rows}x{s.dict_cols}"
        if s.pool is not None:
            t += f":p{s.pool.nx}x{s.pool.ny}"
        parts.append(t)
    return ",".join(parts)


_BOOL_KEYS = {"lcn", "refine_allow_empty", "per_class"}
_INT_KEYS = {"seed", "limit_train", "limit_test", "lcn_window", "pretrain_burn",
             "pretrain_collect", "refine_burn", "refine_collect", "test_burn",
             "test_collect", "checkpoint_every", "log_every"}
_FLOAT_KEYS = {"lcn_sigma", "a0", "b0", "prior_scale"}
_STR_KEYS = {"out_dir", "train_images", "train_labels", "test_images",
             "test_labels", "image_dir"}


def _parse_bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"bad boolean {v!r}")


def read_config_file(path: str) -> dict[str, str]:
    items: dict[str, str] = {}
    try:
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{ln}: expected key=value")
                k, v = line.split("=", 1)
                items[k.strip()] = v.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return items


def config_from_items(items: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    for key, value in items.items():
        if key == "layers":
            cfg.layers = parse_layers(value)
        elif key == "image_size":
            try:
                r, c = value.lower().split("x")
                cfg.image_size = (int(r), int(c))
            except ValueError as exc:
                raise UsageError(f"bad image_size {value!r}") from exc
        elif key == "prune":
            try:
                cfg.prune = [float(v) for v in value.split(",") if v.strip()]
            except ValueError as exc:
                raise UsageError(f"bad prune list {value!r}") from exc
        elif key in _BOOL_KEYS:
            setattr(cfg, key, _parse_bool(value))
        elif key in _INT_KEYS:
            try:
                setattr(cfg, key, None if value.lower() == "none" else int(value))
            except ValueError as exc:
                raise UsageError(f"bad integer for {key}: {value!r}") from exc
        elif key in _FLOAT_KEYS:
            try:
                setattr(cfg, key, None if value.lower() == "none" else float(value))
            except ValueError as exc:
                raise UsageError(f"bad float for {key}: {value!r}") from exc
        elif key in _STR_KEYS:
            setattr(cfg, key, value or None)
        else:
            raise UsageError(f"unknown configuration key {key!r}")
    return cfg


def load_config(path: str | None, overrides: dict[str, str]) -> RunConfig:
    """Config file merged with command-line overrides; flags win."""
    items = read_config_file(path) if path else {}
    items.update(overrides)
    return config_from_items(items)
