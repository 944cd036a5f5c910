"""Command-line interface.

Every option is --key=value; --config=FILE loads a key=value file first and
flags win. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import logging
import os
import sys

import numpy as np

from . import classifier as CL
from . import collapse as C
from . import data as D
from . import inference as I
from . import model as M
from .config import RunConfig, UsageError, load_config
from .gibbs import SamplerSchedule
from .pipeline import NumericalError, load_dataset, run_pipeline, \
    stage_classify, stage_collapse, stage_extract, stage_pretrain, stage_refine
from .storage import StorageError

USAGE = """usage: convdict COMMAND [--config=FILE] [--key=value ...]

commands:
  pretrain     bottom-up layer-wise training -> OUT/pretrained_model
  refine       top-down joint refinement     -> OUT/refined_model
  collapse     project to data-plane filters -> OUT/collapsed
               (--model=pretrained|refined|PATH, --name=DIR)
  extract      deconvolve features           -> OUT/features_SPLIT.feat
               (--split=train|test, --collapsed=PATH)
  classify     train/apply the kernel classifier on existing features
  interpolate  complete masked images (--mask=bottom|top|left|right|PGM,
               --layers-to-use=L, --count=N) -> OUT/interp_*.pgm
  generate     sample images from a refined model (--count=N, --gen-seed=S)
  visualize    render collapsed atoms (--threshold=Q) -> OUT/atoms/
  pipeline     everything in order

any RunConfig key (layers=, seed=, out_dir=, train_images=, ...) may be given
as --key=value; flags override the config file."""

COMMANDS = ("pretrain", "refine", "collapse", "extract", "classify",
            "interpolate", "generate", "visualize", "pipeline")


def _parse(argv):
    if not argv or argv[0] in ("-h", "--help", "help"):
        raise UsageError(USAGE)
    cmd = argv[0]
    if cmd not in COMMANDS:
        raise UsageError(f"unknown command {cmd!r}\n\n{USAGE}")
    config_path = None
    overrides: dict[str, str] = {}
    for a in argv[1:]:
        if not a.startswith("--") or "=" not in a:
            raise UsageError(f"bad argument {a!r} (expected --key=value)")
        k, v = a[2:].split("=", 1)
        if k == "config":
            config_path = v
        else:
            overrides[k.replace("-", "_")] = v
    return cmd, config_path, overrides


def _pop(overrides: dict, key: str, default=None):
    return overrides.pop(key, default)


def _load_model_arg(cfg: RunConfig, which: str) -> M.NetworkModel:
    if which in ("pretrained", "refined"):
        path = os.path.join(cfg.out_dir, f"{which}_model")
    else:
        path = which
    return M.load_model(path)


def _load_collapsed_arg(cfg: RunConfig, which: str | None) -> C.CollapsedDictionary:
    path = which or os.path.join(cfg.out_dir, "collapsed")
    return C.load_collapsed(path)


def _mask_from_spec(spec: str, rows: int, cols: int) -> np.ndarray:
    mask = np.ones((rows, cols))
    if spec == "bottom":
        mask[rows // 2:, :] = 0
    elif spec == "top":
        mask[:rows // 2, :] = 0
    elif spec == "left":
        mask[:, :cols // 2] = 0
    elif spec == "right":
        mask[:, cols // 2:] = 0
    elif spec.endswith(".pgm"):
        mask = (D.read_pgm(spec) > 0.5).astype(float)
        if mask.shape != (rows, cols):
            raise D.DataError(f"mask shape {mask.shape} != {(rows, cols)}")
    else:
        raise UsageError(f"bad mask spec {spec!r}")
    return mask


def _dispatch(cmd: str, cfg: RunConfig, extras: dict) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    if cmd == "pipeline":
        result = run_pipeline(cfg)
        if "test_error" in result:
            print(f"test_error={result['test_error']:.4f}")
        print(f"report={result['report']}")
        return 0
    if cmd == "pretrain":
        train = load_dataset(cfg, "train")
        stage_pretrain(cfg, train, cfg.out_dir)
        print(os.path.join(cfg.out_dir, "pretrained_model"))
        return 0
    if cmd == "refine":
        train = load_dataset(cfg, "train")
        pre = _load_model_arg(cfg, "pretrained")
        stage_refine(cfg, pre, train, cfg.out_dir)
        print(os.path.join(cfg.out_dir, "refined_model"))
        return 0
    if cmd == "collapse":
        which = _pop(extras, "model", "refined")
        name = _pop(extras, "name", "collapsed")
        model = _load_model_arg(cfg, which)
        stage_collapse(cfg, model, cfg.out_dir, name)
        print(os.path.join(cfg.out_dir, name))
        return 0
    if cmd == "extract":
        split = _pop(extras, "split", "test")
        if split not in ("train", "test"):
            raise UsageError("--split must be train or test")
        collapsed = _load_collapsed_arg(cfg, _pop(extras, "collapsed"))
        ds = load_dataset(cfg, split)
        stage_extract(cfg, collapsed, ds, cfg.out_dir, split,
                      seed_offset=0 if split == "train" else 1)
        print(os.path.join(cfg.out_dir, f"features_{split}.feat"))
        return 0
    if cmd == "classify":
        train_fs = I.load_features(os.path.join(cfg.out_dir, "features_train.feat"))
        test_fs = I.load_features(os.path.join(cfg.out_dir, "features_test.feat"))
        result = stage_classify(cfg, train_fs, test_fs, cfg.out_dir)
        if "test_error" in result:
            print(f"test_error={result['test_error']:.4f}")
        print(f"report={result['report']}")
        return 0
    if cmd == "interpolate":
        which = _pop(extras, "model", "refined")
        layers_to_use = _pop(extras, "layers_to_use")
        count = int(_pop(extras, "count", "8"))
        mask_spec = _pop(extras, "mask", "bottom")
        ds = load_dataset(cfg, "test")
        images = ds.images[:count]
        mask = _mask_from_spec(mask_spec, images.shape[1], images.shape[2])
        model = _load_model_arg(cfg, which)
        out = I.interpolate_missing(
            images, mask, model,
            None if layers_to_use is None else int(layers_to_use),
            schedule=SamplerSchedule(cfg.test_burn, cfg.test_collect, "test"),
            seed=cfg.seed)
        mse = float(np.mean((out - images)[:, mask == 0] ** 2))
        for i in range(len(out)):
            D.write_pgm(os.path.join(cfg.out_dir, f"interp_{i:03d}.pgm"),
                        np.clip(out[i], 0, 1))
        print(f"missing_region_mse={mse:.6f}")
        return 0
    if cmd == "generate":
        which = _pop(extras, "model", "refined")
        count = int(_pop(extras, "count", "16"))
        gen_seed = int(_pop(extras, "gen_seed", str(cfg.seed)))
        model = _load_model_arg(cfg, which)
        imgs = I.generate_images(model, count, seed=gen_seed)
        lo, hi = imgs.min(), imgs.max()
        scale = (imgs - lo) / (hi - lo) if hi > lo else imgs * 0
        for i in range(count):
            D.write_pgm(os.path.join(cfg.out_dir, f"generated_{i:03d}.pgm"),
                        scale[i])
        print(os.path.join(cfg.out_dir, "generated_000.pgm"))
        return 0
    if cmd == "visualize":
        threshold = _pop(extras, "threshold")
        collapsed = _load_collapsed_arg(cfg, _pop(extras, "collapsed"))
        images, sheet = C.visualize_atoms(
            collapsed, None if threshold is None else float(threshold))
        atom_dir = os.path.join(cfg.out_dir, "atoms")
        os.makedirs(atom_dir, exist_ok=True)
        for i, img in enumerate(images):
            D.write_pgm(os.path.join(atom_dir, f"atom_{i:03d}.pgm"), img)
        D.write_pgm(os.path.join(atom_dir, "sheet.pgm"), sheet)
        print(atom_dir)
        return 0
    raise UsageError(USAGE)


_COMMAND_EXTRAS = {
    "collapse": {"model", "name"},
    "extract": {"split", "collapsed"},
    "interpolate": {"model", "layers_to_use", "count", "mask"},
    "generate": {"model", "count", "gen_seed"},
    "visualize": {"collapsed", "threshold"},
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CONVDICT_LOG", "INFO"),
                        format="%(asctime)s %(name)s %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cmd, config_path, overrides = _parse(argv)
        extras = {}
        for key in _COMMAND_EXTRAS.get(cmd, ()):  # command-local options
            if key in overrides:
                extras[key] = overrides.pop(key)
        cfg = load_config(config_path, overrides)
        return _dispatch(cmd, cfg, extras)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (D.DataError, StorageError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
