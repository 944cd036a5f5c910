"""End-to-end orchestration: pretrain, refine, collapse, extract, classify.

Each stage writes its artifact under the run directory and is skipped when
the artifact already exists, so an interrupted pipeline resumes where it
stopped and a classify-only rerun touches no sampling code.
"""

from __future__ import annotations

import logging
import os

import numpy as np

from . import classifier as CL
from . import collapse as C
from . import data as D
from . import gibbs as G
from . import inference as I
from . import model as M
from .config import RunConfig, UsageError

logger = logging.getLogger("convdict")


class NumericalError(ArithmeticError):
    """Non-finite state encountered."""


def _schedule(burn, collect, regime):
    return G.SamplerSchedule(burn, collect, regime)


def load_dataset(cfg: RunConfig, split: str) -> D.DatasetHandle:
    """Training or test data per the configuration, preprocessed."""
    if split == "train":
        images_path, labels_path, limit = cfg.train_images, cfg.train_labels, cfg.limit_train
    else:
        images_path, labels_path, limit = cfg.test_images, cfg.test_labels, cfg.limit_test
    if images_path:
        ds = D.load_idx_dataset(images_path, labels_path)
    elif cfg.image_dir and split == "train":
        ds = D.load_image_dir(cfg.image_dir, cfg.image_size)
    else:
        raise UsageError(f"no {split} data configured")
    images, labels = ds.images, ds.labels
    if limit is not None:
        images = images[:limit]
        labels = None if labels is None else labels[:limit]
    if cfg.lcn:
        images = np.stack([
            D.local_contrast_normalize(img, cfg.lcn_window, cfg.lcn_sigma)
            for img in images])
    return D.DatasetHandle(images=images, labels=labels, provenance=ds.provenance)


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"{name}: non-finite values")


def stage_pretrain(cfg: RunConfig, train: D.DatasetHandle, out_dir: str,
                   images: np.ndarray | None = None) -> M.NetworkModel:
    path = os.path.join(out_dir, "pretrained_model")
    if os.path.isfile(os.path.join(path, "header.txt")):
        logger.info("pretrain: reusing %s", path)
        return M.load_model(path)
    if not cfg.layers:
        raise UsageError("no layers configured")
    x = train.images if images is None else images
    _check_finite("training data", x)
    ck = os.path.join(out_dir, "checkpoint_pretrain")
    model = G.pretrain(
        x, cfg.layers, cfg.hyper(),
        _schedule(cfg.pretrain_burn, cfg.pretrain_collect, "pretrain"),
        seed=cfg.seed, prune_thresholds=cfg.prune_thresholds(),
        log_every=cfg.log_every,
        checkpoint_dir=ck if cfg.checkpoint_every else None,
        checkpoint_every=cfg.checkpoint_every,
        resume=bool(cfg.checkpoint_every))
    M.save_model(model, path)
    return model


def stage_refine(cfg: RunConfig, pretrained: M.NetworkModel,
                 train: D.DatasetHandle, out_dir: str,
                 images: np.ndarray | None = None) -> M.NetworkModel:
    path = os.path.join(out_dir, "refined_model")
    if os.path.isfile(os.path.join(path, "header.txt")):
        logger.info("refine: reusing %s", path)
        return M.load_model(path)
    x = train.images if images is None else images
    ck = os.path.join(out_dir, "checkpoint_refine")
    model = G.refine(
        pretrained, x,
        _schedule(cfg.refine_burn, cfg.refine_collect, "refine"),
        allow_empty=cfg.refine_allow_empty, log_every=cfg.log_every,
        checkpoint_dir=ck if cfg.checkpoint_every else None,
        checkpoint_every=cfg.checkpoint_every,
        resume=bool(cfg.checkpoint_every))
    M.save_model(model, path)
    return model


def stage_collapse(cfg: RunConfig, model: M.NetworkModel, out_dir: str,
                   name: str = "collapsed") -> C.CollapsedDictionary:
    path = os.path.join(out_dir, name)
    if os.path.isfile(os.path.join(path, "header.txt")):
        logger.info("collapse: reusing %s", path)
        return C.load_collapsed(path)
    collapsed = C.project_dictionary(model, C.select_ml_pool_maps(model))
    _check_finite("collapsed dictionary", collapsed.filters)
    C.save_collapsed(collapsed, path)
    return collapsed


def stage_extract(cfg: RunConfig, collapsed: C.CollapsedDictionary,
                  ds: D.DatasetHandle, out_dir: str, name: str,
                  seed_offset: int = 0) -> I.FeatureSet:
    path = os.path.join(out_dir, f"features_{name}.feat")
    if os.path.isfile(path):
        logger.info("extract: reusing %s", path)
        return I.load_features(path)
    fs = I.deconvolve_features(
        ds.images, collapsed, cfg.hyper(),
        _schedule(cfg.test_burn, cfg.test_collect, "test"),
        seed=cfg.seed + seed_offset, labels=ds.labels)
    _check_finite("features", fs.features)
    I.save_features(fs, path)
    return fs


def stage_classify(cfg: RunConfig, train_fs: I.FeatureSet,
                   test_fs: I.FeatureSet, out_dir: str,
                   name: str = "classifier") -> dict:
    clf_path = os.path.join(out_dir, name)
    if os.path.isfile(os.path.join(clf_path, "header.txt")):
        clf = CL.load_classifier(clf_path)
        logger.info("classify: reusing %s", clf_path)
    else:
        if train_fs.labels is None:
            raise UsageError("training features carry no labels")
        clf = CL.train_classifier(train_fs.features, train_fs.labels)
        CL.save_classifier(clf, clf_path)
    pred, scores = clf.predict(test_fs.features)
    report = os.path.join(out_dir, f"{name}_report.csv")
    CL.write_report_csv(report, pred, scores, test_fs.labels)
    out = {"cv_error": clf.cv_error, "report": report}
    if test_fs.labels is not None:
        out["test_error"] = float(np.mean(pred != test_fs.labels))
    return out


def _concat_collapsed(parts: list[C.CollapsedDictionary]) -> C.CollapsedDictionary:
    ratios = {p.ratio for p in parts}
    shapes = {p.filters.shape[1:] for p in parts}
    if len(ratios) != 1 or len(shapes) != 1:
        raise UsageError("per-class dictionaries have incompatible shapes")
    n_map_layers = len(parts[0].pools)
    maps = [np.concatenate([p.maps[l] for p in parts])
            for l in range(n_map_layers)]
    return C.CollapsedDictionary(
        filters=np.concatenate([p.filters for p in parts]),
        maps=maps, ratio=parts[0].ratio, pools=parts[0].pools)


def run_pipeline(cfg: RunConfig) -> dict:
    """Full flow: training, refinement, collapse, feature extraction of both
    splits, classification; per-class mode trains one model per label class
    and concatenates the collapsed dictionaries before extraction."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    train = load_dataset(cfg, "train")
    test = load_dataset(cfg, "test")
    if cfg.per_class:
        if train.labels is None:
            raise UsageError("per-class training needs labels")
        parts = []
        for c in np.unique(train.labels):
            sub_dir = os.path.join(cfg.out_dir, f"class_{int(c)}")
            os.makedirs(sub_dir, exist_ok=True)
            imgs = train.images[train.labels == c]
            sub = D.DatasetHandle(images=imgs, provenance=f"class {int(c)}")
            pre = stage_pretrain(cfg, sub, sub_dir)
            ref = stage_refine(cfg, pre, sub, sub_dir)
            parts.append(stage_collapse(cfg, ref, sub_dir))
        collapsed = _concat_collapsed(parts)
        C.save_collapsed(collapsed, os.path.join(cfg.out_dir, "collapsed"))
    else:
        pre = stage_pretrain(cfg, train, cfg.out_dir)
        ref = stage_refine(cfg, pre, train, cfg.out_dir)
        collapsed = stage_collapse(cfg, ref, cfg.out_dir)
    train_fs = stage_extract(cfg, collapsed, train, cfg.out_dir, "train")
    test_fs = stage_extract(cfg, collapsed, test, cfg.out_dir, "test",
                            seed_offset=1)
    result = stage_classify(cfg, train_fs, test_fs, cfg.out_dir)
    summary = os.path.join(cfg.out_dir, "summary.txt")
    with open(summary + ".tmp", "w") as f:
        f.write(f"atoms={collapsed.atoms}\n")
        f.write(f"feature_dim={train_fs.dim}\n")
        f.write(f"cv_error={result['cv_error']:.6f}\n")
        if "test_error" in result:
            f.write(f"test_error={result['test_error']:.6f}\n")
    os.replace(summary + ".tmp", summary)
    result["summary"] = summary
    logger.info("pipeline complete: %s", result)
    return result
