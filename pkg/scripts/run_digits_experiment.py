#!/usr/bin/env python3
"""Desk-scale digits experiment: train the two-layer model, refine it,
collapse, extract features, classify, and report both phases' test errors.

A quick run (a few minutes):
    python scripts/run_digits_experiment.py --out run_quick \
        --pretrain 60,25 --refine 60,25 --test 120,60 --n-train 300 --n-test 300

The full desk-scale experiment (hours):
    python scripts/run_digits_experiment.py --out run_full
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from convdict import classifier as CL
from convdict import gibbs as G
from convdict import inference as I
from convdict.collapse import project_dictionary, select_ml_pool_maps
from convdict.model import Hyperparams, LayerSpec, save_model
from convdict.pool_ops import PoolShape
from convdict.synth import make_digit_corpus


def schedule(text):
    burn, collect = (int(v) for v in text.split(","))
    return G.SamplerSchedule(burn, collect)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="run_digits")
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--k1", type=int, default=32)
    ap.add_argument("--k2", type=int, default=36)
    ap.add_argument("--pretrain", type=schedule, default="500,200")
    ap.add_argument("--refine", type=schedule, default="500,200")
    ap.add_argument("--test", type=schedule, default="500,200")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    xtr, ytr = make_digit_corpus(args.n_train, seed=args.seed * 2)
    xte, yte = make_digit_corpus(args.n_test, seed=args.seed * 2 + 1)
    hyper = Hyperparams()
    specs = [LayerSpec(args.k1, 8, 8, PoolShape(3, 3)), LayerSpec(args.k2, 6, 6)]

    t0 = time.time()
    pre = G.pretrain(xtr, specs, hyper, args.pretrain, seed=args.seed,
                     prune_thresholds=[0.0, 0.01])
    save_model(pre, os.path.join(args.out, "pretrained_model"))
    print(f"pretrained in {time.time()-t0:.0f}s (K2 -> {pre.specs[1].atoms})")

    t0 = time.time()
    ref = G.refine(pre, xtr, args.refine)
    save_model(ref, os.path.join(args.out, "refined_model"))
    print(f"refined in {time.time()-t0:.0f}s")

    allimgs = np.concatenate([xtr, xte])
    for name, model in (("pretrained", pre), ("refined", ref)):
        collapsed = project_dictionary(model, select_ml_pool_maps(model))
        fs = I.deconvolve_features(allimgs, collapsed, hyper, args.test,
                                   seed=args.seed + 11)
        clf = CL.train_classifier(fs.features[:args.n_train], ytr)
        pred, _ = clf.predict(fs.features[args.n_train:])
        err = float(np.mean(pred != yte))
        print(f"{name}: feature dim {fs.dim}, cv_error {clf.cv_error:.4f}, "
              f"test_error {err:.4f}")


if __name__ == "__main__":
    main()
