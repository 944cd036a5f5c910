#!/usr/bin/env python3
"""Emit a synthetic stroke-digit corpus as IDX files.

Example:
    python scripts/make_synthetic_digits.py --out data --train 1000 --test 1000
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from convdict.synth import write_digit_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data")
    ap.add_argument("--train", type=int, default=1000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--noise", type=float, default=0.06)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    write_digit_corpus(os.path.join(args.out, "train_images.idx"),
                       os.path.join(args.out, "train_labels.idx"),
                       args.train, seed=args.seed, noise=args.noise)
    write_digit_corpus(os.path.join(args.out, "test_images.idx"),
                       os.path.join(args.out, "test_labels.idx"),
                       args.test, seed=args.seed + 1, noise=args.noise)
    print(f"wrote {args.train} train / {args.test} test digits under {args.out}/")


if __name__ == "__main__":
    main()
