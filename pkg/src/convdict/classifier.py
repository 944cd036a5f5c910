"""Gaussian-kernel one-vs-all classification of unfolded features.

The per-class learner is kernel ridge regression on +-1 targets (closed-form
dual solve); bandwidth and regularization are chosen by stratified k-fold
cross-validation over a grid anchored at the median pairwise distance.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import storage

SIGMA_MULTIPLIERS = (0.5, 1.0, 2.0, 4.0, 8.0)
LAMBDAS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class KernelClassifier:
    """One-vs-all kernel ridge models sharing one Gaussian kernel."""
    classes: np.ndarray        # (C,)
    sigma: float
    lam: float
    mu: np.ndarray             # feature standardization
    sd: np.ndarray
    x_train: np.ndarray        # standardized training features (n, d)
    alphas: np.ndarray         # dual coefficients (n, C)
    biases: np.ndarray         # (C,)
    cv_error: float = float("nan")

    def predict(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Labels and per-class scores for a feature matrix."""
        x = (np.asarray(features, dtype=np.float64) - self.mu) / self.sd
        if x.shape[1] != self.x_train.shape[1]:
            raise ValueError(f"feature dim {x.shape[1]} != "
                             f"{self.x_train.shape[1]}")
        k = gaussian_kernel(x, self.x_train, self.sigma)
        scores = k @ self.alphas + self.biases
        labels = self.classes[np.argmax(scores, axis=1)]
        return labels, scores


def gaussian_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None]
          - 2.0 * (a @ b.T))
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * sigma * sigma))


def _standardize_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return mu, sd


def median_pairwise_distance(x: np.ndarray, cap: int = 1024) -> float:
    """Median Euclidean distance over (a deterministic subset of) pairs."""
    sub = x[:cap]
    sq = (np.sum(sub * sub, axis=1)[:, None] + np.sum(sub * sub, axis=1)[None]
          - 2.0 * (sub @ sub.T))
    np.maximum(sq, 0.0, out=sq)
    iu = np.triu_indices(len(sub), k=1)
    med = float(np.median(np.sqrt(sq[iu])))
    return med if med > 1e-12 else 1.0


def _stratified_folds(labels: np.ndarray, folds: int) -> np.ndarray:
    """Deterministic per-class round-robin fold assignment."""
    assign = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        assign[idx] = np.arange(len(idx)) % folds
    return assign


def _fit_dual(k_train: np.ndarray, targets: np.ndarray, lam: float):
    """Ridge solve (K + lam I) alpha = targets - mean, one column per class."""
    biases = targets.mean(axis=0)
    a = k_train + lam * np.eye(k_train.shape[0])
    factor = cho_factor(a, lower=True)
    alphas = cho_solve(factor, targets - biases)
    return alphas, biases


def train_classifier(features: np.ndarray, labels: np.ndarray,
                     sigma_multipliers=SIGMA_MULTIPLIERS,
                     lambdas=LAMBDAS, folds: int = 5) -> KernelClassifier:
    """Grid-searched one-vs-all fit; the winning grid point minimizes mean
    cross-validation error (ties: smaller regularization, then smaller
    bandwidth), and the returned model is refit on the full training set."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    counts = np.array([(y == c).sum() for c in classes])
    if counts.min() < folds:
        raise ValueError(f"every class needs >= {folds} examples "
                         f"(smallest has {counts.min()})")
    mu, sd = _standardize_stats(x)
    xs = (x - mu) / sd
    base = median_pairwise_distance(xs)
    sigmas = [m * base for m in sigma_multipliers]
    targets = np.where(y[:, None] == classes[None], 1.0, -1.0)
    fold_of = _stratified_folds(y, folds)

    sq = (np.sum(xs * xs, axis=1)[:, None] + np.sum(xs * xs, axis=1)[None]
          - 2.0 * (xs @ xs.T))
    np.maximum(sq, 0.0, out=sq)

    results = []  # (error, lam, sigma)
    for sigma in sigmas:
        k_full = np.exp(-sq / (2.0 * sigma * sigma))
        for lam in lambdas:
            mistakes = 0
            for f in range(folds):
                tr = fold_of != f
                ho = ~tr
                alphas, biases = _fit_dual(k_full[np.ix_(tr, tr)],
                                           targets[tr], lam)
                scores = k_full[np.ix_(ho, tr)] @ alphas + biases
                pred = classes[np.argmax(scores, axis=1)]
                mistakes += int((pred != y[ho]).sum())
            results.append((mistakes / len(y), lam, sigma))
    results.sort(key=lambda t: (t[0], t[1], t[2]))
    cv_error, lam, sigma = results[0]
    k_full = np.exp(-sq / (2.0 * sigma * sigma))
    alphas, biases = _fit_dual(k_full, targets, lam)
    return KernelClassifier(classes=classes, sigma=float(sigma), lam=float(lam),
                            mu=mu, sd=sd, x_train=xs, alphas=alphas,
                            biases=biases, cv_error=float(cv_error))


def save_classifier(model: KernelClassifier, path: str) -> None:
    header = {"format": "convdict-classifier-v1",
              "sigma": repr(model.sigma), "lam": repr(model.lam),
              "cv_error": repr(model.cv_error)}
    tensors = {"classes": model.classes.astype(np.float64),
               "mu": model.mu, "sd": model.sd, "x_train": model.x_train,
               "alphas": model.alphas, "biases": model.biases}
    storage.write_dir(path, header, tensors)


def load_classifier(path: str) -> KernelClassifier:
    header, tensors = storage.read_dir(path)
    if header.get("format") != "convdict-classifier-v1":
        raise storage.StorageError(f"{path}: not a classifier directory")
    return KernelClassifier(
        classes=tensors["classes"].astype(np.int64),
        sigma=float(header["sigma"]), lam=float(header["lam"]),
        mu=tensors["mu"], sd=tensors["sd"], x_train=tensors["x_train"],
        alphas=tensors["alphas"], biases=tensors["biases"],
        cv_error=float(header["cv_error"]))


def write_report_csv(path: str, predicted: np.ndarray, scores: np.ndarray,
                     true_labels: np.ndarray | None = None) -> None:
    """Per-example prediction report: index, true label (blank when absent),
    predicted label, top score."""
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "true_label", "predicted_label", "top_score"])
        top = scores.max(axis=1)
        for i, (p, s) in enumerate(zip(predicted, top)):
            t = "" if true_labels is None else int(true_labels[i])
            w.writerow([i, t, int(p), f"{s:.10g}"])
    os.replace(tmp, path)


def read_report_csv(path: str):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    idx = [int(r[0]) for r in body]
    true = [None if r[1] == "" else int(r[1]) for r in body]
    pred = [int(r[2]) for r in body]
    score = [float(r[3]) for r in body]
    return idx, true, pred, score
