"""One-vs-rest linear SVM trained by dual coordinate descent.

Solves, per class, min_w 0.5 ||w||^2 + C sum_i max(0, 1 - y_i f(x_i))
with f(x) = w . x + b. The bias rides along as an augmented constant
feature, features are standardized per dimension first, and the solver
sweeps examples in a fixed order, so training is deterministic without
any seed.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("weaknet")

DEFAULT_C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
MODEL_MAGIC = b"WSVM"


@dataclass
class SvmModel:
    weights: np.ndarray  # (n_classes, D)
    biases: np.ndarray  # (n_classes,)
    c: float
    feature_mean: np.ndarray  # (D,)
    feature_std: np.ndarray  # (D,)
    classes: list

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def decision_scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"feature dim {x.shape[1]} != model dim {self.dim}")
        z = (x - self.feature_mean) / self.feature_std
        return z @ self.weights.T + self.biases


def _standardize_fit(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _solve_binary(z: np.ndarray, y: np.ndarray, c: float, tol: float = 1e-4,
                  max_sweeps: int = 2000) -> np.ndarray:
    """Dual coordinate descent on the augmented (bias) problem.

    Returns the augmented weight vector (D + 1,). Examples are visited
    in index order every sweep; convergence is the largest projected
    gradient magnitude falling under ``tol``.
    """
    n, d = z.shape
    za = np.concatenate([z, np.ones((n, 1))], axis=1)
    q = np.einsum("ij,ij->i", za, za)
    alpha = np.zeros(n)
    w = np.zeros(d + 1)
    for _ in range(max_sweeps):
        worst = 0.0
        for i in range(n):
            g = y[i] * (w @ za[i]) - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= c:
                pg = max(g, 0.0)
            else:
                pg = g
            worst = max(worst, abs(pg))
            if pg != 0.0:
                new_a = min(max(a - g / q[i], 0.0), c)
                if new_a != a:
                    w += (new_a - a) * y[i] * za[i]
                    alpha[i] = new_a
        if worst < tol:
            break
    else:
        log.warning("SVM solver hit max sweeps (%d) before tol %g", max_sweeps, tol)
    return w


def train_linear_svm(x: np.ndarray, labels, c: float = 1.0, tol: float = 1e-4) -> SvmModel:
    """Fit one binary hinge-loss problem per class on standardized features.

    A class that never appears positively (possible in small folds) gets
    a constant-negative scorer and a logged warning.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(labels) != x.shape[0]:
        raise ValueError("need an (N, D) matrix and N labels")
    if x.shape[0] < 2:
        raise ValueError("need at least two training examples")
    classes = sorted(set(labels.tolist()))
    mean, std = _standardize_fit(x)
    z = (x - mean) / std

    weights = np.zeros((len(classes), x.shape[1]))
    biases = np.zeros(len(classes))
    for ci, cls in enumerate(classes):
        y = np.where(labels == cls, 1.0, -1.0)
        if np.all(y == 1.0) or np.all(y == -1.0):
            log.warning("class %r is single-polarity; using constant-negative model", cls)
            biases[ci] = -1.0
            continue
        wa = _solve_binary(z, y, c, tol)
        weights[ci] = wa[:-1]
        biases[ci] = wa[-1]
    return SvmModel(weights=weights, biases=biases, c=c, feature_mean=mean,
                    feature_std=std, classes=classes)


def predict(model: SvmModel, x) -> tuple:
    """Highest-scoring class for one feature vector, ties to the lowest index."""
    scores = model.decision_scores(np.asarray(x, dtype=np.float64)[None, :])[0]
    return model.classes[int(np.argmax(scores))], scores


def predict_batch(model: SvmModel, x: np.ndarray) -> list:
    scores = model.decision_scores(x)
    return [model.classes[i] for i in np.argmax(scores, axis=1)]


def _stratified_folds(labels, k: int):
    """Deterministic round-robin fold ids per class, in input order."""
    labels = np.asarray(labels)
    folds = np.empty(len(labels), dtype=int)
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        folds[idx] = np.arange(len(idx)) % k
    return folds


def cross_validate_c(x: np.ndarray, labels, grid=DEFAULT_C_GRID, k_folds: int = 5) -> float:
    """Mean stratified k-fold accuracy per grid value; ties pick the smaller C."""
    if k_folds < 2:
        raise ValueError("need at least two folds")
    grid = sorted(grid)
    if not grid:
        raise ValueError("empty C grid")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    counts = {cls: int((labels == cls).sum()) for cls in set(labels.tolist())}
    if min(counts.values()) < k_folds:
        log.warning("some class has fewer than %d examples; folds will miss it", k_folds)
    folds = _stratified_folds(labels, k_folds)

    best_c, best_acc = None, -1.0
    for c in grid:
        accs = []
        for f in range(k_folds):
            train = folds != f
            test = ~train
            if not test.any() or len(set(labels[train].tolist())) < 2:
                continue
            model = train_linear_svm(x[train], labels[train], c)
            pred = predict_batch(model, x[test])
            accs.append(float(np.mean([p == t for p, t in zip(pred, labels[test])])))
        acc = float(np.mean(accs)) if accs else 0.0
        if acc > best_acc:
            best_c, best_acc = c, acc
    return best_c


def save_model(model: SvmModel, path) -> None:
    header = {
        "magic": MODEL_MAGIC.decode(),
        "c": model.c,
        "dim": model.dim,
        "classes": [str(c) for c in model.classes],
        "standardization": {
            "mean": model.feature_mean.tolist(),
            "std": model.feature_std.tolist(),
        },
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.biases, dtype="<f8").tobytes())


def load_model(path) -> SvmModel:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("magic") != MODEL_MAGIC.decode():
            raise ValueError(f"not an SVM model file: {path}")
        n, d = len(header["classes"]), header["dim"]
        weights = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        biases = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
    return SvmModel(
        weights=weights,
        biases=biases,
        c=header["c"],
        feature_mean=np.asarray(header["standardization"]["mean"], dtype=np.float64),
        feature_std=np.asarray(header["standardization"]["std"], dtype=np.float64),
        classes=header["classes"],
    )
