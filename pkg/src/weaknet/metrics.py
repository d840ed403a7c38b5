"""Ranking metrics, confusion counts and the scene-event activation probe."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger("weaknet")


class UndefinedMetricError(ValueError):
    """Metric has no value for this input (e.g. single-polarity labels)."""


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic.

    Equals the fraction of (positive, negative) pairs ranked correctly,
    ties counting one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")

    order = np.argsort(scores, kind="mergesort")
    _, inverse, counts = np.unique(scores[order], return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    avg_rank = starts + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(len(scores))
    ranks[order] = avg_rank[inverse]
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at each positive's rank.

    Ties sort by original position (stable descending order).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = (labels[order] == 1)
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum_hits[hits] / ranks[hits]).mean())


def class_means(aucs, aps) -> tuple[float, float]:
    """Unweighted means over classes whose metric is defined (not None)."""
    defined_auc = [v for v in aucs if v is not None]
    defined_ap = [v for v in aps if v is not None]
    if not defined_auc or not defined_ap:
        raise UndefinedMetricError("no class has a defined metric")
    return float(np.mean(defined_auc)), float(np.mean(defined_ap))


def per_class_metrics(scores: np.ndarray, labels: np.ndarray):
    """Columnwise AUC/AP for an (N, C) score matrix and binary label matrix.

    Classes where a metric is undefined get None and a logged warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: scores {scores.shape} labels {labels.shape}")
    aucs, aps = [], []
    for c in range(scores.shape[1]):
        try:
            aucs.append(auc(scores[:, c], labels[:, c]))
        except UndefinedMetricError:
            log.warning("AUC undefined for class %d (single polarity); skipped", c)
            aucs.append(None)
        try:
            aps.append(average_precision(scores[:, c], labels[:, c]))
        except UndefinedMetricError:
            log.warning("AP undefined for class %d (no positives); skipped", c)
            aps.append(None)
    return aucs, aps


def accuracy_and_confusion(predictions, truths, n_classes: int | None = None):
    """Accuracy plus a (truth row, prediction column) count matrix."""
    predictions = np.asarray(predictions, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths must have equal length")
    c = n_classes or int(max(predictions.max(initial=0), truths.max(initial=0))) + 1
    confusion = np.zeros((c, c), dtype=int)
    np.add.at(confusion, (truths, predictions), 1)
    total = len(predictions)
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    return accuracy, confusion


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties resolved toward lower index."""
    order = np.argsort(-values, kind="stable")
    return order[:k]


def scene_event_probe(model, scene_clips: dict, k: int = 5, top_n: int = 10,
                      event_names=None) -> dict:
    """Count which F2 channels fire hardest across the segments of each scene.

    For every segment of every clip the indices of the ``k`` largest F2
    activations are tallied; each scene reports its ``top_n`` most
    frequent channels as (event, count) pairs, ties toward lower index.
    Models without an F2 layer (adapted_I) are rejected.
    """
    if getattr(model, "f2", None) is None:
        raise ValueError(f"model variant {model.variant!r} has no F2 layer to probe")
    profile = {}
    for scene in sorted(scene_clips):
        counts = np.zeros(model.n_source_classes, dtype=int)
        for frames in scene_clips[scene]:
            f2 = model.forward(frames).f2  # (C_S, K)
            for seg in range(f2.shape[1]):
                counts[top_k_indices(f2[:, seg], k)] += 1
        order = np.lexsort((np.arange(len(counts)), -counts))[:top_n]
        order = [int(i) for i in order if counts[i] > 0]
        if event_names is not None:
            profile[scene] = [(event_names[i], int(counts[i])) for i in order]
        else:
            profile[scene] = [(i, int(counts[i])) for i in order]
    return profile


def export_embeddings(representations: np.ndarray, labels, path) -> None:
    """CSV export of an (N, D) matrix with one leading label column."""
    representations = np.asarray(representations)
    labels = list(labels)
    if representations.ndim != 2 or len(labels) != representations.shape[0]:
        raise ValueError("need an (N, D) matrix and N labels")
    d = representations.shape[1]
    with open(path, "w") as fh:
        fh.write("label," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for label, row in zip(labels, representations):
            fh.write(str(label) + "," + ",".join(f"{v:.9g}" for v in row) + "\n")
