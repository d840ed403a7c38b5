"""Recording-level training loops and their losses.

``train_weak`` optimizes the pooled recording output directly, so clip
labels stay weak. ``train_slat`` is the strong-assumption baseline: the
clip is cut into 128-frame segments (hop 64) that all inherit the clip's
labels and become independent training examples. Both share the same
network, Adam optimizer and bookkeeping; evaluation always runs the full
recording through the net and pools.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import metrics
from .engine import Parameter
from .model import (
    SEGMENT_FRAMES,
    SEGMENT_HOP,
    FeatureNorm,
    WeakNet,
    build_source,
    pad_frames,
    segment_count,
)

log = logging.getLogger("weaknet")

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 30
    batch_size: int = 4
    accum_examples: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    pooling: str = "max"
    loss_kind: str = "multilabel_bce"  # or categorical_ce
    early_stop_patience: int = 10
    lr_halve_patience: int = 4
    select_best: bool = True
    stop_at_train_loss: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.loss_kind not in ("multilabel_bce", "categorical_ce"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class LabeledExample:
    frames: np.ndarray  # raw (T, n_mels) logmel
    y: np.ndarray  # multi-hot label vector (C,)
    class_index: int | None = None  # set for single-label tasks


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_mauc: float | None
    val_map: float | None
    lr: float


# ----- losses ---------------------------------------------------------------------


def bce_loss(p, y):
    """Mean binary cross entropy over classes plus its gradient in p.

    Probabilities clamp to [1e-7, 1 - 1e-7] before the logs.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: p {p.shape} vs y {y.shape}")
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(np.mean(-y * np.log(pc) - (1.0 - y) * np.log(1.0 - pc)))
    grad = (-y / pc + (1.0 - y) / (1.0 - pc)) / p.size
    return loss, grad


def cce_loss(logits, class_index: int):
    """Categorical cross entropy on logits, log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= class_index < z.size:
        raise ValueError(f"class index {class_index} out of range for {z.size} logits")
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    loss = float(lse - z[class_index])
    grad = np.exp(z - lse)
    grad[class_index] -= 1.0
    return loss, grad


def _bce_batch(p: np.ndarray, y: np.ndarray):
    pc = np.clip(p.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    losses = np.mean(-y * np.log(pc) - (1.0 - y) * np.log(1.0 - pc), axis=1)
    grads = (-y / pc + (1.0 - y) / (1.0 - pc)) / p.shape[1]
    return losses, grads.astype(np.float32)


def _cce_batch(z: np.ndarray, idx: np.ndarray):
    z = z.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(len(idx))
    losses = lse - z[rows, idx]
    grads = np.exp(z - lse[:, None])
    grads[rows, idx] -= 1.0
    return losses, grads.astype(np.float32)


def _pooled_nll_batch(q: np.ndarray, idx: np.ndarray):
    """-log of the pooled per-class probability of the true class."""
    rows = np.arange(len(idx))
    qi = np.clip(q[rows, idx].astype(np.float64), PROB_CLAMP, None)
    losses = -np.log(qi)
    grads = np.zeros_like(q, dtype=np.float32)
    grads[rows, idx] = (-1.0 / qi).astype(np.float32)
    return losses, grads


# ----- optimizer ------------------------------------------------------------------


class Adam:
    """Adam with bias correction; only trainable parameters move."""

    def __init__(self, params: list[Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None or not p.trainable:
                continue
            g = p.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ----- data plumbing --------------------------------------------------------------


def compute_feature_norm(frame_arrays, floor: float = 1e-6) -> FeatureNorm:
    """Per-band mean/std over every frame of the given feature matrices."""
    count = 0
    total = None
    total_sq = None
    for frames in frame_arrays:
        f = np.asarray(frames, dtype=np.float64)
        count += f.shape[0]
        total = f.sum(axis=0) if total is None else total + f.sum(axis=0)
        total_sq = (f**2).sum(axis=0) if total_sq is None else total_sq + (f**2).sum(axis=0)
    if not count:
        raise ValueError("cannot fit normalization on empty feature set")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    std = np.maximum(np.sqrt(var), floor)
    return FeatureNorm(mean=mean.astype(np.float32), std=std.astype(np.float32))


def _prepare_examples(model: WeakNet, examples):
    return [model.prepare(ex.frames)[0, 0] for ex in examples]


def _make_batches(prepared, rng: np.random.Generator, batch_size: int):
    """Length-bucketed batches in a shuffled order."""
    buckets = {}
    for i, arr in enumerate(prepared):
        buckets.setdefault(arr.shape[0], []).append(i)
    batches = []
    for t in sorted(buckets):
        idx = np.array(buckets[t])
        rng.shuffle(idx)
        for k in range(0, len(idx), batch_size):
            batches.append(idx[k:k + batch_size])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def validation_scores(model: WeakNet, examples) -> np.ndarray:
    return np.stack([model.forward(ex.frames).recording for ex in examples])


def _validation_metrics(model: WeakNet, examples):
    scores = validation_scores(model, examples)
    labels = np.stack([ex.y for ex in examples])
    aucs, aps = metrics.per_class_metrics(scores, labels)
    try:
        return metrics.class_means(aucs, aps)
    except metrics.UndefinedMetricError:
        return None, None


def _batch_loss_and_backward(model: WeakNet, out, batch_examples, loss_kind: str):
    y = np.stack([ex.y for ex in batch_examples]).astype(np.float32)
    if loss_kind == "multilabel_bce":
        if model.head_activation != "sigmoid":
            raise ValueError("multilabel_bce needs a sigmoid head")
        losses, grads = _bce_batch(out.recording, y)
        model.backward(grad_recording=grads)
        return losses
    idx = np.array([ex.class_index for ex in batch_examples])
    if None in [ex.class_index for ex in batch_examples]:
        raise ValueError("categorical_ce needs class_index on every example")
    if model.head_activation != "softmax":
        raise ValueError("categorical_ce needs a softmax head")
    if model.variant == "adapted_III":
        losses, gz = _cce_batch(model._head_cache["z"], idx)
        model.backward(grad_logits=gz)
    else:
        losses, gq = _pooled_nll_batch(out.recording, idx)
        model.backward(grad_recording=gq)
    return losses


def fit(model: WeakNet, train_examples, val_examples, config: TrainConfig):
    """Shared optimization loop; returns the per-epoch log rows.

    Gradients accumulate across length buckets until about
    ``accum_examples`` recordings contributed, then one Adam step runs on
    the example-averaged gradient. Best-model selection and early
    stopping key on validation mean AUC when enabled and a validation
    set exists.
    """
    if not train_examples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.trainable_parameters(), config.lr, config.beta1, config.beta2,
               config.adam_eps)
    prepared = _prepare_examples(model, train_examples)

    rows: list[EpochLog] = []
    best_mauc = -np.inf
    best_snap = None
    best_epoch = 0
    stale = 0
    for epoch in range(1, config.epochs + 1):
        batches = _make_batches(prepared, rng, config.batch_size)
        epoch_losses = []
        pending = 0
        model.zero_grad()
        for batch in batches:
            x = np.stack([prepared[i] for i in batch])[:, None]
            out = model.forward_batch(x, train=True)
            losses = _batch_loss_and_backward(model, out, [train_examples[i] for i in batch],
                                              config.loss_kind)
            epoch_losses.extend(losses.tolist())
            pending += len(batch)
            if pending >= config.accum_examples:
                _scaled_step(model, opt, pending)
                pending = 0
        if pending:
            _scaled_step(model, opt, pending)

        train_loss = float(np.mean(epoch_losses))
        val_mauc = val_map = None
        if val_examples:
            val_mauc, val_map = _validation_metrics(model, val_examples)
        rows.append(EpochLog(epoch, train_loss, val_mauc, val_map, opt.lr))
        log.info("epoch %d loss %.5f val_mauc %s lr %g", epoch, train_loss,
                 f"{val_mauc:.4f}" if val_mauc is not None else "-", opt.lr)

        if val_examples and config.select_best and val_mauc is not None:
            if val_mauc > best_mauc:
                best_mauc, best_snap, best_epoch = val_mauc, model.snapshot(), epoch
                stale = 0
            else:
                stale += 1
                if config.lr_halve_patience and stale and stale % config.lr_halve_patience == 0:
                    opt.lr *= 0.5
                    log.info("halving lr to %g after %d stale epochs", opt.lr, stale)
                if config.early_stop_patience and stale >= config.early_stop_patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
        if config.stop_at_train_loss is not None and train_loss < config.stop_at_train_loss:
            log.info("train loss target reached at epoch %d", epoch)
            break

    if best_snap is not None:
        model.restore(best_snap)
    return rows


def _scaled_step(model: WeakNet, opt: Adam, n_examples: int) -> None:
    for p in opt.params:
        if p.grad is not None:
            p.grad /= n_examples
    opt.step()
    model.zero_grad()


def _check_source_examples(examples, n_classes: int) -> None:
    for ex in examples:
        if len(ex.y) != n_classes:
            raise ValueError(f"label vector length {len(ex.y)} != class count {n_classes}")
        if not np.any(ex.y > 0):
            raise ValueError("source training example with all-negative label vector")


def train_weak(train_examples, val_examples, n_classes: int, config: TrainConfig):
    """Train a source network on weak labels; loss sits on the pooled output."""
    _check_source_examples(train_examples, n_classes)
    model = build_source(n_classes, seed=config.seed, pooling=config.pooling)
    model.feature_norm = compute_feature_norm([ex.frames for ex in train_examples])
    rows = fit(model, train_examples, val_examples, config)
    return model, rows


def chunk_segments(frames: np.ndarray) -> list[np.ndarray]:
    """Cut a raw recording into padded 128-frame segments with hop 64."""
    padded = pad_frames(np.asarray(frames))
    k = segment_count(padded.shape[0])
    return [padded[s * SEGMENT_HOP:s * SEGMENT_HOP + SEGMENT_FRAMES] for s in range(k)]


def train_slat(train_examples, val_examples, n_classes: int, config: TrainConfig):
    """Strong-assumption baseline: every segment inherits the clip labels.

    The architecture is unchanged; each raw 128-frame segment becomes a
    separate training example with K=1, and evaluation still pools
    segment scores over the full recording.
    """
    _check_source_examples(train_examples, n_classes)
    model = build_source(n_classes, seed=config.seed, pooling=config.pooling)
    model.feature_norm = compute_feature_norm([ex.frames for ex in train_examples])

    segments = [
        LabeledExample(frames=seg, y=ex.y, class_index=ex.class_index)
        for ex in train_examples
        for seg in chunk_segments(ex.frames)
    ]
    rows = fit(model, segments, val_examples, config)
    return model, rows
