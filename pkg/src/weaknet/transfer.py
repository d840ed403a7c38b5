"""Target-task adaptation of a trained source network and feature extraction.

All three adaptation methods copy the trunk (B1-B6) and freeze it, BN
statistics included; they differ in what sits on top:

* method I   keeps F1 trainable and replaces the head with a fresh 1x1
  layer of target classes
* method II  keeps F1 and F2 trainable, swaps F2's sigmoid for ReLU and
  stacks a 1x1 target head on F2's segment output
* method III does the same F2 swap but pools F2 first and maps the
  pooled vector to target classes with a dense layer

Recording representations come from pooling F1 (1024-dim) or F2
(source-class-dim) segment activations with max or avg.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .engine import BatchNorm2d, Conv2d
from .model import NetworkSpec, WeakNet, freeze_trunk, global_pool
from .training import TrainConfig, fit

METHODS = ("I", "II", "III")


@dataclass
class RecordingRepresentation:
    vector: np.ndarray
    layer: str  # F1 | F2
    pooling: str  # max | avg
    variant: str


def _head_activation(loss_kind: str) -> str:
    if loss_kind == "multilabel_bce":
        return "sigmoid"
    if loss_kind == "categorical_ce":
        return "softmax"
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _clone_layer(dst, src) -> None:
    if isinstance(dst, Conv2d):
        dst.weight.data = src.weight.data.copy()
        dst.bias.data = src.bias.data.copy()
    elif isinstance(dst, BatchNorm2d):
        dst.gamma.data = src.gamma.data.copy()
        dst.beta.data = src.beta.data.copy()
        dst.init_stats(src.running_mean, src.running_var)


def _adapt(source: WeakNet, variant: str, n_target: int, loss_kind: str,
           seed: int, copy_f2: bool) -> WeakNet:
    if source.variant != "source":
        raise ValueError(f"can only adapt a source model, got {source.variant!r}")
    if n_target < 2:
        raise ValueError("target task needs at least two classes")
    model = WeakNet(source.spec, variant, n_target, source.n_source_classes,
                    head_activation=_head_activation(loss_kind),
                    pooling=source.pooling, seed=seed)
    for src_block, dst_block in zip(source.blocks, model.blocks):
        for src_layer, dst_layer in zip(src_block, dst_block):
            _clone_layer(dst_layer, src_layer)
    _clone_layer(model.f1, source.f1)
    if copy_f2:
        _clone_layer(model.f2, source.f2)
    model.feature_norm = source.feature_norm
    freeze_trunk(model)
    return model


def adapt_method_i(source: WeakNet, n_target: int, loss_kind: str = "categorical_ce",
                   seed: int = 0) -> WeakNet:
    """Fine-tune F1 directly under a fresh target head; F2 is dropped."""
    return _adapt(source, "adapted_I", n_target, loss_kind, seed, copy_f2=False)


def adapt_method_ii(source: WeakNet, n_target: int, loss_kind: str = "categorical_ce",
                    seed: int = 0) -> WeakNet:
    """Stack a target head on F2's segment output; F2 becomes ReLU."""
    return _adapt(source, "adapted_II", n_target, loss_kind, seed, copy_f2=True)


def adapt_method_iii(source: WeakNet, n_target: int, loss_kind: str = "categorical_ce",
                     seed: int = 0) -> WeakNet:
    """Map the pooled F2 vector to target classes with a dense layer."""
    return _adapt(source, "adapted_III", n_target, loss_kind, seed, copy_f2=True)


def adapt(source: WeakNet, method: str, n_target: int, loss_kind: str = "categorical_ce",
          seed: int = 0) -> WeakNet:
    builders = {"I": adapt_method_i, "II": adapt_method_ii, "III": adapt_method_iii}
    if method not in builders:
        raise ValueError(f"unknown adaptation method {method!r}; pick one of {METHODS}")
    return builders[method](source, n_target, loss_kind, seed)


def default_adapt_config(seed: int = 0, loss_kind: str = "categorical_ce") -> TrainConfig:
    """Fixed-budget adaptation: lr 0.0002 for 50 epochs, final model kept."""
    return TrainConfig(lr=0.0002, epochs=50, seed=seed, loss_kind=loss_kind,
                       select_best=False, early_stop_patience=0, lr_halve_patience=0)


def adapt_train(model: WeakNet, train_examples, config: TrainConfig, val_examples=()):
    """Train the unfrozen layers of an adapted model on the target set."""
    if model.variant == "source":
        raise ValueError("adapt_train expects an adapted model")
    if not train_examples:
        raise ValueError("empty target training set")
    return fit(model, train_examples, list(val_examples), config)


def extract_representation(model: WeakNet, frames, layer: str = "F1",
                           pooling: str = "max") -> RecordingRepresentation:
    """Pool one layer's segment activations into a recording vector."""
    if layer not in ("F1", "F2"):
        raise ValueError(f"unknown representation layer {layer!r}")
    if pooling not in ("max", "avg"):
        raise ValueError(f"unknown pooling mode {pooling!r}")
    out = model.forward(frames)
    if layer == "F1":
        seg = out.f1
    else:
        if out.f2 is None:
            raise ValueError(f"variant {model.variant!r} has no F2 layer to extract from")
        seg = out.f2
    return RecordingRepresentation(
        vector=global_pool(seg, pooling), layer=layer, pooling=pooling, variant=model.variant
    )


def write_representations(path, ids, matrix: np.ndarray, meta: dict) -> None:
    """CSV matrix keyed by recording id, with a JSON sidecar at path + '.json'."""
    matrix = np.asarray(matrix)
    d = matrix.shape[1] if matrix.size else int(meta.get("dim", 0))
    with open(path, "w") as fh:
        fh.write("path," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for rid, row in zip(ids, matrix):
            fh.write(str(rid) + "," + ",".join(f"{v:.9g}" for v in row) + "\n")
    sidecar = dict(meta)
    sidecar["dim"] = d
    sidecar["count"] = len(ids)
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_representations(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("path,"):
            raise ValueError(f"not a representation file: {path}")
        ids, rows = [], []
        for line in fh:
            cells = line.rstrip("\n").split(",")
            ids.append(cells[0])
            rows.append([float(v) for v in cells[1:]])
    d = len(header.rstrip("\n").split(",")) - 1
    matrix = np.array(rows, dtype=np.float64).reshape(len(ids), d)
    try:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {}
    return ids, matrix, meta
