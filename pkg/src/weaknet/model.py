"""The recording-level sound event network and its checkpoint format.

The trunk is six VGG-style blocks (3x3 convs, batch norm, ReLU, 2x2 max
pool) with filter counts 16/32/64/128/256/512; blocks 1-5 hold two convs,
block 6 one. A (T, 128) logmel input shrinks to (T/64, 2), a 1024-filter
2x2 layer (F1) turns that into T/64 - 1 segment columns, and a 1x1 head
maps segments to class scores that a global max or average pool reduces
to one score per class for the whole recording. Each segment column
nominally covers 128 logmel frames with a hop of 64 (3x3 padding widens
the true receptive field to roughly 316 frames; the nominal geometry is
what segment counts and reporting use).

Checkpoints are a u32 little-endian header length, a JSON header, then
float32 little-endian blobs for every entry of ``named_parameters()``
followed by ``named_buffers()``, in that order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dsp import SILENCE_LOGMEL, LogmelSpectrogram
from .engine import (
    BatchNorm2d,
    Conv2d,
    Linear,
    MaxPool2d,
    Parameter,
    ReLU,
    Sigmoid,
    sigmoid,
    softmax,
    softmax_backward,
)

SEGMENT_FRAMES = 128
SEGMENT_HOP = 64

VARIANTS = ("source", "adapted_I", "adapted_II", "adapted_III")
CHECKPOINT_VERSION = 1


@dataclass
class NetworkSpec:
    block_filters: tuple = (16, 32, 64, 128, 256, 512)
    convs_per_block: tuple = (2, 2, 2, 2, 2, 1)
    f1_filters: int = 1024
    n_mels: int = 128
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def arch_dict(self) -> dict:
        return {
            "block_filters": list(self.block_filters),
            "convs_per_block": list(self.convs_per_block),
            "f1_filters": self.f1_filters,
            "n_mels": self.n_mels,
        }

    def spec_hash(self) -> str:
        payload = json.dumps(self.arch_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class FeatureNorm:
    """Per-band affine normalization fitted on training features."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.mean) / self.std).astype(np.float32)


@dataclass
class ForwardOut:
    segments: np.ndarray  # (C, K) class score per segment; F2 channels for adapted_III
    recording: np.ndarray  # (C,)
    f1: np.ndarray  # (1024, K) post-ReLU segment features
    f2: np.ndarray | None  # (C_S, K) post-activation, None for adapted_I


@dataclass
class BatchForwardOut:
    segments: np.ndarray  # (N, C, K)
    recording: np.ndarray  # (N, C)
    f1: np.ndarray  # (N, F1, K)
    f2: np.ndarray | None  # (N, C_S, K)


def pad_frames(frames: np.ndarray, pad_value: float = SILENCE_LOGMEL) -> np.ndarray:
    """Pad (T, n_mels) up to max(128, next multiple of 64) with silence rows."""
    t = frames.shape[0]
    target = max(SEGMENT_FRAMES, -(-t // SEGMENT_HOP) * SEGMENT_HOP)
    if target == t:
        return frames
    pad = np.full((target - t, frames.shape[1]), pad_value, dtype=frames.dtype)
    return np.concatenate([frames, pad], axis=0)


def segment_count(t: int) -> int:
    """Number of 128-frame / 64-hop segments the network emits for T frames."""
    if t < SEGMENT_FRAMES:
        raise ValueError(f"input of {t} frames is shorter than one segment ({SEGMENT_FRAMES})")
    return t // SEGMENT_HOP - 1


def global_pool(segments: np.ndarray, mode: str) -> np.ndarray:
    """Reduce per-segment scores (..., K) to recording scores (...,)."""
    if mode == "max":
        return segments.max(axis=-1)
    if mode == "avg":
        return segments.mean(axis=-1)
    raise ValueError(f"unknown pooling mode: {mode}")


def _pool_forward(seg: np.ndarray, mode: str):
    if mode == "max":
        idx = seg.argmax(axis=-1)
        return np.take_along_axis(seg, idx[..., None], axis=-1)[..., 0], idx
    if mode == "avg":
        return seg.mean(axis=-1), None
    raise ValueError(f"unknown pooling mode: {mode}")


def _pool_backward(grad: np.ndarray, mode: str, k: int, idx) -> np.ndarray:
    out = np.zeros(grad.shape + (k,), dtype=grad.dtype)
    if mode == "max":
        np.put_along_axis(out, idx[..., None], grad[..., None], axis=-1)
    else:
        out += (grad / k)[..., None]
    return out


class WeakNet:
    """Source network or one of its three target-adapted variants.

    ``variant`` fixes which layers exist and which are trainable:

    * ``source``      trunk + F1 + sigmoid F2 head, everything trainable
    * ``adapted_I``   trunk frozen; F1 and a fresh 1x1 head (F_T) train
    * ``adapted_II``  trunk frozen; F1, ReLU F2 and a 1x1 F_T over F2 train
    * ``adapted_III`` trunk frozen; F1, ReLU F2 and a dense F_T on the
      pooled F2 vector train; recording scores come from F_T, so
      ``segments`` carries the F2 channels instead of target classes
    """

    def __init__(self, spec: NetworkSpec, variant: str, n_classes: int,
                 n_source_classes: int, head_activation: str = "sigmoid",
                 pooling: str = "max", seed: int = 0, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if head_activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown head activation {head_activation!r}")
        if pooling not in ("max", "avg"):
            raise ValueError(f"unknown pooling mode {pooling!r}")
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.spec = spec
        self.variant = variant
        self.n_classes = n_classes
        self.n_source_classes = n_source_classes
        self.head_activation = head_activation
        self.pooling = pooling
        self.seed = seed
        self.feature_norm: FeatureNorm | None = None

        rng = np.random.default_rng(seed)
        self.blocks = []
        in_ch = 1
        for bi, (filters, n_convs) in enumerate(zip(spec.block_filters, spec.convs_per_block), start=1):
            layers = []
            for ci in range(1, n_convs + 1):
                layers.append(Conv2d(in_ch, filters, 3, stride=1, pad=1, rng=rng,
                                     dtype=dtype, name=f"b{bi}.conv{ci}"))
                bn = BatchNorm2d(filters, momentum=spec.bn_momentum, eps=spec.bn_eps,
                                 dtype=dtype, name=f"b{bi}.bn{ci}")
                bn.init_stats()
                layers.append(bn)
                layers.append(ReLU())
                in_ch = filters
            layers.append(MaxPool2d(2))
            self.blocks.append(layers)
        self._trunk = [layer for block in self.blocks for layer in block]

        self.f1 = Conv2d(in_ch, spec.f1_filters, (2, 2), stride=1, pad=0,
                         rng=rng, dtype=dtype, name="f1")
        self.f1_act = ReLU()

        self.f2 = None
        self.f2_act = None
        self.ft = None
        if variant == "source":
            self.f2 = Conv2d(spec.f1_filters, n_classes, 1, rng=rng, dtype=dtype, name="f2")
            self.f2_act = Sigmoid()
        elif variant == "adapted_I":
            self.ft = Conv2d(spec.f1_filters, n_classes, 1, rng=rng, dtype=dtype, name="ft")
        elif variant == "adapted_II":
            self.f2 = Conv2d(spec.f1_filters, n_source_classes, 1, rng=rng, dtype=dtype, name="f2")
            self.f2_act = ReLU()
            self.ft = Conv2d(n_source_classes, n_classes, 1, rng=rng, dtype=dtype, name="ft")
        else:  # adapted_III
            self.f2 = Conv2d(spec.f1_filters, n_source_classes, 1, rng=rng, dtype=dtype, name="f2")
            self.f2_act = ReLU()
            self.ft = Linear(n_source_classes, n_classes, rng=rng, dtype=dtype, name="ft")
        self._head_cache = None

    # ----- parameter bookkeeping -------------------------------------------------

    def _layer_map(self):
        named = []
        for bi, block in enumerate(self.blocks, start=1):
            ci = 0
            for layer in block:
                if isinstance(layer, Conv2d):
                    ci += 1
                    named.append((f"b{bi}.conv{ci}", layer))
                elif isinstance(layer, BatchNorm2d):
                    named.append((f"b{bi}.bn{ci}", layer))
        named.append(("f1", self.f1))
        if self.f2 is not None:
            named.append(("f2", self.f2))
        if self.ft is not None:
            named.append(("ft", self.ft))
        return named

    def named_parameters(self):
        out = []
        for name, layer in self._layer_map():
            if isinstance(layer, Conv2d) or isinstance(layer, Linear):
                out.append((f"{name}.weight", layer.weight))
                out.append((f"{name}.bias", layer.bias))
            elif isinstance(layer, BatchNorm2d):
                out.append((f"{name}.gamma", layer.gamma))
                out.append((f"{name}.beta", layer.beta))
        return out

    def named_buffers(self):
        out = []
        for name, layer in self._layer_map():
            if isinstance(layer, BatchNorm2d):
                out.append((f"{name}.running_mean", layer.running_mean))
                out.append((f"{name}.running_var", layer.running_var))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def batchnorms(self):
        return [layer for _, layer in self._layer_map() if isinstance(layer, BatchNorm2d)]

    def snapshot(self):
        params = [p.data.copy() for p in self.parameters()]
        buffers = [b.copy() for _, b in self.named_buffers()]
        return params, buffers

    def restore(self, snap) -> None:
        params, buffers = snap
        for p, data in zip(self.parameters(), params):
            p.data = data.copy()
        for (_, buf), data in zip(self.named_buffers(), buffers):
            buf[...] = data

    # ----- forward / backward ----------------------------------------------------

    def prepare(self, frames) -> np.ndarray:
        """Pad and normalize one (T, n_mels) feature matrix to (1, 1, T', n_mels)."""
        if isinstance(frames, LogmelSpectrogram):
            frames = frames.frames
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != self.spec.n_mels:
            raise ValueError(
                f"expected (T, {self.spec.n_mels}) features, got {frames.shape}"
            )
        frames = pad_frames(frames)
        if self.feature_norm is not None:
            frames = self.feature_norm.apply(frames)
        return frames.astype(np.float32, copy=False)[None, None]

    def forward_batch(self, x: np.ndarray, train: bool = False) -> BatchForwardOut:
        n, _, t, n_mels = x.shape
        if n_mels != self.spec.n_mels:
            raise ValueError(f"expected {self.spec.n_mels} mel bands, got {n_mels}")
        if t < SEGMENT_FRAMES or t % SEGMENT_HOP:
            raise ValueError(f"input length {t} not padded; call pad_frames first")

        h = x
        for layer in self._trunk:
            h = layer.forward(h, train)
        h = self.f1.forward(h, train)
        f1_maps = self.f1_act.forward(h, train)  # (N, F1, K, 1)
        f1_seg = f1_maps[:, :, :, 0]
        k = f1_seg.shape[2]

        cache = {"k": k, "n": n}
        f2_seg = None
        if self.variant == "source":
            z = self.f2.forward(f1_maps, train)
            segments = self.f2_act.forward(z, train)[:, :, :, 0]
            f2_seg = segments
            rec, idx = _pool_forward(segments, self.pooling)
            cache.update(kind="pooled", seg=segments, idx=idx)
        elif self.variant == "adapted_I":
            z = self.ft.forward(f1_maps, train)
            segments = self._segment_activation(z, train)
            rec, idx = _pool_forward(segments, self.pooling)
            cache.update(kind="pooled", seg=segments, idx=idx)
        elif self.variant == "adapted_II":
            f2_maps = self.f2_act.forward(self.f2.forward(f1_maps, train), train)
            f2_seg = f2_maps[:, :, :, 0]
            z = self.ft.forward(f2_maps, train)
            segments = self._segment_activation(z, train)
            rec, idx = _pool_forward(segments, self.pooling)
            cache.update(kind="pooled", seg=segments, idx=idx)
        else:  # adapted_III
            f2_maps = self.f2_act.forward(self.f2.forward(f1_maps, train), train)
            f2_seg = f2_maps[:, :, :, 0]
            pooled, idx = _pool_forward(f2_seg, self.pooling)
            z = self.ft.forward(pooled, train)
            rec = sigmoid(z) if self.head_activation == "sigmoid" else softmax(z, axis=1)
            segments = f2_seg
            cache.update(kind="recording", idx=idx, rec=rec, z=z)
        self._head_cache = cache
        return BatchForwardOut(segments=segments, recording=rec, f1=f1_seg, f2=f2_seg)

    def forward(self, frames, train: bool = False) -> ForwardOut:
        out = self.forward_batch(self.prepare(frames), train)
        return ForwardOut(
            segments=out.segments[0],
            recording=out.recording[0],
            f1=out.f1[0],
            f2=None if out.f2 is None else out.f2[0],
        )

    def _segment_activation(self, z: np.ndarray, train: bool) -> np.ndarray:
        # z: (N, C, K, 1) head logits; backward recovers the derivative from
        # the cached activated segments, so nothing else is stored here
        if self.head_activation == "sigmoid":
            return sigmoid(z[:, :, :, 0])
        return softmax(z[:, :, :, 0], axis=1)

    def backward(self, grad_recording: np.ndarray | None = None,
                 grad_logits: np.ndarray | None = None) -> None:
        """Backpropagate a loss gradient taken at the recording output.

        ``grad_recording`` is d(loss)/d(recording scores). For the
        adapted_III softmax head the loss is defined on the dense-layer
        logits, so pass ``grad_logits`` instead.
        """
        cache = self._head_cache
        if cache is None:
            raise RuntimeError("backward before forward")
        k = cache["k"]

        if cache["kind"] == "recording":
            if self.head_activation == "softmax":
                if grad_logits is None:
                    raise ValueError("softmax recording head needs grad_logits")
                gz = grad_logits
            else:
                rec = cache["rec"]
                gz = grad_recording * rec * (1.0 - rec)
            gpooled = self.ft.backward(gz)
            gseg = _pool_backward(gpooled, self.pooling, k, cache["idx"])
            g = self.f2_act.backward(gseg[..., None])
            g = self.f2.backward(g)
        else:
            gseg = _pool_backward(grad_recording, self.pooling, k, cache["idx"])
            seg = cache["seg"]
            if self.head_activation == "sigmoid":
                gz = gseg * seg * (1.0 - seg)
            else:
                gz = softmax_backward(seg, gseg, axis=1)
            gz = gz[..., None]
            if self.variant == "source":
                g = self.f2.backward(gz)
            elif self.variant == "adapted_I":
                g = self.ft.backward(gz)
            else:  # adapted_II
                g = self.ft.backward(gz)
                g = self.f2_act.backward(g)
                g = self.f2.backward(g)

        g = self.f1_act.backward(g)
        trunk_trainable = any(
            p.trainable for layer in self._trunk for p in layer.params()
        )
        g = self.f1.backward(g) if trunk_trainable else self.f1.backward(g, need_input_grad=False)
        if not trunk_trainable:
            return
        for i, layer in enumerate(reversed(self._trunk)):
            last = i == len(self._trunk) - 1
            if isinstance(layer, Conv2d) and last:
                layer.backward(g, need_input_grad=False)
            else:
                g = layer.backward(g)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # ----- checkpoint I/O ---------------------------------------------------------

    def save(self, path, provenance: dict | None = None) -> None:
        header = {
            "format_version": CHECKPOINT_VERSION,
            "variant": self.variant,
            "n_classes": self.n_classes,
            "n_source_classes": self.n_source_classes,
            "head_activation": self.head_activation,
            "pooling": self.pooling,
            "seed": self.seed,
            "arch": self.spec.arch_dict(),
            "spec_hash": self.spec.spec_hash(),
            "bn_momentum": self.spec.bn_momentum,
            "bn_eps": self.spec.bn_eps,
            "feature_norm": None if self.feature_norm is None else {
                "mean": self.feature_norm.mean.astype(float).tolist(),
                "std": self.feature_norm.std.astype(float).tolist(),
            },
            "params": [{"name": n, "shape": list(p.data.shape)} for n, p in self.named_parameters()],
            "buffers": [{"name": n, "shape": list(b.shape)} for n, b in self.named_buffers()],
            "provenance": provenance or {},
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for _, p in self.named_parameters():
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
            for _, b in self.named_buffers():
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "WeakNet":
        with open(path, "rb") as fh:
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode())
            if header["format_version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version in {path}")
            arch = header["arch"]
            spec = NetworkSpec(
                block_filters=tuple(arch["block_filters"]),
                convs_per_block=tuple(arch["convs_per_block"]),
                f1_filters=arch["f1_filters"],
                n_mels=arch["n_mels"],
                bn_momentum=header["bn_momentum"],
                bn_eps=header["bn_eps"],
            )
            if spec.n_mels != 128:
                raise ValueError(f"architecture requires 128 mel bands, checkpoint has {spec.n_mels}")
            model = cls(spec, header["variant"], header["n_classes"], header["n_source_classes"],
                        head_activation=header["head_activation"], pooling=header["pooling"],
                        seed=header.get("seed", 0))
            for meta, (name, p) in zip(header["params"], model.named_parameters()):
                if meta["name"] != name or tuple(meta["shape"]) != p.data.shape:
                    raise ValueError(f"checkpoint/param mismatch at {name} in {path}")
                count = int(np.prod(meta["shape"])) if meta["shape"] else 1
                p.data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(p.data.shape).copy()
            for meta, (name, b) in zip(header["buffers"], model.named_buffers()):
                if meta["name"] != name:
                    raise ValueError(f"checkpoint/buffer mismatch at {name} in {path}")
                count = int(np.prod(meta["shape"])) if meta["shape"] else 1
                b[...] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(b.shape)
        if header.get("feature_norm"):
            model.feature_norm = FeatureNorm(
                mean=np.asarray(header["feature_norm"]["mean"], dtype=np.float32),
                std=np.asarray(header["feature_norm"]["std"], dtype=np.float32),
            )
        if header["variant"] != "source":
            freeze_trunk(model)
        return model


def freeze_trunk(model: WeakNet) -> None:
    """Pin every block parameter and BN statistic; adapted heads stay live."""
    for layer in model._trunk:
        for p in layer.params():
            p.trainable = False
        if isinstance(layer, BatchNorm2d):
            layer.frozen = True


def build_source(n_classes: int, seed: int = 0, spec: NetworkSpec | None = None,
                 pooling: str = "max") -> WeakNet:
    """Freshly initialized source network with every layer trainable."""
    return WeakNet(spec or NetworkSpec(), "source", n_classes, n_classes,
                   head_activation="sigmoid", pooling=pooling, seed=seed)
