"""Dense-tensor layers with reverse-mode gradients.

Just the ops the recording-level network needs: 2-d convolution
(cross-correlation convention), batch norm, 2x2 max pooling, a dense
layer and the usual activations. Arrays are (N, C, H, W) row-major
numpy, float32 in production; every op keeps the dtype of its input so
gradient checks can run the same code in float64.

Layers cache whatever the last forward needs for backward, so a model
instance is single-writer during training; eval-mode outputs are pure
functions of (parameters, input).
"""

from __future__ import annotations

import numpy as np


class Parameter:
    """A weight array plus its accumulated gradient and trainable flag."""

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data: np.ndarray, trainable: bool = True, name: str = ""):
        self.data = data
        self.grad = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.trainable:
            return
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Fan-in scaled uniform init, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(s: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    inner = np.sum(grad_out * s, axis=axis, keepdims=True)
    return s * (grad_out - inner)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(C, N, Hp, Wp) -> (C*kh*kw, N*Ho*Wo) patch matrix.

    Channels-outermost layout lets every kernel offset land as one
    contiguous block copy, which is what makes the conv layers fast.
    """
    c, n, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1:
        return xp.reshape(c, n * ho * wo)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + (ho - 1) * stride + 1:stride,
                               j:j + (wo - 1) * stride + 1:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


class Conv2d:
    """Cross-correlation with square stride and symmetric zero padding."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0,
                 rng: np.random.Generator | None = None, dtype=np.float32, name="conv"):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh, self.kw = kh, kw
        self.stride = stride
        self.pad = pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.weight = Parameter(he_uniform((out_channels, in_channels, kh, kw), fan_in, rng, dtype),
                                name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), name=f"{name}.bias")
        self._xp = None
        self._in_shape = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"{self.weight.name}: input has {x.shape[1]} channels, expected {self.in_channels}"
            )
        xt = x.transpose(1, 0, 2, 3)  # (C, N, H, W)
        if self.pad:
            xp = np.pad(xt, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        else:
            xp = np.ascontiguousarray(xt)
        if xp.shape[2] < self.kh or xp.shape[3] < self.kw:
            raise ValueError(
                f"{self.weight.name}: padded input {xp.shape[2]}x{xp.shape[3]} smaller "
                f"than kernel {self.kh}x{self.kw}"
            )
        self._xp = xp
        self._in_shape = x.shape
        n = x.shape[0]
        cols = _im2col(xp, self.kh, self.kw, self.stride)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = wmat @ cols + self.bias.data[:, None]  # (O, N*Ho*Wo)
        ho = (xp.shape[2] - self.kh) // self.stride + 1
        wo = (xp.shape[3] - self.kw) // self.stride + 1
        return out.reshape(self.out_channels, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        if self._xp is None:
            raise RuntimeError(f"{self.weight.name}: backward before forward")
        xp, (n, _, h, w) = self._xp, self._in_shape
        _, _, ho, wo = grad_out.shape

        gt = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3))  # (O, N, Ho, Wo)
        gmat = gt.reshape(self.out_channels, n * ho * wo)
        cols = _im2col(xp, self.kh, self.kw, self.stride)
        self.weight.accumulate((gmat @ cols.T).reshape(self.weight.data.shape))
        self.bias.accumulate(gmat.sum(axis=1))
        if not need_input_grad:
            return None

        # input grad: dilate by stride, then full-correlate with flipped kernels
        s = self.stride
        hd, wd = (ho - 1) * s + 1, (wo - 1) * s + 1
        if s > 1:
            gd = np.zeros((self.out_channels, n, hd, wd), dtype=grad_out.dtype)
            gd[:, :, ::s, ::s] = gt
        else:
            gd = gt
        hp, wp = xp.shape[2], xp.shape[3]
        # rows/cols of xp beyond the last window start never influenced the output
        extra_h, extra_w = hp - (hd + self.kh - 1), wp - (wd + self.kw - 1)
        gp = np.pad(gd, ((0, 0), (0, 0),
                         (self.kh - 1, self.kh - 1 + extra_h),
                         (self.kw - 1, self.kw - 1 + extra_w)))
        wflip = self.weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, O, kh, kw)
        gcols = _im2col(gp, self.kh, self.kw, 1)
        dxp = wflip.reshape(self.in_channels, -1) @ gcols  # (C, N*Hp*Wp)
        dxp = dxp.reshape(self.in_channels, n, hp, wp)
        if self.pad:
            dxp = dxp[:, :, self.pad:self.pad + h, self.pad:self.pad + w]
        return dxp.transpose(1, 0, 2, 3)


class BatchNorm2d:
    """Per-channel batch normalization.

    Train mode normalizes by batch statistics (biased variance) and
    blends them into the running stats with ``momentum``; eval mode uses
    the running stats and raises if none exist yet. Model builders call
    :meth:`init_stats` so freshly assembled networks can run eval mode.
    Setting ``frozen`` pins the layer to eval behaviour regardless of the
    requested mode.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32, name="bn"):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = None
        self.running_var = None
        self.frozen = False
        self.name = name
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def init_stats(self, mean=None, var=None) -> None:
        dtype = self.gamma.data.dtype
        self.running_mean = (np.zeros(self.channels, dtype=dtype)
                             if mean is None else np.asarray(mean, dtype=dtype).copy())
        self.running_var = (np.ones(self.channels, dtype=dtype)
                            if var is None else np.asarray(var, dtype=dtype).copy())

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        if self.frozen:
            train = False
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.running_mean is None:
                self.running_mean = mean.astype(x.dtype, copy=True)
                self.running_var = var.astype(x.dtype, copy=True)
            else:
                m = self.momentum
                self.running_mean += m * (mean - self.running_mean)
                self.running_var += m * (var - self.running_var)
        else:
            if self.running_mean is None:
                raise RuntimeError(f"{self.name}: eval mode before any running stats exist")
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
        self._cache = (xhat, inv_std, train)
        return self.gamma.data[:, None, None] * xhat + self.beta.data[:, None, None]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        xhat, inv_std, train = self._cache
        self.beta.accumulate(grad_out.sum(axis=(0, 2, 3)))
        self.gamma.accumulate((grad_out * xhat).sum(axis=(0, 2, 3)))
        g = grad_out * self.gamma.data[:, None, None]
        if not train:
            return g * inv_std[:, None, None]
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        mean_g = g.sum(axis=(0, 2, 3)) / m
        mean_gx = (g * xhat).sum(axis=(0, 2, 3)) / m
        return inv_std[:, None, None] * (g - mean_g[:, None, None] - xhat * mean_gx[:, None, None])


class MaxPool2d:
    """Non-overlapping max pooling; trailing odd rows/columns are dropped.

    Backward routes each gradient to the first row-major argmax of its
    window.
    """

    def __init__(self, window: int = 2):
        self.window = window
        self._cache = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        k = self.window
        n, c, h, w = x.shape
        if h < k or w < k:
            raise ValueError(f"maxpool window {k} larger than spatial dims {h}x{w}")
        ho, wo = h // k, w // k
        xc = x[:, :, :ho * k, :wo * k]
        patches = xc.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        idx = patches.argmax(axis=-1)
        out = np.take_along_axis(patches, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("maxpool backward before forward")
        (n, c, h, w), idx = self._cache
        k = self.window
        ho, wo = idx.shape[2], idx.shape[3]
        flat = np.zeros((n, c, ho, wo, k * k), dtype=grad_out.dtype)
        np.put_along_axis(flat, idx[..., None], grad_out[..., None], axis=-1)
        dx = np.zeros((n, c, h, w), dtype=grad_out.dtype)
        dx[:, :, :ho * k, :wo * k] = (
            flat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        )
        return dx


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask


class Sigmoid:
    def __init__(self):
        self._out = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._out = sigmoid(x)
        return self._out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._out * (1.0 - self._out)


class Linear:
    """Dense layer on (N, D) inputs."""

    def __init__(self, in_features, out_features, rng: np.random.Generator | None = None,
                 dtype=np.float32, name="linear"):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(he_uniform((out_features, in_features), in_features, rng, dtype),
                                name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), name=f"{name}.bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.weight.accumulate(grad_out.T @ self._x)
        self.bias.accumulate(grad_out.sum(axis=0))
        return grad_out @ self.weight.data
