"""Minimal NCHW layer zoo with hand-written backward passes.

All parameters and activations are float32 numpy arrays. Each layer caches
whatever its backward pass needs during ``forward``; ``backward`` returns the
gradient w.r.t. the layer input and leaves parameter gradients on the layer
(``grad_w``, ``grad_b``). There is no autodiff: the set of layers is exactly
what the supported classifier topologies need (conv -> relu -> optional
max-pool blocks, a flatten boundary, then dense -> relu chains).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float32


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initializer."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold NCHW input into (N, C*kh*kw, n_positions) patch columns."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    n, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), (oh, ow)


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch-column gradients back to NCHW input layout."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dcols = dcols.reshape(n, c, kh, kw, oh, ow)
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


class Conv2d:
    """2-D convolution; ``w`` has shape [n_out, n_in, kh, kw]."""

    kind = "conv"

    def __init__(self, name: str, n_in: int, n_out: int, kernel: int,
                 stride: int = 1, pad: int = 0, rng: np.random.Generator | None = None):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.kh = self.kw = int(kernel)
        self.stride = stride
        self.pad = pad
        fan_in = n_in * self.kh * self.kw
        if rng is None:
            self.w = np.zeros((n_out, n_in, self.kh, self.kw), dtype=DTYPE)
            self.b = np.zeros(n_out, dtype=DTYPE)
        else:
            self.w = fan_in_uniform(rng, (n_out, n_in, self.kh, self.kw), fan_in)
            self.b = fan_in_uniform(rng, (n_out,), fan_in)
        self.grad_w = None
        self.grad_b = None
        self._cols = None
        self._x_shape = None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.shape[1] != self.w.shape[1]:
            raise ShapeError(
                f"{self.name}: input has {x.shape[1]} channels, weights expect {self.w.shape[1]}")
        cols, (oh, ow) = im2col(x, self.kh, self.kw, self.stride, self.pad)
        w2d = self.w.reshape(self.w.shape[0], -1)
        y = np.matmul(w2d, cols) + self.b[:, None]
        if cache:
            self._cols = cols
            self._x_shape = x.shape
        return y.reshape(x.shape[0], self.w.shape[0], oh, ow)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n = dy.shape[0]
        dyf = dy.reshape(n, dy.shape[1], -1)
        self.grad_w = np.einsum("nop,nkp->ok", dyf, self._cols).reshape(self.w.shape)
        self.grad_b = dy.sum(axis=(0, 2, 3))
        w2d = self.w.reshape(self.w.shape[0], -1)
        dcols = np.matmul(w2d.T, dyf)
        return col2im(dcols, self._x_shape, self.kh, self.kw, self.stride, self.pad)

    def out_spatial(self, h: int, w: int):
        return ((h + 2 * self.pad - self.kh) // self.stride + 1,
                (w + 2 * self.pad - self.kw) // self.stride + 1)

    def clone(self) -> "Conv2d":
        c = Conv2d(self.name, self.w.shape[1], self.w.shape[0], self.kh,
                   stride=self.stride, pad=self.pad)
        c.w = self.w.copy()
        c.b = self.b.copy()
        c.n_in = self.n_in
        c.n_out = self.n_out
        return c


class ReLU:
    """Elementwise max(0, x). ``source`` names the conv layer whose activation
    maps this ReLU produces (None for dense-side ReLUs)."""

    kind = "relu"

    def __init__(self, source: str | None = None):
        self.source = source
        self._mask = None
        self.act = None       # captured post-activation maps
        self.grad_out = None  # captured dLoss/d(activation)
        self.capture = False

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        y = np.maximum(x, 0.0)
        if cache:
            self._mask = x > 0.0
        if self.capture:
            self.act = y.copy()
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self.capture:
            self.grad_out = dy.copy()
        return dy * self._mask

    def clone(self) -> "ReLU":
        return ReLU(self.source)


class MaxPool2d:
    """Non-overlapping max pooling; spatial dims must divide the window."""

    kind = "pool"

    def __init__(self, size: int = 2):
        self.size = size
        self._idx = None
        self._x_shape = None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ShapeError(f"pool window {s} does not divide spatial dims {h}x{w}")
        xr = x.reshape(n, c, h // s, s, w // s, s)
        windows = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
        if cache:
            self._idx = windows.argmax(axis=-1)
            self._x_shape = x.shape
        return windows.max(axis=-1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, c, h, w = self._x_shape
        s = self.size
        dwin = np.zeros((n, c, h // s, w // s, s * s), dtype=dy.dtype)
        np.put_along_axis(dwin, self._idx[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(n, c, h, w)

    def clone(self) -> "MaxPool2d":
        return MaxPool2d(self.size)


class Flatten:
    """NCHW -> (N, C*H*W) in row-major (channel, height, width) order."""

    kind = "flatten"

    def __init__(self):
        self._x_shape = None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if cache:
            self._x_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy.reshape(self._x_shape)

    def clone(self) -> "Flatten":
        return Flatten()


class Dense:
    """Affine layer; ``w`` has shape [n_out, n_in]."""

    kind = "dense"

    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        if rng is None:
            self.w = np.zeros((n_out, n_in), dtype=DTYPE)
            self.b = np.zeros(n_out, dtype=DTYPE)
        else:
            self.w = fan_in_uniform(rng, (n_out, n_in), n_in)
            self.b = fan_in_uniform(rng, (n_out,), n_in)
        self.grad_w = None
        self.grad_b = None
        self._x = None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.shape[1] != self.w.shape[1]:
            raise ShapeError(
                f"{self.name}: input width {x.shape[1]} != weight width {self.w.shape[1]}")
        if cache:
            self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.grad_w = dy.T @ self._x
        self.grad_b = dy.sum(axis=0)
        return dy @ self.w

    def clone(self) -> "Dense":
        d = Dense(self.name, self.w.shape[1], self.w.shape[0])
        d.w = self.w.copy()
        d.b = self.b.copy()
        d.n_in = self.n_in
        d.n_out = self.n_out
        return d


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean-reduced softmax cross-entropy.

    Returns (loss, dlogits) where dlogits already carries the 1/batch factor.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = expz / denom
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits.astype(logits.dtype)
