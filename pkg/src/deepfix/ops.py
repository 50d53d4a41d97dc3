"""Differentiable array kernels on (batch, channel, height, width) arrays.

Every function here is pure: outputs depend only on the arguments (and an
explicit seed for dropout). Arrays are plain numpy ``ndarray`` objects; the
gradient buffers live on :class:`deepfix.layers.Param`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided


class DimensionError(ValueError):
    """Raised when array shapes disagree; the message names the axis."""


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    hole: int = 1
    pad: int | None = None  # None -> "same" padding for stride 1

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.hole < 1:
            raise ValueError(f"hole must be >= 1, got {self.hole}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel extents must be >= 1")
        if self.pad is not None and self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")

    @property
    def extent_h(self) -> int:
        return effective_extent(self.kernel_h, self.hole)

    @property
    def extent_w(self) -> int:
        return effective_extent(self.kernel_w, self.hole)

    @property
    def pad_h(self) -> int:
        return self.extent_h // 2 if self.pad is None else self.pad

    @property
    def pad_w(self) -> int:
        return self.extent_w // 2 if self.pad is None else self.pad

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad_h - self.extent_h) // self.stride + 1
        ow = (w + 2 * self.pad_w - self.extent_w) // self.stride + 1
        return oh, ow


def effective_extent(k: int, hole: int) -> int:
    """Span of a k-tap kernel whose taps sit ``hole`` pixels apart."""
    return k + (k - 1) * (hole - 1)


def _check_conv_shapes(x, weights, bias, spec):
    if x.ndim != 4:
        raise DimensionError(f"input must have 4 axes (batch, channel, height, width), got {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"channel axis: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        for axis, got, want in zip(("out_channels", "in_channels", "kernel_h", "kernel_w"),
                                   weights.shape, spec.weight_shape):
            if got != want:
                raise DimensionError(f"weights {axis} axis: got {got}, expected {want}")
        raise DimensionError(f"weights shape {weights.shape} != {spec.weight_shape}")
    if bias is not None and np.shape(bias) != (spec.out_channels,):
        raise DimensionError(
            f"bias axis: got shape {np.shape(bias)}, expected ({spec.out_channels},)")
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    if oh < 1:
        raise DimensionError(
            f"height axis: padded input {x.shape[2] + 2 * spec.pad_h} smaller than kernel extent {spec.extent_h}")
    if ow < 1:
        raise DimensionError(
            f"width axis: padded input {x.shape[3] + 2 * spec.pad_w} smaller than kernel extent {spec.extent_w}")
    return oh, ow


def _pad(x, ph, pw, value=0.0):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _windows(xp, kh, kw, oh, ow, stride, hole):
    """Strided view (N, C, kh, kw, oh, ow) of a padded input; no copy."""
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], kh, kw, oh, ow),
        strides=(sn, sc, sh * hole, sw * hole, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d_forward(x, weights, bias, spec: ConvSpec):
    """Dilated 2-D cross-correlation with zero padding.

    ``out[n, o, y, x] = bias[o] + sum_{c,i,j} w[o, c, i, j] * in[n, c, y*s + i*hole, x*s + j*hole]``
    on the zero-padded input.
    """
    oh, ow = _check_conv_shapes(x, weights, bias, spec)
    xp = _pad(x, spec.pad_h, spec.pad_w)
    cols = _windows(xp, spec.kernel_h, spec.kernel_w, oh, ow, spec.stride, spec.hole)
    # (O, C, kh, kw) x (N, C, kh, kw, oh, ow) -> (O, N, oh, ow)
    out = np.tensordot(weights, cols, axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + np.asarray(bias).reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out, x, weights, spec: ConvSpec):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    oh, ow = _check_conv_shapes(x, weights, None, spec)
    want = (x.shape[0], spec.out_channels, oh, ow)
    if grad_out.shape != want:
        raise DimensionError(f"output_grad shape {grad_out.shape} != forward output shape {want}")
    ph, pw = spec.pad_h, spec.pad_w
    xp = _pad(x, ph, pw)
    cols = _windows(xp, spec.kernel_h, spec.kernel_w, oh, ow, spec.stride, spec.hole)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 4, 5]))
    grad_b = grad_out.sum(axis=(0, 2, 3))

    # (C, kh, kw, N, oh, ow): contribution of each tap to the padded input
    dcols = np.tensordot(weights, grad_out, axes=([0], [1]))
    dxp = np.zeros_like(xp)
    s, d = spec.stride, spec.hole
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            dxp[:, :, i * d:i * d + s * (oh - 1) + 1:s, j * d:j * d + s * (ow - 1) + 1:s] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    grad_x = dxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def pool_output_size(n: int, window: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - window) // stride + 1


def maxpool_forward(x, window: int = 3, stride: int = 2, pad: int | None = None):
    """Max-pool with -inf padding.

    ``pad`` defaults to ``window // 2`` which gives ``ceil(n / stride)`` output
    rows for odd windows. Returns ``(out, argmax)`` where ``argmax`` is the
    row-major index of the winner inside each window; ties go to the first.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if x.ndim != 4:
        raise DimensionError(f"input must have 4 axes, got {x.ndim}")
    pad = window // 2 if pad is None else pad
    oh = pool_output_size(x.shape[2], window, stride, pad)
    ow = pool_output_size(x.shape[3], window, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(f"spatial axes {x.shape[2:]} too small for pool window {window}")
    xp = _pad(x, pad, pad, value=-np.inf)
    win = _windows(xp, window, window, oh, ow, stride, 1)
    n, c = x.shape[:2]
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, oh, ow, window * window)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(grad_out, argmax, input_shape, window: int = 3, stride: int = 2,
                     pad: int | None = None):
    pad = window // 2 if pad is None else pad
    n, c, h, w = input_shape
    oh, ow = grad_out.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for t in range(window * window):
        i, j = divmod(t, window)
        dxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += \
            np.where(argmax == t, grad_out, 0.0)
    return dxp[:, :, pad:pad + h, pad:pad + w]


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0.0)


def dropout_mask(shape, rate: float, seed: int, dtype=np.float64):
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(x, rate: float, mode: str = "train", seed: int = 0):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x.copy()
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return x * dropout_mask(x.shape, rate, seed, x.dtype)


def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(
        t <= 1, (a + 2) * t3 - (a + 3) * t2 + 1,
        np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0))


def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5):
    """(n_out, n_in) resampling matrix along one axis.

    Pixel centres are aligned (output pixel ``k`` samples input coordinate
    ``(k + 0.5) * n_in / n_out - 0.5``); taps beyond the edge are clamped.
    """
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos).astype(int)
    m = np.zeros((n_out, n_in))
    for off in (-1, 0, 1, 2):
        idx = base + off
        wts = cubic_kernel(pos - idx, a)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wts)
    return m


def bicubic_upsample(img, out_h: int, out_w: int):
    """Resize a 2-D map (or the trailing two axes of an array) bicubically."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"bicubic input must be at least 2x2, got {h}x{w}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"requested output {out_h}x{out_w} is empty")
    my = bicubic_matrix(h, out_h)
    mx = bicubic_matrix(w, out_w)
    return my @ img @ mx.T
