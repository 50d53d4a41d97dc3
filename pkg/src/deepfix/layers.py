"""Layers with explicit forward/backward passes.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Param.grad`` during ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import ops
from .ops import ConvSpec, DimensionError

PRETRAINED = "pretrained"
FRESH = "fresh"

# Standard deviations (fractions of the map extent) of the location Gaussians.
DEFAULT_LOCATION_SIGMAS = (0.08, 0.16, 0.32, 0.64)
DEFAULT_LOCATION_VARIANCES = tuple(
    (sx * sx, sy * sy) for sx, sy in product(DEFAULT_LOCATION_SIGMAS, repeat=2))


class Param:
    """A trainable array with its gradient and momentum buffer."""

    def __init__(self, data, group=FRESH, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)
        self.group = group
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, group={self.group!r})"


@dataclass(frozen=True)
class LocationFeatureBank:
    maps: np.ndarray  # (16, H, W)
    variances: tuple

    @property
    def shape(self):
        return self.maps.shape[1:]


def make_location_bank(height, width, variances=DEFAULT_LOCATION_VARIANCES):
    """Constant centred Gaussian maps, one per ``(var_x, var_y)`` pair.

    Variances are in units of the squared map width/height, so the same bank
    definition works at any resolution. Maps peak at 1 on the continuous centre.
    """
    if height < 1 or width < 1:
        raise ValueError(f"bank size must be positive, got {height}x{width}")
    variances = tuple((float(vx), float(vy)) for vx, vy in variances)
    if any(vx <= 0 or vy <= 0 for vx, vy in variances):
        raise ValueError("location variances must be positive")
    y = np.arange(height, dtype=np.float64)[:, None] - (height - 1) / 2.0
    x = np.arange(width, dtype=np.float64)[None, :] - (width - 1) / 2.0
    maps = np.stack([
        np.exp(-(x * x / (2 * vx * width * width) + y * y / (2 * vy * height * height)))
        for vx, vy in variances
    ])
    maps.setflags(write=False)
    return LocationFeatureBank(maps, variances)


class Layer:
    def params(self):
        return []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, spec: ConvSpec, activation=True, group=FRESH, name="conv"):
        self.spec = spec
        self.activation = activation
        self.name = name
        self.weight = Param(np.zeros(spec.weight_shape), group, f"{name}.weight")
        self.bias = Param(np.zeros(spec.out_channels), group, f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        self._x = x
        out = ops.conv2d_forward(x, self.weight.data, self.bias.data, self.spec)
        if self.activation:
            self._pre = out
            out = ops.relu(out)
        return out

    def backward(self, grad):
        if self.activation:
            grad = ops.relu_backward(grad, self._pre)
        gx, gw, gb = ops.conv2d_backward(grad, self._x, self.weight.data, self.spec)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


def lbc_forward(x, bank: LocationFeatureBank, weights, loc_weights, bias, spec: ConvSpec):
    """Location biased convolution followed by ReLU.

    The data term and the location term are convolved separately and summed,
    which equals a single convolution over the channel concatenation of ``x``
    and the bank. The location term does not depend on ``x`` so it is
    computed once and broadcast over the batch.
    """
    if tuple(bank.shape) != tuple(x.shape[2:]):
        raise DimensionError(
            f"location bank is {bank.shape[0]}x{bank.shape[1]} but input is {x.shape[2]}x{x.shape[3]}")
    data_term = ops.conv2d_forward(x, weights, bias, spec)
    return ops.relu(data_term + location_term(bank, loc_weights, spec))


def location_term(bank, loc_weights, spec):
    loc_spec = ConvSpec(spec.kernel_h, spec.kernel_w, bank.maps.shape[0], spec.out_channels,
                        spec.stride, spec.hole, spec.pad)
    return ops.conv2d_forward(bank.maps[None], loc_weights, None, loc_spec)


class LBCConv(Layer):
    """Convolution whose input is augmented with a constant location bank.

    With ``use_bank=False`` the layer is an ordinary convolution + ReLU with
    the same geometry (the no-location ablation).
    """

    def __init__(self, spec: ConvSpec, use_bank=True, variances=DEFAULT_LOCATION_VARIANCES,
                 group=FRESH, name="lbc"):
        self.spec = spec
        self.use_bank = use_bank
        self.variances = tuple(variances)
        self.name = name
        self.weight = Param(np.zeros(spec.weight_shape), group, f"{name}.weight")
        self.bias = Param(np.zeros(spec.out_channels), group, f"{name}.bias")
        if use_bank:
            shape = (spec.out_channels, len(self.variances), spec.kernel_h, spec.kernel_w)
            self.loc_weight = Param(np.zeros(shape), group, f"{name}.loc_weight")
        self._banks = {}
        self._loc_spec = ConvSpec(spec.kernel_h, spec.kernel_w, len(self.variances),
                                  spec.out_channels, spec.stride, spec.hole, spec.pad)

    def params(self):
        if self.use_bank:
            return [self.weight, self.loc_weight, self.bias]
        return [self.weight, self.bias]

    def bank(self, height, width):
        key = (height, width)
        if key not in self._banks:
            self._banks[key] = make_location_bank(height, width, self.variances)
        return self._banks[key]

    def forward(self, x, train=False):
        self._x = x
        pre = ops.conv2d_forward(x, self.weight.data, self.bias.data, self.spec)
        if self.use_bank:
            self._bank = self.bank(*x.shape[2:])
            pre = pre + location_term(self._bank, self.loc_weight.data, self.spec)
        self._pre = pre
        return ops.relu(pre)

    def backward(self, grad):
        grad = ops.relu_backward(grad, self._pre)
        gx, gw, gb = ops.conv2d_backward(grad, self._x, self.weight.data, self.spec)
        self.weight.grad += gw
        self.bias.grad += gb
        if self.use_bank:
            g_sum = grad.sum(axis=0, keepdims=True)
            _, glw, _ = ops.conv2d_backward(g_sum, self._bank.maps[None], self.loc_weight.data,
                                            self._loc_spec)
            self.loc_weight.grad += glw
        return gx


class MaxPool(Layer):
    def __init__(self, window=3, stride=2, pad=None):
        self.window, self.stride, self.pad = window, stride, pad

    def forward(self, x, train=False):
        self._shape = x.shape
        out, self._argmax = ops.maxpool_forward(x, self.window, self.stride, self.pad)
        return out

    def backward(self, grad):
        return ops.maxpool_backward(grad, self._argmax, self._shape, self.window, self.stride,
                                    self.pad)


class Dropout(Layer):
    """Inverted dropout. ``seed`` must be set before each training forward."""

    def __init__(self, rate=0.5):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.seed = 0

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = ops.dropout_mask(x.shape, self.rate, self.seed, x.dtype)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Inception(Layer):
    """Four parallel branches concatenated along channels.

    ``widths`` are the output channels of the 1x1, 3x3, dilated 3x3 and pool
    branches; ``reduce`` the 1x1 bottleneck widths ahead of the two 3x3s.
    """

    def __init__(self, in_channels, widths, reduce, group=FRESH, name="inception"):
        wa, wb, wc, wd = widths
        rb, rc = reduce
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.name = name

        def conv(k, cin, cout, hole, tag):
            return Conv2d(ConvSpec(k, k, cin, cout, hole=hole), group=group, name=f"{name}.{tag}")

        self.branches = [
            [conv(1, in_channels, wa, 1, "a1x1")],
            [conv(1, in_channels, rb, 1, "b1x1"), conv(3, rb, wb, 1, "b3x3")],
            [conv(1, in_channels, rc, 1, "c1x1"), conv(3, rc, wc, 2, "c3x3h2")],
            [MaxPool(3, 1, 1), conv(1, in_channels, wd, 1, "d1x1")],
        ]

    @property
    def out_channels(self):
        return sum(self.widths)

    def params(self):
        return [p for branch in self.branches for layer in branch for p in layer.params()]

    def forward(self, x, train=False):
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"channel axis: inception expects {self.in_channels} channels, got {x.shape[1]}")
        outs = []
        for branch in self.branches:
            h = x
            for layer in branch:
                h = layer.forward(h, train)
            outs.append(h)
        for k, o in enumerate(outs):
            if o.shape[2:] != x.shape[2:]:
                raise DimensionError(
                    f"inception branch {k} changed spatial size {x.shape[2:]} -> {o.shape[2:]}")
        return np.concatenate(outs, axis=1)

    def backward(self, grad):
        gx = None
        start = 0
        for branch, width in zip(self.branches, self.widths):
            g = grad[:, start:start + width]
            start += width
            for layer in reversed(branch):
                g = layer.backward(g)
            gx = g if gx is None else gx + g
        return gx


class Upsample(Layer):
    """Bicubic resize of a (N, C, h, w) array to a fixed output size."""

    def __init__(self, out_h, out_w):
        self.out_h, self.out_w = out_h, out_w
        self._mats = {}

    def _matrices(self, h, w):
        if (h, w) not in self._mats:
            if h < 2 or w < 2:
                raise DimensionError(f"bicubic input must be at least 2x2, got {h}x{w}")
            self._mats[h, w] = (ops.bicubic_matrix(h, self.out_h), ops.bicubic_matrix(w, self.out_w))
        return self._mats[h, w]

    def forward(self, x, train=False):
        self._my, self._mx = self._matrices(*x.shape[2:])
        return self._my @ x @ self._mx.T

    def backward(self, grad):
        return self._my.T @ grad @ self._mx


def euclidean_loss(predicted, target):
    """Half mean squared error and its gradient w.r.t. ``predicted``."""
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise DimensionError(f"loss operands differ in shape: {predicted.shape} vs {target.shape}")
    diff = predicted - target
    n = diff.size
    return float(np.sum(diff * diff) / (2 * n)), diff / n


def count_params(layer) -> int:
    return sum(p.size for p in layer.params())
