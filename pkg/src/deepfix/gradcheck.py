"""Finite-difference checks of every backward pass.

Each check contracts the layer output with a fixed random cotangent ``r``,
so the scalar objective is ``sum(r * f(x))``. Its analytic gradient comes
from ``backward(r)``; the numeric one from central differences on a random
sample of entries of the input and of every parameter.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .layers import Conv2d, Dropout, Inception, LBCConv, MaxPool, Upsample, euclidean_loss
from .ops import ConvSpec, relu, relu_backward

EPS = 1e-6
TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_error: float
    probes: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:28s} max rel err {self.max_rel_error:.2e} ({self.probes} probes)"


def relative_error(analytic, numeric, scale):
    """``|a - n| / max(|a|, |n|, 1e-3 * scale)``.

    The floor keeps entries whose true gradient is (near) zero, for example
    behind an inactive ReLU, from dividing round-off by round-off. ``scale``
    is the largest analytic magnitude of the array being probed.
    """
    denom = max(abs(analytic), abs(numeric), 1e-3 * scale, 1e-300)
    return abs(analytic - numeric) / denom


def _probe(objective, array, analytic, rng, n_probes, eps=EPS):
    """Largest relative error over ``n_probes`` random entries of ``array``."""
    flat = array.reshape(-1)
    grad = analytic.reshape(-1)
    scale = float(np.max(np.abs(grad))) if grad.size else 0.0
    idx = rng.choice(flat.size, size=min(n_probes, flat.size), replace=False)
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = objective()
        flat[i] = old - eps
        down = objective()
        flat[i] = old
        numeric = (up - down) / (2 * eps)
        worst = max(worst, relative_error(grad[i], numeric, scale))
    return worst, len(idx)


def check_layer(name, layer, x, seed=0, n_probes=12, train=False, dropout_seed=0):
    """Check input and parameter gradients of a single layer (or network)."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)

    def run(inp):
        if isinstance(layer, Dropout):
            layer.seed = dropout_seed
        if hasattr(layer, "forward_full"):
            return layer.forward_full(inp, train=train, dropout_seed=dropout_seed)
        return layer.forward(inp, train)

    out = run(x)
    r = rng.standard_normal(out.shape)
    params = layer.params() if hasattr(layer, "params") else []
    for p in params:
        p.zero_grad()
    if hasattr(layer, "backward_full"):
        gx = layer.backward_full(r)
    else:
        gx = layer.backward(r)
    analytic = {id(p): p.grad.copy() for p in params}

    def objective():
        return float(np.sum(r * run(x)))

    worst, probes = _probe(objective, x, gx, rng, n_probes)
    for p in params:
        w, n = _probe(objective, p.data, analytic[id(p)], rng, n_probes)
        worst, probes = max(worst, w), probes + n
    return GradCheckResult(name, worst, probes)


def _randomize(layer, rng, std=0.3):
    for p in layer.params():
        p.data[...] = rng.normal(0.0, std, p.shape)


def _conv_case(name, spec, rng, activation=True, hw=(9, 11)):
    layer = Conv2d(spec, activation=activation, name=name)
    _randomize(layer, rng)
    x = rng.standard_normal((2, spec.in_channels, *hw))
    return name, layer, x


class _Relu:
    def forward(self, x, train=False):
        self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(grad, self._x)


class _Loss:
    """Euclidean loss against a fixed target, wrapped as a layer."""

    def __init__(self, target):
        self.target = target

    def forward(self, x, train=False):
        loss, self._grad = euclidean_loss(x, self.target)
        return np.array(loss)

    def backward(self, grad):
        return grad * self._grad


def layer_cases(seed=0):
    """The per-layer checks as ``(name, layer, input)`` triples."""
    rng = np.random.default_rng(seed)
    cases = [
        _conv_case("conv 3x3", ConvSpec(3, 3, 3, 4), rng),
        _conv_case("conv 3x3 hole 2", ConvSpec(3, 3, 3, 4, hole=2), rng),
        _conv_case("conv 5x5 hole 6", ConvSpec(5, 5, 2, 3, hole=6), rng, hw=(26, 27)),
        _conv_case("conv 3x3 stride 2", ConvSpec(3, 3, 2, 3, stride=2, pad=1), rng),
        _conv_case("conv 1x1 linear", ConvSpec(1, 1, 4, 1), rng, activation=False),
        ("relu", _Relu(), rng.standard_normal((2, 3, 5, 6))),
        # distinct values so no pooling window holds a tie
        ("max-pool 3x3 stride 2", MaxPool(3, 2, 1), rng.permutation(2 * 3 * 9 * 10).reshape(2, 3, 9, 10) * 0.01),
        ("max-pool 3x3 stride 1", MaxPool(3, 1, 1), rng.permutation(2 * 3 * 7 * 8).reshape(2, 3, 7, 8) * 0.01),
        ("dropout", Dropout(0.5), rng.standard_normal((2, 3, 5, 6))),
        ("bicubic upsample", Upsample(16, 20), rng.standard_normal((2, 1, 4, 5))),
    ]
    lbc = LBCConv(ConvSpec(5, 5, 3, 4, hole=6), name="lbc")
    _randomize(lbc, rng)
    cases.append(("lbc 5x5 hole 6", lbc, rng.standard_normal((2, 3, 12, 14))))
    inc = Inception(6, (3, 4, 2, 2), (3, 2), name="inception")
    _randomize(inc, rng, 0.4)
    cases.append(("inception", inc, rng.standard_normal((2, 6, 8, 9))))
    target = rng.random((2, 6, 7))
    cases.append(("euclidean loss", _Loss(target), rng.random((2, 6, 7))))
    return cases


def network_case(seed=0):
    """The full desk network, trained-mode forward with dropout and upsampling."""
    from .netdef import DESK, build_network, init_weights

    # fresh and head layers get He-scale weights so every layer carries signal
    cfg = replace(DESK, fresh_init="he", head_init="he")
    net = build_network(cfg)
    init_weights(net, seed)
    rng = np.random.default_rng(seed + 1)
    for p in net.params():
        if p.name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.05, p.shape)
    x = np.random.default_rng(seed + 2).random((1, 3, 48, 64))
    return "desk network end-to-end", net, x


def run_suite(seed=0, n_probes=12, network_probes=4):
    """All checks; returns a list of :class:`GradCheckResult`."""
    results = [check_layer(name, layer, x, seed, n_probes, train=True, dropout_seed=seed + 7)
               for name, layer, x in layer_cases(seed)]
    name, net, x = network_case(seed)
    results.append(check_layer(name, net, x, seed, network_probes, train=True, dropout_seed=seed + 7))
    return results
