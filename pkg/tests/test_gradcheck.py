import numpy as np

from deepfix.gradcheck import check_layer, relative_error, run_suite
from deepfix.layers import Conv2d
from deepfix.ops import ConvSpec


def test_suite_passes_and_covers_every_layer():
    results = run_suite(seed=0)
    names = " ".join(r.name for r in results)
    for part in ("hole 2", "hole 6", "max-pool", "relu", "lbc", "inception", "loss", "network"):
        assert part in names, part
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed


class LeakyBackward(Conv2d):
    """Input gradient off by one percent."""

    def backward(self, grad):
        return 1.01 * super().backward(grad)


class StaleWeightGrad(Conv2d):
    def backward(self, grad):
        out = super().backward(grad)
        self.weight.grad *= 0.5
        return out


def test_broken_backward_is_caught():
    x = np.random.default_rng(0).standard_normal((2, 3, 7, 8))
    for cls in (LeakyBackward, StaleWeightGrad):
        layer = cls(ConvSpec(3, 3, 3, 4, hole=2))
        layer.weight.data[...] = np.random.default_rng(1).standard_normal(layer.weight.shape)
        result = check_layer("broken", layer, x, seed=2)
        assert not result.passed
        assert result.line().startswith("FAIL")


def test_relative_error_floor():
    assert relative_error(1e-12, -1e-12, scale=1.0) < 1e-8
    assert relative_error(1.0, 1.01, scale=1.0) > 9e-3
