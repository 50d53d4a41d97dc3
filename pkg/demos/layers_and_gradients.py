"""Dilated convolution, location-biased convolution, and a gradient check.

Run with ``python3 demos/layers_and_gradients.py``.
"""
import numpy as np

from deepfix.gradcheck import run_suite
from deepfix.layers import LBCConv, make_location_bank
from deepfix.ops import ConvSpec, conv2d_forward

# A 3x3 kernel with hole 2 covers a 5x5 window: poke one pixel and watch
# which outputs move.
spec = ConvSpec(3, 3, 1, 1, hole=2)
x = np.zeros((1, 1, 9, 9))
x[0, 0, 4, 4] = 1.0
out = conv2d_forward(x, np.ones(spec.weight_shape), None, spec)
print("outputs touched by one input pixel (hole 2): nine taps spanning 5x5")
print((out[0, 0] != 0).astype(int))

# The location bank: sixteen fixed Gaussians centred on the map.
bank = make_location_bank(6, 8)
print("\nbank shape", bank.maps.shape, "widest map row 3:", np.round(bank.maps[-1, 3], 2))

# With zero location weights an LBC layer is a plain convolution; with
# non-zero ones the same input gives a different answer at different places.
layer = LBCConv(ConvSpec(3, 3, 2, 1))
rng = np.random.default_rng(0)
layer.weight.data[...] = rng.standard_normal(layer.weight.shape)
layer.loc_weight.data[...] = rng.standard_normal(layer.loc_weight.shape)
layer.bias.data[...] = 5.0  # keep the ReLU open
flat = np.ones((1, 2, 6, 8))
print("\nLBC on a constant input (varies with position):")
print(np.round(layer.forward(flat)[0, 0], 2))

print("\nfinite-difference checks:")
for result in run_suite():
    print(" ", result.line())
