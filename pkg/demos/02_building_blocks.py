"""The neural building blocks, exercised one at a time: attention rows,
layer normalization, the depth-wise convolution, and the token/grid
reshapes that let sequence models convolve.

Run:  python demos/02_building_blocks.py
"""

import numpy as np

import lnl.tensor as T
from lnl.nn import (
    DepthwiseConv2d,
    LayerNorm,
    MultiHeadSelfAttention,
    image_to_seq,
    seq_to_image,
)
from lnl.tensor import Tensor

rng = np.random.default_rng(0)

# Layer normalization: per-token mean 0, variance 1, then affine.
ln = LayerNorm(8)
x = Tensor(rng.normal(3.0, 2.5, size=(4, 8)))
y = ln.forward(x)
print("layernorm mean  :", np.round(y.data.mean(axis=-1), 12))
print("layernorm var   :", np.round(y.data.var(axis=-1), 6))

# Attention rows are probability distributions over tokens.
msa = MultiHeadSelfAttention(dim=16, heads=4, rng=rng)
tokens = Tensor(rng.normal(size=(2, 5, 16)))
out, attn = msa.forward(tokens)
print("attention shape :", attn.shape, " row sums:", np.round(attn.data.sum(-1).ravel()[:5], 12))

# A depth-wise kernel with 1 at the center is the identity...
conv = DepthwiseConv2d(channels=3, kernel_size=3, rng=rng)
conv.kernel.data[:] = 0.0
conv.kernel.data[:, 0, 1, 1] = 1.0
img = Tensor(rng.normal(size=(1, 3, 6, 6)))
print("identity kernel :", (conv.forward(img).data == img.data).all())

# ...and an averaging kernel mixes each channel's spatial neighborhood.
conv.kernel.data[:] = 1.0 / 9.0
smoothed = conv.forward(img)
print("smoothing cuts variance:", img.data.var(), "->", smoothed.data.var())

# Tokens fold onto a square grid row-major and back bit-identically.
seq = Tensor(np.arange(18.0).reshape(1, 9, 2))
grid = seq_to_image(seq)
print("token 3 lands at grid (1,0):", grid.data[0, :, 1, 0], "== token", seq.data[0, 3])
print("roundtrip exact :", (image_to_seq(grid).data == seq.data).all())
