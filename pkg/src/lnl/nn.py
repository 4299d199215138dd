"""Neural building blocks: linear projection, layer normalization, softmax,
GELU, multi-head self-attention, depth-wise convolution, token/grid reshapes,
and cross-entropy.

Everything here is a pure function of immutable parameters, so forwards are
safe to run concurrently as long as each worker owns its own tape.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.special import erf

from . import tensor as T
from .tensor import DomainError, ShapeError, Tensor, _check_finite, _node

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "MultiHeadSelfAttention",
    "DepthwiseConv2d",
    "Mlp",
    "softmax",
    "gelu",
    "cross_entropy",
    "seq_to_image",
    "image_to_seq",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Module:
    """Minimal parameter container.

    Subclasses assign ``Tensor`` parameters and sub-``Module``s as plain
    attributes; ``named_parameters`` walks them in insertion order, which
    keeps checkpoint manifests and optimizer state deterministic.
    """

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_param_data(self, named: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place from a name -> array map."""
        own = dict(self.named_parameters())
        missing = set(own) - set(named)
        extra = set(named) - set(own)
        if missing or extra:
            raise ValueError(
                f"parameter manifest mismatch: missing={sorted(missing)} "
                f"unexpected={sorted(extra)}"
            )
        for name, p in own.items():
            arr = np.asarray(named[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(
                    f"parameter {name}: shape {arr.shape} != {p.shape}"
                )
            p.data = arr.copy()


class Linear(Module):
    """Affine map over the last axis: y = x W^T + b with W of shape (out, in).

    Glorot-scaled normal init; plain SGD needs the activation/gradient
    variance balance, unlike adaptive optimizers."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        std = math.sqrt(2.0 / (in_dim + out_dim))
        self.weight = Tensor(rng.normal(0.0, std, size=(out_dim, in_dim)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"linear expects last extent {self.in_dim}, got {x.shape}"
            )
        return _affine(x, self.weight, self.bias)


def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused y = x W^T + b over the last axis of x."""
    lead = x.shape[:-1]
    in_dim, out_dim = weight.shape[1], weight.shape[0]
    flat = x.data.reshape(-1, in_dim)
    out = _check_finite(flat @ weight.data.T + bias.data, "linear")

    def backward(g):
        g2 = g.reshape(-1, out_dim)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ flat
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _node(out.reshape(lead + (out_dim,)), (x, weight, bias), backward)


class LayerNorm(Module):
    """Normalization over the last (channel) axis with affine parameters."""

    def __init__(self, dim: int, eps: float = 1e-6):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"layernorm expects last extent {self.dim}, got {x.shape}")
        gamma, beta = self.gamma, self.beta
        mu = x.data.mean(axis=-1, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv
        out = _check_finite(gamma.data * xhat + beta.data, "layernorm")
        lead = tuple(range(x.ndim - 1))

        def backward(g):
            dbeta = g.sum(axis=lead)
            dgamma = (g * xhat).sum(axis=lead)
            dxhat = g * gamma.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            return dx, dgamma, dbeta

        return _node(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted exponentials)."""
    if axis != -1 and axis != x.ndim - 1:
        raise ShapeError("softmax is implemented for the last axis only")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, 0.5 x (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _node(out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``logits`` is (batch, classes) or a single (classes,) row. Computed with
    max subtraction; the subtracted constant is off-tape, which is exact
    because softmax is shift invariant.
    """
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects rank-2 logits, got {logits.shape}")
    b, k = logits.shape
    labels = np.atleast_1d(np.asarray(labels))
    if labels.dtype.kind not in "iu":
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    z = T.sub(logits, shift)
    log_norm = T.log(T.reduce_sum(T.exp(z), axis=-1, keepdims=True))
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = T.reduce_sum(T.mul(z, Tensor(onehot)), axis=-1, keepdims=True)
    return T.reduce_mean(T.sub(log_norm, picked))


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention with per-head projections.

    ``forward`` returns both the mixed tokens and the post-softmax attention
    tensor (batch, heads, tokens, tokens); the attention tensor is the same
    node used to produce the output, not a detached copy.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"attention expects (B, T, {self.dim}), got {x.shape}")
        b, t, _ = x.shape
        h, hd = self.heads, self.head_dim

        def split(y: Tensor) -> Tensor:
            return T.transpose(T.reshape(y, (b, t, h, hd)), (0, 2, 1, 3))

        q, k, v = split(self.q.forward(x)), split(self.k.forward(x)), split(self.v.forward(x))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        attn = softmax(scores)
        mixed = T.matmul(attn, v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, t, self.dim))
        return self.out.forward(merged), attn


class DepthwiseConv2d(Module):
    """Per-channel k x k correlation, stride 1, zero padding (k-1)/2.

    One kernel plane per channel, no cross-channel mixing, no bias; spatial
    size is preserved exactly.
    """

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.kernel = Tensor(
            rng.normal(0.0, 0.02, size=(channels, 1, kernel_size, kernel_size)),
            requires_grad=True,
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"depthwise conv expects (B, C, H, W), got {x.shape}")
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"depthwise conv has {self.channels} channel planes, "
                f"input has {x.shape[1]}"
            )
        chlast = T.transpose(x, (0, 2, 3, 1))
        out = depthwise_conv_channels_last(chlast, self.kernel)
        return T.transpose(out, (0, 3, 1, 2))


def depthwise_conv_channels_last(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel correlation on (B, H, W, C) data.

    Channels-last keeps the per-channel kernel broadcast on the contiguous
    axis, which is why both the public (B, C, H, W) conv and the token-grid
    feed-forward route through this core.
    """
    if x.shape[-1] != kernel.shape[0]:
        raise ShapeError(
            f"depthwise conv has {kernel.shape[0]} channel planes, "
            f"input has {x.shape[-1]}"
        )
    b, hh, ww, c = x.shape
    k = kernel.shape[-1]
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    w = kernel.data[:, 0]  # (C, k, k)
    out = np.zeros((b, hh, ww, c))
    for di in range(k):
        for dj in range(k):
            out += xp[:, di:di + hh, dj:dj + ww, :] * w[:, di, dj]
    _check_finite(out, "depthwise_conv")

    def backward(g):
        gw = np.empty_like(kernel.data)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                window = xp[:, di:di + hh, dj:dj + ww, :]
                gw[:, 0, di, dj] = (g * window).sum(axis=(0, 1, 2))
                gxp[:, di:di + hh, dj:dj + ww, :] += g * w[:, di, dj]
        gx = gxp[:, pad:pad + hh, pad:pad + ww, :] if pad else gxp
        return np.ascontiguousarray(gx), gw

    return _node(out, (x, kernel), backward)


class Mlp(Module):
    """Two-layer feed-forward expansion with a GELU in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(gelu(self.fc1.forward(x)))


def seq_to_image(z: Tensor) -> Tensor:
    """(B, T, d) tokens to a (B, d, sqrt(T), sqrt(T)) grid, row-major.

    Token at grid position (r, c) is sequence index r*side + c. The caller
    removes any class token first; T must be a perfect square.
    """
    if z.ndim != 3:
        raise ShapeError(f"seq_to_image expects (B, T, d), got {z.shape}")
    b, t, d = z.shape
    side = math.isqrt(t)
    if side * side != t:
        raise ShapeError(f"token count {t} is not a perfect square")
    grid = T.reshape(z, (b, side, side, d))
    return T.transpose(grid, (0, 3, 1, 2))


def image_to_seq(img: Tensor) -> Tensor:
    """Exact inverse of :func:`seq_to_image`."""
    if img.ndim != 4:
        raise ShapeError(f"image_to_seq expects (B, d, H, W), got {img.shape}")
    b, d, h, w = img.shape
    if h != w:
        raise ShapeError(f"grid must be square, got {h}x{w}")
    tokens = T.transpose(img, (0, 2, 3, 1))
    return T.reshape(tokens, (b, h * w, d))
