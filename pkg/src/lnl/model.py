"""The locality-in-locality classifier.

An image is cut into patch-level "sentences", each sentence into sub-patch
"words". Every layer runs a word-level transformer block, folds the word
features back into the sentence embeddings, then runs a sentence-level block
whose feed-forward branch is switchable between a plain MLP and a locally
mixing variant (1x1 expand, depth-wise k x k convolution on the token grid,
1x1 shrink). A learnable class token carries the final representation into
the classifier head.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .moex import MoexBatchPlan, apply_moex
from .nn import (
    LayerNorm,
    Linear,
    Mlp,
    Module,
    MultiHeadSelfAttention,
    gelu,
    image_to_seq,
    seq_to_image,
)
from .tensor import ShapeError, Tensor, load_tensor, save_tensor

__all__ = [
    "LnlConfig",
    "TokenState",
    "ForwardResult",
    "LnlModel",
    "LocallyFeedForward",
    "locally_ff_forward",
    "build_model",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
    "CONFIGS",
]

FFN_VARIANTS = ("mlp", "locally_ff")


@dataclass
class LnlConfig:
    """Architectural hyperparameters.

    ``patch_size`` divides ``image_size`` and ``word_size`` divides
    ``patch_size``, giving n = (image_size/patch_size)^2 sentences of
    m = (patch_size/word_size)^2 words each.
    """

    image_size: int
    patch_size: int
    word_size: int
    word_dim: int
    sentence_dim: int
    depth: int
    inner_heads: int
    outer_heads: int
    ffn_ratio: int = 4
    dw_kernel: int = 3
    ffn_variant: str = "locally_ff"
    moex_enabled: bool = False
    moex_lambda: float = 0.9
    moex_layer: int = 0
    num_classes: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.patch_size % self.word_size != 0:
            raise ValueError(
                f"patch size {self.patch_size} not divisible by word {self.word_size}"
            )
        if self.sentence_dim % self.outer_heads != 0:
            raise ValueError("sentence dim not divisible by outer head count")
        if self.word_dim % self.inner_heads != 0:
            raise ValueError("word dim not divisible by inner head count")
        if self.dw_kernel % 2 == 0:
            raise ValueError("depth-wise kernel must be odd")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ValueError(f"unknown ffn variant {self.ffn_variant!r}")
        if not 0.0 < self.moex_lambda < 1.0:
            raise ValueError("moex lambda must lie in (0, 1)")
        if not 0 <= self.moex_layer < self.depth:
            raise ValueError("moex layer index out of range")

    @property
    def patch_grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_count(self) -> int:
        return self.patch_grid ** 2

    @property
    def word_grid(self) -> int:
        return self.patch_size // self.word_size

    @property
    def words_per_patch(self) -> int:
        return self.word_grid ** 2

    def to_kv(self) -> str:
        return "".join(
            f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self)
        )

    @classmethod
    def from_kv(cls, text: str) -> "LnlConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            t = types[key]
            if t == "bool":
                kwargs[key] = raw == "True"
            elif t == "int":
                kwargs[key] = int(raw)
            elif t == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)


def _ti(num_classes: int = 43, **over) -> LnlConfig:
    return LnlConfig(
        image_size=224, patch_size=16, word_size=4, word_dim=24,
        sentence_dim=192, depth=12, inner_heads=4, outer_heads=3,
        num_classes=num_classes, **over,
    )


def _s(num_classes: int = 43, **over) -> LnlConfig:
    return LnlConfig(
        image_size=224, patch_size=16, word_size=4, word_dim=24,
        sentence_dim=384, depth=12, inner_heads=4, outer_heads=6,
        num_classes=num_classes, **over,
    )


def _micro(num_classes: int = 4, **over) -> LnlConfig:
    return LnlConfig(
        image_size=32, patch_size=8, word_size=4, word_dim=16,
        sentence_dim=64, depth=4, inner_heads=4, outer_heads=4,
        num_classes=num_classes, **over,
    )


def _gradcheck_micro(num_classes: int = 3, **over) -> LnlConfig:
    return LnlConfig(
        image_size=16, patch_size=8, word_size=4, word_dim=8,
        sentence_dim=16, depth=2, inner_heads=2, outer_heads=2,
        num_classes=num_classes, **over,
    )


CONFIGS = {
    "ti": _ti,
    "s": _s,
    "micro": _micro,
    "gradcheck-micro": _gradcheck_micro,
}


@dataclass
class TokenState:
    """Word grid Y (B, n, m, c) and sentence sequence Z (B, n+1, d); the
    class token sits at sentence index 0."""

    words: Tensor
    sentences: Tensor


@dataclass
class ForwardResult:
    logits: Tensor
    outer_attention: list  # per layer: (B, heads, n+1, n+1)
    word_features: list    # per layer: (B, n, m, c)
    moex_pair: Optional[tuple] = None  # (labels_a, labels_b) when moex ran


class LocallyFeedForward(Module):
    """Feed-forward with spatial mixing on the patch-token grid.

    Token channels are expanded dim -> ratio*dim, passed through GELU,
    laid out as a square grid, convolved depth-wise (k x k, per channel),
    flattened back and shrunk to dim. Operates on the n patch tokens only;
    the class token has no grid position and is handled by the caller.
    """

    def __init__(self, dim: int, ratio: int, kernel_size: int, rng: np.random.Generator):
        from .nn import DepthwiseConv2d

        hidden = ratio * dim
        self.expand = Linear(dim, hidden, rng)
        self.conv = DepthwiseConv2d(hidden, kernel_size, rng)
        self.shrink = Linear(hidden, dim, rng)
        # identity-plus-noise kernel: the freshly built block computes the
        # same function as the plain MLP it degenerates to, so both FFN
        # variants start training from equal footing
        center = kernel_size // 2
        self.conv.kernel.data[:, 0, center, center] += 1.0

    def forward(self, z: Tensor) -> Tensor:
        import math as _math

        from .nn import depthwise_conv_channels_last

        b, n, _ = z.shape
        side = _math.isqrt(n)
        if side * side != n:
            raise ShapeError(f"token count {n} is not a perfect square")
        h = gelu(self.expand.forward(z))
        # row-major (side, side) grid, channels last: identical arithmetic to
        # seq_to_image -> conv -> image_to_seq but without layout transposes
        grid = T.reshape(h, (b, side, side, h.shape[-1]))
        grid = depthwise_conv_channels_last(grid, self.conv.kernel)
        h = T.reshape(grid, (b, n, grid.shape[-1]))
        return self.shrink.forward(h)


def locally_ff_forward(loc: LocallyFeedForward, z: Tensor) -> Tensor:
    """Apply ``loc`` to a full (B, n+1, d) sequence.

    Row 0 (the class token) is split off and passes through unchanged; the
    remaining n tokens go through the convolutional feed-forward path.
    """
    return T.concat([z[:, :1], loc.forward(z[:, 1:])], axis=1)


class InnerBlock(Module):
    """Transformer block over the words of one sentence. The feed-forward
    here is always an MLP; only the sentence-level block is switchable."""

    def __init__(self, cfg: LnlConfig, rng: np.random.Generator):
        c = cfg.word_dim
        self.norm1 = LayerNorm(c)
        self.msa = MultiHeadSelfAttention(c, cfg.inner_heads, rng)
        self.norm2 = LayerNorm(c)
        self.mlp = Mlp(c, cfg.ffn_ratio * c, rng)

    def forward(self, y: Tensor) -> tuple[Tensor, Tensor]:
        mixed, attn = self.msa.forward(self.norm1.forward(y))
        y = T.add(y, mixed)
        y = T.add(y, self.mlp.forward(self.norm2.forward(y)))
        return y, attn


class OuterBlock(Module):
    """Transformer block over the sentence sequence (class token included
    in attention). The FFN branch is an MLP or the locally mixing variant;
    in the local variant the class token receives no FFN update."""

    def __init__(self, cfg: LnlConfig, rng: np.random.Generator):
        d = cfg.sentence_dim
        self.variant = cfg.ffn_variant
        self.norm1 = LayerNorm(d)
        self.msa = MultiHeadSelfAttention(d, cfg.outer_heads, rng)
        self.norm2 = LayerNorm(d)
        if self.variant == "mlp":
            self.ffn = Mlp(d, cfg.ffn_ratio * d, rng)
        else:
            self.ffn = LocallyFeedForward(d, cfg.ffn_ratio, cfg.dw_kernel, rng)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        mixed, attn = self.msa.forward(self.norm1.forward(z))
        z = T.add(z, mixed)
        if self.variant == "mlp":
            z = T.add(z, self.ffn.forward(self.norm2.forward(z)))
        else:
            patch = z[:, 1:]
            update = self.ffn.forward(self.norm2.forward(patch))
            z = T.concat([z[:, :1], T.add(patch, update)], axis=1)
        return z, attn


class LnlLayer(Module):
    """One stacked unit: word block, word-to-sentence injection, sentence
    block."""

    def __init__(self, cfg: LnlConfig, rng: np.random.Generator):
        self.inner = InnerBlock(cfg, rng)
        self.inject = Linear(cfg.words_per_patch * cfg.word_dim, cfg.sentence_dim, rng)
        self.outer = OuterBlock(cfg, rng)


class LnlModel(Module):
    def __init__(self, cfg: LnlConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        s, p = cfg.word_size, cfg.patch_size
        c, d = cfg.word_dim, cfg.sentence_dim
        n, m = cfg.patch_count, cfg.words_per_patch
        self.word_embed = Linear(3 * s * s, c, rng)
        self.sentence_embed = Linear(3 * p * p, d, rng)
        self.class_token = Tensor(rng.normal(0.0, 0.02, size=(1, 1, d)), requires_grad=True)
        self.word_pos = Tensor(rng.normal(0.0, 0.02, size=(1, 1, m, c)), requires_grad=True)
        self.sentence_pos = Tensor(rng.normal(0.0, 0.02, size=(1, n + 1, d)), requires_grad=True)
        self.layers = [LnlLayer(cfg, rng) for _ in range(cfg.depth)]
        self.head_norm = LayerNorm(d)
        self.head = Linear(d, cfg.num_classes, rng)
        self._zero_residual_projections()

    def _zero_residual_projections(self) -> None:
        # every residual branch (and the head) starts at exactly zero, so the
        # freshly initialized network is the identity on its token streams;
        # this is what keeps plain SGD stable at useful learning rates
        tails = (
            "msa.out.weight",
            "mlp.fc2.weight",
            "ffn.fc2.weight",
            "ffn.shrink.weight",
            "inject.weight",
            "head.weight",
        )
        for name, p in self.named_parameters():
            if name.endswith(tails):
                p.data[:] = 0.0

    # -- tokenization -------------------------------------------------------

    def tokenize(self, image: Tensor) -> TokenState:
        """Split (B, 3, H, W) pixels into word and sentence embeddings with
        learned position encodings at both levels."""
        cfg = self.cfg
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) image, got {image.shape}")
        b, _, hh, ww = image.shape
        if hh != cfg.image_size or ww != cfg.image_size:
            raise ShapeError(
                f"image is {hh}x{ww}, config expects {cfg.image_size}x{cfg.image_size}"
            )
        p, s = cfg.patch_size, cfg.word_size
        pg, wg = cfg.patch_grid, cfg.word_grid
        n, m = cfg.patch_count, cfg.words_per_patch

        # map [0, 1] pixels to [-1, 1]; zero-centered inputs keep the
        # embedding gradients well conditioned for SGD
        image = T.sub(T.scale(image, 2.0), 1.0)
        x = T.reshape(image, (b, 3, pg, p, pg, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))          # (B, pg, pg, 3, p, p)
        patches = T.reshape(x, (b, n, 3 * p * p))
        z_patch = self.sentence_embed.forward(patches)   # (B, n, d)

        w = T.reshape(x, (b, n, 3, wg, s, wg, s))
        w = T.transpose(w, (0, 1, 3, 5, 2, 4, 6))        # (B, n, wg, wg, 3, s, s)
        words = T.reshape(w, (b, n, m, 3 * s * s))
        y = T.add(self.word_embed.forward(words), self.word_pos)

        cls = T.add(self.class_token, Tensor(np.zeros((b, 1, self.cfg.sentence_dim))))
        z = T.concat([cls, z_patch], axis=1)
        z = T.add(z, self.sentence_pos)
        return TokenState(words=y, sentences=z)

    # -- word -> sentence injection ------------------------------------------

    @staticmethod
    def inject_words(proj: Linear, z: Tensor, y: Tensor) -> Tensor:
        """Add a projection of each sentence's flattened words to its
        embedding; the class token row is untouched."""
        b, n, m, c = y.shape
        delta = proj.forward(T.reshape(y, (b, n, m * c)))
        return T.concat([z[:, :1], T.add(z[:, 1:], delta)], axis=1)

    # -- full forward ---------------------------------------------------------

    def forward(
        self,
        image: Tensor,
        train: bool = False,
        moex_plan: Optional[MoexBatchPlan] = None,
        moex_labels=None,
    ) -> ForwardResult:
        """Run the stacked layers and classifier head.

        In train mode with a ``moex_plan``, patch-token features after the
        plan's layer are moment-exchanged across the batch and the paired
        labels are returned for the interpolated loss.
        """
        cfg = self.cfg
        state = self.tokenize(image)
        y, z = state.words, state.sentences
        b, n, m, c = y.shape

        attns, word_feats = [], []
        moex_pair = None
        for idx, layer in enumerate(self.layers):
            flat = T.reshape(y, (b * n, m, c))
            flat, _ = layer.inner.forward(flat)
            y = T.reshape(flat, (b, n, m, c))
            z = self.inject_words(layer.inject, z, y)
            z, attn = layer.outer.forward(z)
            if moex_plan is not None and idx == moex_plan.apply_layer:
                if moex_labels is None:
                    raise ValueError("moex plan supplied without labels")
                exchanged, moex_pair = apply_moex(
                    z[:, 1:], moex_labels, moex_plan, train=train
                )
                z = T.concat([z[:, :1], exchanged], axis=1)
            attns.append(attn)
            word_feats.append(y)

        cls = self.head_norm.forward(z[:, 0])
        logits = self.head.forward(cls)
        return ForwardResult(
            logits=logits,
            outer_attention=attns,
            word_features=word_feats,
            moex_pair=moex_pair,
        )


def build_model(cfg: LnlConfig, seed: int = 0) -> LnlModel:
    return LnlModel(cfg, np.random.default_rng(np.random.SeedSequence([seed, 0xB11D])))


def param_count(cfg: LnlConfig) -> int:
    """Exact trainable-parameter count for a config."""
    return build_model(cfg, seed=0).param_count()


# -- checkpoints --------------------------------------------------------------

_CKPT_MAGIC = b"LNLC"
_CKPT_VERSION = 1


def save_checkpoint(path: str, model: LnlModel) -> None:
    """Checkpoint layout: magic, version u32, config key=value block,
    parameter-name manifest, then the tensors in manifest order."""
    named = list(model.named_parameters())
    cfg_bytes = model.cfg.to_kv().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(named)))
        for name, _ in named:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for _, p in named:
            save_tensor(p, fh)


def load_checkpoint(path: str) -> LnlModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg = LnlConfig.from_kv(fh.read(cfg_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        names = []
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            names.append(fh.read(nlen).decode("utf-8"))
        tensors = {name: load_tensor(fh).data for name in names}
    model = build_model(cfg, seed=0)
    model.load_param_data(tensors)
    return model
