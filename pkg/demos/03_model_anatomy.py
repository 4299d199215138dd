"""Anatomy of the nested-transformer classifier: how an image becomes
words and sentences, what the local feed-forward touches, and where the
parameters live.

Run:  python demos/03_model_anatomy.py
"""

import numpy as np

from lnl.model import CONFIGS, build_model, param_count
from lnl.tensor import Tensor

rng = np.random.default_rng(1)

cfg = CONFIGS["micro"]()
print(f"micro config: {cfg.image_size}px image, {cfg.patch_size}px patches "
      f"-> {cfg.patch_count} sentences, {cfg.word_size}px words "
      f"-> {cfg.words_per_patch} words each")

model = build_model(cfg, seed=0)
image = Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)))

state = model.tokenize(image)
print("words Y         :", state.words.shape, "  sentences Z:", state.sentences.shape)
print("class token sits at Z[:, 0]")

result = model.forward(image)
print("logits          :", result.logits.shape)
print("attention stack :", len(result.outer_attention), "layers of",
      result.outer_attention[0].shape)

# The local feed-forward path leaves the class token alone and confines
# each token's influence to its k x k grid neighborhood (when attention is
# silenced). Perturb one patch token and watch the footprint. The model
# zero-initializes residual projections, so give the shrink layer live
# weights first.
block = model.layers[0].outer
for _, p in block.msa.named_parameters():
    p.data[:] = 0.0
block.ffn.shrink.weight.data = rng.normal(0, 0.05, size=block.ffn.shrink.weight.shape)
z = rng.normal(size=(1, 17, cfg.sentence_dim))
base, _ = block.forward(Tensor(z))
z2 = z.copy()
z2[0, 1 + 5] = 0.0  # token 5 = grid position (1, 1)
out, _ = block.forward(Tensor(z2))
delta = np.abs(out.data - base.data)[0].sum(-1)
print("footprint of token (1,1):")
print((delta[1:].reshape(4, 4) > 0).astype(int))

# Parameter budgets for the paper-scale configs.
for name in ("micro", "ti", "s"):
    print(f"{name:6s} parameters: {param_count(CONFIGS[name](num_classes=43)):,}")
