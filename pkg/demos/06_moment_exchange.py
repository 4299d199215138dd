"""Moment exchange up close: the normalization triple, the exchange
identities, and what the training hook actually does to a batch.

Run:  python demos/06_moment_exchange.py
"""

import numpy as np

from lnl.moex import (
    MoexBatchPlan,
    apply_moex,
    denormalize,
    moex_loss,
    moment_exchange,
    pono_normalize,
)
from lnl.nn import cross_entropy
from lnl.tensor import Tensor

rng = np.random.default_rng(0)

# The normalization triple: features split into (normalized, mu, sigma)
# along the token axis, one pair of moments per sample and channel.
z = rng.normal(2.0, 3.0, size=(2, 6, 4))
m = pono_normalize(Tensor(z))
print("mu/sigma shapes :", m.mu.shape, m.sigma.shape)
print("normalized mean :", np.abs(m.normalized.data.mean(axis=1)).max())
print("normalized std  :", m.normalized.data.std(axis=1).round(6).ravel()[:4])
print("N then N^-1     :", np.abs(denormalize(m).data - z).max())

# Exchanging a sample's moments with its own is the identity; with a
# partner's, features keep their shape but adopt the partner's statistics.
self_x = moment_exchange(m, m.mu, m.sigma)
print("self-exchange   :", np.abs(self_x.data - z).max())

plan = MoexBatchPlan(pairing=np.array([1, 0]), lam=0.9)
swapped, (ya, yb) = apply_moex(Tensor(z), np.array([0, 1]), plan)
m2 = pono_normalize(swapped.detach())
print("sample 0 adopts sample 1's mean:",
      np.allclose(m2.mu.data[0], m.mu.data[1], atol=1e-9))
print("paired labels   :", ya.tolist(), yb.tolist())

# The loss interpolates the two labels' cross-entropies, exactly linearly.
logits = Tensor(rng.normal(size=(2, 4)))
ca = cross_entropy(logits, ya).item()
cb = cross_entropy(logits, yb).item()
for lam in (0.25, 0.5, 0.9):
    mixed = moex_loss(logits, ya, yb, lam).item()
    print(f"lambda {lam:4.2f}: loss {mixed:.6f} == {lam}*{ca:.4f} + {1-lam}*{cb:.4f}")

# Training-only contract: the hook refuses to run in eval mode.
try:
    apply_moex(Tensor(z), np.array([0, 1]), plan, train=False)
except ValueError as e:
    print("eval-mode call  :", e)
