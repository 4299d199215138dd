"""Moment-exchange augmentation.

A positional normalization over the patch-token axis splits features into
(normalized, mean, standard deviation) per sample and channel. During
training, each sample keeps its normalized features but adopts the moments
of a partner sample drawn by a seeded batch permutation; the loss is then
interpolated between the two samples' labels. Everything stays on the tape,
so both the normalized features and the donor moments receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import cross_entropy
from .tensor import ShapeError, Tensor

__all__ = [
    "MoexMoments",
    "MoexBatchPlan",
    "pono_normalize",
    "denormalize",
    "moment_exchange",
    "moex_loss",
    "apply_moex",
    "make_plan",
]


@dataclass
class MoexMoments:
    """Per-sample normalization triple: Z = sigma * normalized + mu.

    ``mu`` and ``sigma`` have shape (B, 1, d); ``sigma`` is strictly
    positive (floored by eps on degenerate variance)."""

    normalized: Tensor
    mu: Tensor
    sigma: Tensor


@dataclass
class MoexBatchPlan:
    """Pairing permutation, mixing weight, and the layer whose patch-token
    features are exchanged."""

    pairing: np.ndarray
    lam: float
    apply_layer: int = 0

    def __post_init__(self):
        self.pairing = np.asarray(self.pairing)
        if sorted(self.pairing.tolist()) != list(range(len(self.pairing))):
            raise ValueError("pairing must be a permutation of the batch indices")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lambda must lie in (0, 1), got {self.lam}")


def make_plan(
    batch_size: int, lam: float, apply_layer: int, rng: np.random.Generator
) -> MoexBatchPlan:
    return MoexBatchPlan(rng.permutation(batch_size), lam, apply_layer)


def pono_normalize(z: Tensor, eps: float = 1e-5) -> MoexMoments:
    """Moments along the token axis, per sample and channel.

    ``z`` is (B, T, d) with any class token already removed by the caller.
    sigma = sqrt(var + eps^2), so constant features give sigma = eps exactly
    instead of a division blow-up, and the map stays smooth for gradients.
    """
    if z.ndim != 3:
        raise ShapeError(f"pono_normalize expects (B, T, d), got {z.shape}")
    mu = T.reduce_mean(z, axis=1, keepdims=True)
    centered = T.sub(z, mu)
    var = T.reduce_mean(T.mul(centered, centered), axis=1, keepdims=True)
    sigma = T.sqrt(T.add(var, eps * eps))
    return MoexMoments(normalized=T.div(centered, sigma), mu=mu, sigma=sigma)


def denormalize(m: MoexMoments) -> Tensor:
    """Inverse of :func:`pono_normalize`: sigma * normalized + mu."""
    return T.add(T.mul(m.normalized, m.sigma), m.mu)


def moment_exchange(a: MoexMoments, mu_b: Tensor, sigma_b: Tensor) -> Tensor:
    """Rebuild sample A's features around sample B's moments:
    sigma_B * (Z_A - mu_A) / sigma_A + mu_B."""
    if mu_b.shape != a.mu.shape or sigma_b.shape != a.sigma.shape:
        raise ShapeError(
            f"moment shapes {mu_b.shape}/{sigma_b.shape} do not match "
            f"{a.mu.shape}/{a.sigma.shape}"
        )
    return T.add(T.mul(a.normalized, sigma_b), mu_b)


def moex_loss(logits: Tensor, labels_a, labels_b, lam: float) -> Tensor:
    """Label-interpolated cross-entropy, linear in lambda:
    lam * ce(labels_a) + (1 - lam) * ce(labels_b), averaged over the batch."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    return T.add(
        T.scale(cross_entropy(logits, labels_a), lam),
        T.scale(cross_entropy(logits, labels_b), 1.0 - lam),
    )


def apply_moex(
    features: Tensor, labels, plan: MoexBatchPlan, train: bool = True
) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
    """Exchange each sample's moments with its partner's.

    Training-only: augmentation must be invisible at evaluation time, so an
    eval-mode call is a contract violation. Returns the exchanged features
    and the (own, partner) label pair for :func:`moex_loss`.
    """
    if not train:
        raise ValueError("moment exchange is a training-only augmentation")
    labels = np.asarray(labels)
    b = features.shape[0]
    if len(plan.pairing) != b or labels.shape[0] != b:
        raise ShapeError(
            f"batch size {b} does not match plan {len(plan.pairing)} "
            f"or labels {labels.shape}"
        )
    moments = pono_normalize(features)
    mu_b = moments.mu[plan.pairing]
    sigma_b = moments.sigma[plan.pairing]
    exchanged = moment_exchange(moments, mu_b, sigma_b)
    return exchanged, (labels, labels[plan.pairing])
