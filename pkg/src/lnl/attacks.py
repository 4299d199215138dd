"""White-box L-infinity attacks and robust-accuracy evaluation.

Attack generation differentiates the exact eval-mode forward pass with
respect to the input pixels. Model parameters are frozen for the duration
(their values, gradients, and any optimizer state are bit-identical before
and after), so an attack can never contaminate training state.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .nn import cross_entropy
from .tensor import Tensor

__all__ = ["AttackSpec", "RobustnessReport", "fgsm", "pgd", "robust_accuracy"]

FAMILIES = ("fgsm", "pgd")


@dataclass
class AttackSpec:
    """Attack family plus budget: L-inf radius ``epsilon``, PGD step size
    ``alpha`` and step count ``steps``, valid-pixel clamp range, optional
    uniform random start inside the ball.

    ``epsilon`` in units of normalized pixel intensity; an epsilon of zero
    is the null attack (only meaningful for robust-accuracy sweeps, the
    generators themselves reject it)."""

    family: str
    epsilon: float
    alpha: float = 0.0
    steps: int = 1
    clamp: tuple[float, float] = (0.0, 1.0)
    random_start: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.family == "pgd":
            if self.alpha <= 0:
                raise ValueError("pgd needs a positive step size")
            if self.steps < 1:
                raise ValueError("pgd needs at least one step")
        if self.clamp[0] >= self.clamp[1]:
            raise ValueError(f"bad clamp range {self.clamp}")


@dataclass
class RobustnessReport:
    clean_accuracy: float
    robust_accuracy: float
    per_batch: list = field(default_factory=list)


@contextmanager
def _frozen_parameters(model):
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _logits(model, x: Tensor) -> Tensor:
    out = model.forward(x)
    return out.logits if hasattr(out, "logits") else out


def _input_gradient(model, x: np.ndarray, labels, loss_fn) -> np.ndarray:
    leaf = Tensor(x, requires_grad=True)
    loss = loss_fn(_logits(model, leaf), labels)
    loss.backward()
    return leaf.grad


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def fgsm(
    model,
    x,
    labels,
    spec: AttackSpec,
    loss_fn: Optional[Callable] = None,
) -> Tensor:
    """One signed-gradient step of size epsilon, clamped to the pixel range.

    sign(0) is 0, so coordinates the loss does not depend on stay put.
    """
    if spec.epsilon <= 0:
        raise ValueError(f"fgsm requires epsilon > 0, got {spec.epsilon}")
    loss_fn = loss_fn or cross_entropy
    x0 = _as_array(x)
    with _frozen_parameters(model):
        g = _input_gradient(model, x0, labels, loss_fn)
    adv = np.clip(x0 + spec.epsilon * np.sign(g), spec.clamp[0], spec.clamp[1])
    return Tensor(adv)


def pgd(
    model,
    x,
    labels,
    spec: AttackSpec,
    loss_fn: Optional[Callable] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Iterated signed-gradient ascent, re-projected onto the intersection
    of the epsilon ball and the pixel range after every step.

    With one step, alpha >= epsilon, and no random start this reduces to
    fgsm bit for bit.
    """
    if spec.epsilon <= 0:
        raise ValueError(f"pgd requires epsilon > 0, got {spec.epsilon}")
    if spec.family != "pgd":
        raise ValueError(f"spec family is {spec.family!r}, expected 'pgd'")
    loss_fn = loss_fn or cross_entropy
    x0 = _as_array(x)
    lo = np.maximum(x0 - spec.epsilon, spec.clamp[0])
    hi = np.minimum(x0 + spec.epsilon, spec.clamp[1])
    cur = x0
    if spec.random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        cur = np.clip(x0 + rng.uniform(-spec.epsilon, spec.epsilon, size=x0.shape), lo, hi)
    with _frozen_parameters(model):
        for _ in range(spec.steps):
            g = _input_gradient(model, cur, labels, loss_fn)
            cur = np.clip(cur + spec.alpha * np.sign(g), lo, hi)
    return Tensor(cur)


def _attack(model, x, labels, spec: AttackSpec, rng=None) -> Tensor:
    if spec.family == "fgsm":
        return fgsm(model, x, labels, spec)
    return pgd(model, x, labels, spec, rng=rng)


def predict(model, images) -> np.ndarray:
    """Top-1 labels (argmax, ties to the lowest index)."""
    logits = _logits(model, Tensor(_as_array(images)))
    return np.argmax(logits.data, axis=-1)


def robust_accuracy(
    model,
    images,
    labels,
    spec: AttackSpec,
    batch_size: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> RobustnessReport:
    """Fraction of samples still classified correctly under attack, with
    clean accuracy alongside. epsilon == 0 is the null attack: adversarial
    inputs are the clean inputs and the two accuracies coincide."""
    images = _as_array(images)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("robust_accuracy on an empty dataset")
    clean_hits = 0
    robust_hits = 0
    report = RobustnessReport(0.0, 0.0)
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        clean_pred = predict(model, xb)
        if spec.epsilon == 0.0:
            adv_pred = clean_pred
        else:
            adv = _attack(model, xb, yb, spec, rng=rng)
            adv_pred = predict(model, adv.data)
        clean_hits += int((clean_pred == yb).sum())
        robust_hits += int((adv_pred == yb).sum())
        report.per_batch.append((start, len(yb)))
    report.clean_accuracy = clean_hits / n
    report.robust_accuracy = robust_hits / n
    return report
