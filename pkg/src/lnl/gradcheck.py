"""Central finite-difference gradient checking.

The numeric differentiator here is deliberately independent from the tape:
it only ever calls a function's forward pass, so it can arbitrate whether an
analytic backward rule is correct.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "numeric_gradient",
    "max_relative_error",
    "check_gradient",
    "check_named_gradients",
]


def numeric_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-4,
    coords: Optional[Sequence[tuple]] = None,
) -> np.ndarray:
    """Central finite differences of scalar-valued ``f`` at ``x``.

    ``coords`` restricts the evaluation to a subset of flat indices; the
    returned array has the checked entries filled and NaN elsewhere so that
    callers cannot mistake an unchecked coordinate for a zero gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    flat_idx = range(x.size) if coords is None else coords
    grad = np.full(x.size, np.nan)
    work = x.reshape(-1).copy()
    for i in flat_idx:
        orig = work[i]
        work[i] = orig + h
        fp = f(work.reshape(x.shape))
        work[i] = orig - h
        fm = f(work.reshape(x.shape))
        work[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-7
) -> float:
    """Worst per-coordinate relative error, with an absolute floor for
    near-zero gradients. NaN entries of ``numeric`` are unchecked slots."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(numeric)
    if not mask.any():
        raise ValueError("no coordinates were checked")
    a = analytic[mask]
    n = numeric[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / 1e-3)
    return float(np.max(np.abs(a - n) / denom))


def check_gradient(
    f: Callable[[list[Tensor]], Tensor],
    inputs: list[np.ndarray],
    h: float = 1e-4,
    rtol: float = 1e-3,
    sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare the tape gradient of ``f`` against finite differences.

    ``f`` maps a list of leaf tensors to a scalar tensor. When ``sample`` is
    given, at most that many coordinates per input are checked (chosen with
    ``rng``), which keeps end-to-end checks on whole models fast. Returns
    the worst relative error over all checked coordinates and raises
    ``AssertionError`` when it exceeds ``rtol``.
    """
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = f(leaves)
    out.backward()

    worst = 0.0
    for k, (leaf, x) in enumerate(zip(leaves, inputs)):
        assert leaf.grad is not None, f"input {k} received no gradient"

        def forward_at(xk: np.ndarray, k: int = k) -> float:
            probe = [
                Tensor(xk if i == k else inputs[i]) for i in range(len(inputs))
            ]
            return f(probe).item()

        coords = None
        n = np.asarray(x).size
        if sample is not None and n > sample:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=sample, replace=False)
        numeric = numeric_gradient(forward_at, np.asarray(x), h=h, coords=coords)
        err = max_relative_error(leaf.grad, numeric)
        worst = max(worst, err)
        assert err <= rtol, (
            f"gradient mismatch on input {k}: relative error {err:.3e} > {rtol}"
        )
    return worst


def check_named_gradients(
    tensors: dict[str, Tensor],
    loss_fn: Callable[[], Tensor],
    h: float = 1e-4,
    rtol: float = 1e-3,
    sample: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> dict[str, float]:
    """Finite-difference check over a dictionary of live leaf tensors.

    ``loss_fn`` must recompute the scalar loss from the tensors' current
    ``data`` (a model forward pass, typically). Each tensor's analytic
    gradient is compared against central differences on up to ``sample``
    randomly chosen coordinates; wiggled entries are restored in place.
    Returns the worst relative error per tensor name and asserts ``rtol``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    analytic = {}
    for name, t in tensors.items():
        assert t.grad is not None, f"{name} received no gradient"
        analytic[name] = t.grad.copy()

    errors: dict[str, float] = {}
    for name, t in tensors.items():
        n = t.data.size
        idxs = np.arange(n) if n <= sample else rng.choice(n, sample, replace=False)
        worst = 0.0
        for i in idxs:
            pos = np.unravel_index(i, t.data.shape)
            orig = t.data[pos]
            t.data[pos] = orig + h
            fp = loss_fn().item()
            t.data[pos] = orig - h
            fm = loss_fn().item()
            t.data[pos] = orig
            numeric = (fp - fm) / (2.0 * h)
            ana = analytic[name].reshape(-1)[i]
            denom = max(abs(ana), abs(numeric), 1e-4)
            worst = max(worst, abs(ana - numeric) / denom)
        errors[name] = worst
        assert worst <= rtol, (
            f"gradient mismatch on {name}: relative error {worst:.3e} > {rtol}"
        )
    return errors
