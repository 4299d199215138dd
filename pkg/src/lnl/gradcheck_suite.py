"""The runnable gradient-verification suite.

Covers every differentiable primitive with seeded random small tensors, the
composite neural ops, and an end-to-end micro model, all against central
finite differences (h = 1e-4, relative error <= 1e-3).
"""

from __future__ import annotations

import time
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .gradcheck import check_gradient, check_named_gradients
from .model import CONFIGS, build_model
from .nn import (
    DepthwiseConv2d,
    LayerNorm,
    Linear,
    MultiHeadSelfAttention,
    cross_entropy,
    gelu,
    image_to_seq,
    seq_to_image,
    softmax,
)
from .tensor import Tensor

H = 1e-4
RTOL = 1e-3


def _random_shape(rng, max_rank=3, max_extent=5):
    rank = int(rng.integers(1, max_rank + 1))
    return tuple(int(rng.integers(1, max_extent + 1)) for _ in range(rank))


def _primitive_cases(rng):
    s = _random_shape(rng)
    x = rng.normal(size=s)
    y = rng.normal(size=s)
    pos = np.abs(rng.normal(size=s)) + 0.5
    axis = int(rng.integers(0, len(s)))
    return [
        ("add", lambda ts: T.reduce_sum(T.add(ts[0], ts[1])), [x, y]),
        ("sub", lambda ts: T.reduce_sum(T.sub(ts[0], ts[1])), [x, y]),
        ("mul", lambda ts: T.reduce_sum(T.mul(ts[0], ts[1])), [x, y]),
        ("div", lambda ts: T.reduce_sum(T.div(ts[0], ts[1])), [x, pos]),
        ("exp", lambda ts: T.reduce_sum(T.exp(ts[0])), [x]),
        ("log", lambda ts: T.reduce_sum(T.log(ts[0])), [pos]),
        ("sqrt", lambda ts: T.reduce_sum(T.sqrt(ts[0])), [pos]),
        ("scale", lambda ts: T.reduce_sum(T.scale(ts[0], -0.7)), [x]),
        ("clamp", lambda ts: T.reduce_sum(T.clamp(ts[0], -8.0, 8.0)), [x]),
        ("sum", lambda ts: T.reduce_sum(T.mul(T.reduce_sum(ts[0], axis, True), ts[0])), [x]),
        ("mean", lambda ts: T.reduce_sum(T.exp(T.reduce_mean(ts[0], axis))), [x]),
        ("max", lambda ts: T.reduce_sum(T.reduce_max(ts[0], axis)), [x]),
        ("reshape", lambda ts: T.reduce_sum(T.exp(T.reshape(ts[0], (int(np.prod(s)),)))), [x]),
        ("transpose", lambda ts: T.reduce_sum(T.exp(T.transpose(ts[0]))), [x]),
        ("matmul", lambda ts: T.reduce_sum(T.matmul(ts[0].reshape(-1, 1), ts[1].reshape(1, -1))), [x, y]),
        ("concat_slice", lambda ts: T.reduce_sum(T.mul(T.concat([ts[0], ts[1]], 0)[1:], 2.0)), [x, y]),
        ("softmax", lambda ts: T.reduce_sum(T.mul(softmax(ts[0].reshape(1, -1)), ts[0].reshape(1, -1))), [x]),
        ("gelu", lambda ts: T.reduce_sum(gelu(ts[0])), [x]),
    ]


def _layer_cases(rng):
    lin = Linear(4, 3, rng)
    ln = LayerNorm(5)
    ln.gamma.data = rng.normal(1.0, 0.2, size=5)
    ln.beta.data = rng.normal(0.0, 0.2, size=5)
    msa = MultiHeadSelfAttention(6, 2, rng)
    conv = DepthwiseConv2d(2, 3, rng)

    def linear_case(ts):
        lin.weight, lin.bias = ts[1], ts[2]
        return T.reduce_sum(T.exp(lin.forward(ts[0])))

    def layernorm_case(ts):
        ln.gamma, ln.beta = ts[1], ts[2]
        return T.reduce_sum(T.exp(ln.forward(ts[0])))

    def msa_case(ts):
        out, attn = msa.forward(ts[0])
        return T.add(T.reduce_sum(T.mul(out, out)), T.reduce_sum(T.mul(attn, attn)))

    def conv_case(ts):
        conv.kernel = ts[1]
        return T.reduce_sum(T.mul(conv.forward(ts[0]), conv.forward(ts[0])))

    def seq_image_case(ts):
        return T.reduce_sum(T.exp(image_to_seq(seq_to_image(ts[0]))))

    def xent_case(ts):
        return cross_entropy(ts[0], np.array([1, 0]))

    return [
        ("linear", linear_case,
         [rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)]),
        ("layernorm", layernorm_case,
         [rng.normal(size=(3, 5)), ln.gamma.data.copy(), ln.beta.data.copy()]),
        ("attention", msa_case, [rng.normal(size=(2, 3, 6))]),
        ("depthwise_conv", conv_case,
         [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 1, 3, 3))]),
        ("seq_image_roundtrip", seq_image_case, [rng.normal(size=(1, 4, 3))]),
        ("cross_entropy", xent_case, [rng.normal(size=(2, 5))]),
    ]


def run(trials: int = 100, log: Optional[Callable[[str], None]] = None,
        e2e: bool = True) -> list[str]:
    """Run the whole suite; returns the list of failure descriptions."""
    log = log or (lambda s: None)
    failures: list[str] = []
    t0 = time.perf_counter()

    names = [c[0] for c in _primitive_cases(np.random.default_rng(0))]
    worst = {n: 0.0 for n in names}
    for trial in range(trials):
        rng = np.random.default_rng(10_000 + trial)
        for name, f, args in _primitive_cases(rng):
            try:
                err = check_gradient(f, args, h=H, rtol=RTOL)
                worst[name] = max(worst[name], err)
            except AssertionError as e:
                failures.append(f"{name} trial {trial}: {e}")
    for name in names:
        status = "FAIL" if any(f.startswith(name + " ") for f in failures) else "pass"
        log(f"  op {name:18s} {status}  (worst rel err {worst[name]:.2e}, {trials} trials)")

    for name, f, args in _layer_cases(np.random.default_rng(77)):
        try:
            err = check_gradient(f, args, h=H, rtol=RTOL)
            log(f"  layer {name:15s} pass  (worst rel err {err:.2e})")
        except AssertionError as e:
            failures.append(f"{name}: {e}")
            log(f"  layer {name:15s} FAIL")

    if e2e:
        model = build_model(CONFIGS["gradcheck-micro"](), seed=5)
        img = Tensor(np.random.default_rng(6).uniform(0.2, 0.8, size=(2, 3, 16, 16)),
                     requires_grad=True)
        labels = np.array([0, 2])

        def loss_fn():
            return cross_entropy(model.forward(img).logits, labels)

        tensors = {"input": img}
        tensors.update(dict(model.named_parameters()))
        try:
            errors = check_named_gradients(tensors, loss_fn, h=H, rtol=RTOL,
                                           sample=6, rng=np.random.default_rng(7))
            log(f"  end-to-end micro model pass  "
                f"(worst rel err {max(errors.values()):.2e}, "
                f"{len(errors)} tensors x <=6 coords)")
        except AssertionError as e:
            failures.append(f"end-to-end: {e}")
            log("  end-to-end micro model FAIL")

    log(f"gradient suite: {'FAIL' if failures else 'PASS'} "
        f"in {time.perf_counter() - t0:.1f}s")
    return failures
