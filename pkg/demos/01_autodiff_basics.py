"""A tour of the tensor core: building a computation, differentiating it,
and checking the gradients against finite differences.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

import lnl.tensor as T
from lnl.gradcheck import max_relative_error, numeric_gradient
from lnl.tensor import DomainError, Tensor

# Tensors are float64 arrays; ops on grad-requiring tensors record a tape.
x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
w = Tensor([0.5, -1.0, 2.0], requires_grad=True)

loss = T.reduce_sum(T.mul(T.mul(x, x), w))  # sum(w * x^2)
loss.backward()
print("loss            :", loss.item())
print("d loss / d x    :", x.grad, "(expect 2*w*x =", 2 * w.data * x.data, ")")
print("d loss / d w    :", w.grad, "(expect x^2   =", x.data**2, ")")

# The same gradient, measured numerically - the core's referee.
numeric = numeric_gradient(lambda v: float(((v * v) * w.data).sum()), x.data)
print("worst rel error :", max_relative_error(x.grad, numeric))

# Gradients accumulate until cleared, which is what an optimizer wants.
x.zero_grad()
for _ in range(3):
    T.reduce_sum(T.mul(x, x)).backward()
print("3 backwards     :", x.grad, "(3 * 2x)")

# Domain violations raise instead of propagating NaN/Inf.
try:
    T.div(Tensor([1.0]), Tensor([0.0]))
except DomainError as e:
    print("div by zero     :", e)
try:
    T.exp(Tensor([1000.0]))
except DomainError as e:
    print("exp overflow    :", e)

# Broadcasting follows trailing-dimension rules, gradients included.
a = Tensor(np.ones((2, 3)), requires_grad=True)
b = Tensor(np.array([10.0, 20.0, 30.0]), requires_grad=True)
T.reduce_sum(T.mul(a, b)).backward()
print("broadcast grad  :", b.grad, "(each column summed over 2 rows)")
