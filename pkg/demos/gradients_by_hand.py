"""
Checking gradients against finite differences
=============================================

The autodiff core is small enough to audit: build a loss, call backward and
compare with central differences.
"""

import numpy as np

from maeforge import tensor as T
from maeforge.gradcheck import run_suite

rng = np.random.default_rng(0)
x = T.Tensor(rng.standard_normal((4, 3)))
w = T.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
labels = np.array([0, 1, 1, 0])


def loss():
    return T.cross_entropy(T.gelu(x @ w), labels)


T.backward(loss())
fd = T.finite_diff_grad(loss, w)
print("autodiff\n", w.grad)
print("finite differences\n", fd)
print("relative error", T.relative_error(w.grad, fd))

# the packaged suite covers every op and both models
for name, err in run_suite().items():
    print(f"{name:22s} {err:.2e}")
