"""
Autograd tape and finite-difference checks
==========================================

Every differentiable primitive records a backward closure on the active
tape. Here we build a tiny conv net by hand, check one gradient against
central differences and then run the packaged op suite.
"""

import numpy as np

from terdnet import tensor as T
from terdnet.gradcheck import check_function, op_suite
from terdnet.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# a 3x3 conv followed by tanh and a sum, all in float64
x = Tensor(rng.standard_normal((1, 2, 5, 5)))
w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)

with Tape() as tape:
    y = T.tanh(T.conv2d(x, w, b, 1, 1))
    loss = T.sum_all(y)
grads = tape.backward(loss, [w, b])
print("forward output shape:", y.shape)
print("dL/db:", np.round(grads[b], 4))

# the bias gradient of sum(tanh(z)) is sum(1 - tanh(z)^2) per output channel
print("closed form:", np.round((1 - y.data**2).sum(axis=(0, 2, 3)), 4))

# check_function compares tape gradients of a randomly weighted sum of
# f(inputs) with central differences for every input entry
row = check_function("conv+tanh", lambda a, k: T.tanh(T.conv2d(a, k, None, 1, 1)),
                     [x.data, w.data], seed=0)
print(row.line())

# the full suite: one row per primitive
for row in op_suite(seed=0):
    print(row.line())
