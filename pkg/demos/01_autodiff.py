"""Small tour of the tensor engine: build a graph, backpropagate, and check
the result against central differences."""

import numpy as np

from posefield.autodiff import Tensor, backward, functional as F, grad_check, precision

rng = np.random.default_rng(0)

# a two-layer perceptron by hand
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
w2 = Tensor(rng.normal(size=(8, 1)), requires_grad=True)
y = F.matmul(F.relu(F.matmul(x, w1)), w2)
loss = F.mean(F.square(y))
backward(loss)
print("loss", loss.item())
print("grad w2 shape", w2.grad.shape)

# the same function checked numerically, in 64-bit
with precision(np.float64):
    a = rng.normal(size=(4, 3))
    err = grad_check(lambda t: F.sum(F.softplus(F.matmul(t, w1.data.astype(np.float64)))), [a])
print("max relative error", err)

# softmax over a channel axis stays on the simplex
s = F.softmax(Tensor(rng.normal(size=(5, 2, 2))), axis=0).data
print("channel sums", s.sum(axis=0).ravel())
