"""
Reverse-mode automatic differentiation on float64 tensors
=========================================================

The diffcore module records an operation tape while you compose numpy-backed
tensors and replays it backwards from a scalar loss.  This demo builds a tiny
regression, checks its gradients against finite differences, and runs a few
steps of gradient descent.
"""

import numpy as np

from koafusion import diffcore as dc
from koafusion.diffcore import Tensor, grad_check

rng = np.random.default_rng(3)

# a linear model y = x @ w + b fitted to noisy targets with squared error
x = Tensor(rng.normal(size=(32, 4)))
w = Tensor(rng.normal(size=(4, 1)) * 0.1, requires_grad=True)
b = Tensor(np.zeros((1,)), requires_grad=True)
w_true = np.array([[1.5], [-2.0], [0.5], [0.0]])
y = Tensor(x.data @ w_true + rng.normal(0.0, 0.05, size=(32, 1)))


def loss_fn():
    residual = x @ w + b - y
    return dc.mean(residual * residual)


# backward fills .grad on every tensor that requires it
loss = loss_fn()
loss.backward()
print(f"initial loss {loss.item():.4f}, grad norms "
      f"w {np.linalg.norm(w.grad):.3f}, b {np.linalg.norm(b.grad):.3f}")

# the analytic gradients agree with central finite differences
err = grad_check(lambda *_: loss_fn(), [w, b], eps=1e-5)
print(f"gradient check: max relative error {err:.2e}")

# plain gradient descent drives the loss down and recovers w_true
for step in range(200):
    w.grad = None
    b.grad = None
    loss = loss_fn()
    loss.backward()
    w.data -= 0.5 * w.grad
    b.data -= 0.5 * b.grad
print(f"after 200 steps: loss {loss_fn().item():.5f}")
print("recovered weights:", np.round(w.data.ravel(), 3),
      "target:", w_true.ravel())

# the same machinery drives structured ops: convolution, normalization,
# attention-style softmax all backpropagate through one tape
img = Tensor(rng.normal(size=(2, 1, 8, 8)), requires_grad=True)
kernel = Tensor(rng.normal(size=(3, 1, 3, 3)) * 0.2, requires_grad=True)
bias = Tensor(np.zeros(3), requires_grad=True)
feat = dc.relu(dc.conv2d(img, kernel, bias, stride=2, padding=1))
pooled = dc.global_average_pool(feat)
attn = dc.softmax(pooled)
out = dc.tensor_sum(attn * attn)
out.backward()
print(f"conv -> relu -> pool -> softmax graph: output {out.item():.4f}, "
      f"kernel grad norm {np.linalg.norm(kernel.grad):.4f}")
