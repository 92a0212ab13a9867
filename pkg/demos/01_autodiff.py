"""
Reverse-mode gradients on 2-D tensors
=====================================

Every operation records itself on a tape when one of its inputs asks for a
gradient. ``backward`` walks that tape once, newest node first.
"""

import numpy as np

from peftlab.tensor import SgdConfig, StaleTapeError, Tensor, backward, matmul, sgd_step, softmax_rows, sub, sum_squares

# a weight we want to learn and a fixed input
rng = np.random.default_rng(0)
W = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 3)))
target = Tensor(x.data @ np.array([[1.0, -1.0], [0.5, 2.0], [0.0, 1.0]]))

loss = sum_squares(sub(matmul(x, W), target))
backward(loss)
print("loss", round(loss.item(), 4))
print("dL/dW\n", W.grad.round(4))

# a tape is consumed by its backward pass
try:
    backward(loss)
except StaleTapeError as exc:
    print("second backward:", exc)

# plain gradient descent recovers the generating weights
cfg = SgdConfig(0.02)
for step in range(300):
    backward(sum_squares(sub(matmul(x, W), target)))
    sgd_step([W], cfg)
print("learned W\n", W.data.round(3))

# softmax is computed with the row max subtracted, so large logits are fine
print(softmax_rows(Tensor([[1000.0, 999.0, 0.0]])).data.round(4))
