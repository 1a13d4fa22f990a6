"""A short tour of the tensor engine and the overlap metrics.

Run with ``python3 demos/autodiff_tour.py``. Takes a few seconds.
"""

import numpy as np

from crackseg import tensor as T
from crackseg.gradcheck import run_gradchecks
from crackseg.metrics import dice, iou
from crackseg.tensor import Tensor

rng = np.random.default_rng(0)

# A convolution followed by a sigmoid and a BCE loss, differentiated by hand.
x = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
w = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
target = Tensor((rng.uniform(0, 1, (1, 2, 8, 8)) > 0.5).astype(np.float32))

loss = T.bce_loss(T.sigmoid(T.conv2d(x, w, b)), target)
loss.backward()
print(f"loss {loss.item():.4f}")
print(f"d loss / d bias {b.grad}")

# Max-pooling remembers where each maximum came from; unpooling puts it back.
grid = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
pooled, idx = T.maxpool2d(grid)
print("pooled\n", pooled.data[0, 0])
print("unpooled\n", T.max_unpool2d(pooled, idx, (4, 4)).data[0, 0])

# Every differentiable op against central differences.
for r in run_gradchecks(seed=0, n_seeds=2):
    print(f"{r.op:18s} max_rel_err={r.max_error:.2e}")

pred, gt = np.array([1, 1, 0, 0]), np.array([0, 1, 1, 0])
print(f"IoU {iou(pred, gt):.4f}  DICE {dice(pred, gt):.4f}")
