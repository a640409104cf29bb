"""Tour of the tensor engine: build a tiny attention layer by hand, train it
with AdamW, and verify a gradient against finite differences.

Run: python3 demos/02_autodiff.py
"""
import numpy as np

from patchpos.autodiff import (Tensor, finite_difference_check, gelu,
                               softmax_lastdim)
from patchpos.optim import AdamW, cosine_lr

rng = np.random.default_rng(0)

# a single-head attention layer, written out longhand
wq = Tensor(rng.standard_normal((8, 8)) * 0.3, requires_grad=True)
wk = Tensor(rng.standard_normal((8, 8)) * 0.3, requires_grad=True)
wv = Tensor(rng.standard_normal((8, 8)) * 0.3, requires_grad=True)


def attend(x):
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = (q @ k.swapaxes(-1, -2)) * (1 / np.sqrt(8))
    return softmax_lastdim(scores) @ v


x = Tensor(rng.standard_normal((5, 8)))
target = np.roll(x.data, 1, axis=0)  # learn to shift rows via attention

err = finite_difference_check(lambda wq, wk, wv: (attend(x) ** 2).sum(),
                              [wq, wk, wv])
print(f"finite-difference check on the attention weights: max rel err {err:.2e}")

opt = AdamW({"wq": wq, "wk": wk, "wv": wv}, lr=0.05, weight_decay=0.0)
for step in range(200):
    diff = attend(x) - Tensor(target)
    loss = (diff * diff).mean()
    opt.zero_grad()
    loss.backward()
    opt.step(lr=cosine_lr(step, 200, 0.05, warmup_steps=10))
    if step % 50 == 0:
        print(f"step {step:3d}  loss {float(loss.data):.4f}  "
              f"(gelu of loss: {float(gelu(loss).data):.4f})")
print(f"final loss {float(loss.data):.4f}")
