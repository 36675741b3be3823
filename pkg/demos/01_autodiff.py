"""A tour of the tape-based autodiff engine the search is built on.

Run: python3 demos/01_autodiff.py
"""
# %% Tensors, tapes and backward
import numpy as np

from ssrnas import adcore as ad

theta = ad.Tensor(np.array([2.0, 0.0, -2.0]), name="theta")
tape = ad.Tape()
with tape:
    p = ad.normalize(ad.sigmoid(theta))          # sigmoid, then divide by the sum
    loss = ad.sum_all(ad.log(p))                 # the SSR loss of one choice group
ad.backward(tape, loss)
print("p          =", np.round(p.values, 6))      # [0.587198 0.333333 0.079469]
print("SSR loss   =", round(loss.item(), 6))
print("dL/dtheta  =", np.round(theta.grad, 6))
print("tape length:", len(tape), "records")

# %% The same function on plain arrays runs eagerly, no tape needed
print("eager p    =", np.round(ad.normalize(ad.sigmoid(np.array([2.0, 0.0, -2.0]))), 6))

# %% Replaying a tape with a new input
ad.forward_eval(tape, {"theta": np.array([0.0, 0.0, 0.0])})
print("replayed   =", round(loss.item(), 6), "(= 3 ln(1/3) =", round(3 * np.log(1 / 3), 6), ")")

# %% Finite differences: every primitive the supernet uses
rng = np.random.default_rng(0)
w = rng.normal(size=(4, 3, 3))
labels = rng.integers(0, 3, size=(2, 64))
checks = {
    "dilated conv": lambda x: ad.sum_all(ad.mul(ad.conv1d(x, w, np.zeros(4), 4), np.linspace(-1, 1, 64))),
    "pool + upsample": lambda x: ad.sum_all(ad.mul(ad.upsample_linear(ad.avg_pool(x, 2), 2), x)),
    "cross entropy": lambda x: ad.cross_entropy_with_logits(x, labels),
}
shapes = {"dilated conv": (2, 3, 64), "pool + upsample": (2, 3, 64), "cross entropy": (2, 3, 64)}
for name, fn in checks.items():
    err = ad.finite_diff_check(fn, rng.normal(size=shapes[name]))
    print(f"{name:<16} relative error {err:.2e}")
