"""Why the SSR loss behaves like an L0 count: the numbers behind the argument.

The energy E^m(p) = sum p_i^m tends to the number of non-zero entries as
m -> 0. Expanding p^m = exp(m ln p) gives E^m = n + m * sum ln p + O(m^2), so
the first-order term is the SSR loss. This script checks the expansion, the
power-mean limit and the gradient numerically.

Run: python3 demos/02_ssr_and_l0.py
"""
# %%
import numpy as np

from ssrnas import regloss as rl

p = np.array([0.2, 0.5, 0.3])
print("SSR loss of", p, "=", round(rl.ssr_loss(p), 6))
print("entropy          =", round(rl.entropy(p), 6))
for m in (1.0, 0.1, 0.01, 0.0):
    print(f"E^{m:<4} = {rl.pnorm_energy(p, m):.6f}")

# %% Residual of the first-order expansion against its Lagrange bound
rep = rl.check_l0_equivalence(p, [1e-2, 1e-3, 1e-4])
for m, r, b, e in zip(rep.m_values, rep.taylor_residuals, rep.taylor_bounds, rep.limit_rel_errors):
    print(f"m={m:.0e}  residual {r:.3e}  bound {b:.3e}  power-mean rel. error {e:.3e}")
print("gradient factorisation error:", rep.gradient_factorization_error)

# %% SSR pushes towards a vertex: one gradient-descent path on the logits
from ssrnas import adcore as ad

theta = ad.Tensor(np.array([0.3, 0.0, -0.1]))
for step in range(41):
    theta.zero_grad()
    tape = ad.Tape()
    with tape:
        loss = rl.ssr_loss(ad.normalize(ad.sigmoid(theta)))
    ad.backward(tape, loss)
    if step % 10 == 0:
        probs = ad.normalize(ad.sigmoid(theta.values))
        print(f"step {step:3d}  p = {np.round(probs, 3)}  entropy {rl.entropy(probs):.3f}")
    theta.values -= 0.5 * theta.grad
