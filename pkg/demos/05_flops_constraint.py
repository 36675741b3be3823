"""Searching under a FLOPs budget.

The unconstrained search on the tiny space ends at depth 3 (83648 units).
Here the target is 70% of that; the penalty is zero inside
[0.95 T, T] and logarithmic outside, so the search settles on the cheapest
depth that fits, which is depth 2 (58048 units).

Run: python3 demos/05_flops_constraint.py [--seed N]
"""
# %%
import argparse

from ssrnas import bench, engine
from ssrnas.archspace import tiny_space
from ssrnas.costmodel import CostSpec

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

TINY = dict(weight_lr=1e-2, arch_lr=1e-2, warmup_epochs=20, weight_weight_decay=3e-3, seed=args.seed)
data = bench.gen_task(bench.TaskConfig())
space = tiny_space()

free_arch, _, free = engine.run_search(engine.SearchConfig(**TINY), data, space)
target = 0.7 * free.expected_flops
print(f"unconstrained: {free_arch.encode()}  E[FLOPs] {free.expected_flops:.0f}  -> target {target:.0f}")

# %%
spec = CostSpec(target=target, tolerance=0.95, weight=0.01)


def show(rec):
    if rec.epoch % 20 == 0:
        print(f"epoch {rec.epoch:3d}  E[FLOPs] {rec.expected_flops:8.0f}  penalty {rec.flops_loss:+.4f}")


arch, _, rep = engine.run_search(engine.SearchConfig(cost=spec, **TINY), data, space, on_record=show)
lo, hi = spec.band
print(f"constrained:   {arch.encode()}  E[FLOPs] {rep.expected_flops:.0f}  band [{lo:.0f}, {hi:.0f}]  "
      f"{'inside' if lo <= rep.expected_flops <= 1.05 * target else 'outside'} [0.95T, 1.05T]")
