"""The synthetic labelling task and the brute-force oracle over the tiny space.

Every position is labelled with the class of the motif covering it, but the
class is only written at the motif's onset. A network must therefore see up
to 26 samples back, and the receptive field of the searched stack decides how
well it does. The oracle retrains all 39 architectures of the tiny space.

Run: python3 demos/03_task_and_oracle.py [--budget EPOCHS]
(the full 60-epoch oracle takes about 8 minutes on one core)
"""
# %%
import argparse

import numpy as np

from ssrnas import bench, engine
from ssrnas.archspace import tiny_space

parser = argparse.ArgumentParser()
parser.add_argument("--budget", type=int, default=60)
args = parser.parse_args()

task = bench.TaskConfig()
data = bench.gen_task(task)
print("checksum:", data.checksum())
x, y = data.part("train")
print("train inputs", x.shape, "labels", y.shape)
print("label shares:", np.round(np.bincount(y.ravel()) / y.size, 3))

# %% One sample, printed as text: support, the two marker channels, the labels
i = 0
for name, row in (("support", x[i, 0]), ("class 1", x[i, 1]), ("class 2", x[i, 2])):
    print(f"{name:>8} " + "".join("#" if v > 0.5 else "." for v in row))
print(f"{'label':>8} " + "".join(".12"[c] for c in y[i]))

# %% Exact costs
space = tiny_space()
archs = bench.enumerate_space(space)
print(len(archs), "architectures; costs by depth:",
      sorted({bench.exact_flops(a, space) for a in archs}))

# %% The oracle
cfg = engine.SearchConfig(retrain_lr=1e-2)
entries = bench.oracle_rank(space, data, budget=args.budget, seed=0, search_config=cfg)
for rank, e in enumerate(entries, start=1):
    if rank <= 5 or rank > len(entries) - 3:
        print(f"{rank:3d}  {e.metric:.4f}  RF {e.arch.receptive_field():3d}  {e.arch.encode()}")
