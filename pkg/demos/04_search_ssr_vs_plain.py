"""SSR search against plain relaxed search on the tiny space.

SSR (with progressive shrinking) collapses every choice group to a single
candidate, so the final state is discrete and the gap between the relaxed
and the arg-max network vanishes. The plain search keeps soft mixtures.

Run: python3 demos/04_search_ssr_vs_plain.py [--seed N]
"""
# %%
import argparse

from ssrnas import bench, engine
from ssrnas.archspace import tiny_space

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

# settings for the 256-sample search split (see the README)
TINY = dict(weight_lr=1e-2, arch_lr=1e-2, warmup_epochs=20, weight_weight_decay=3e-3, seed=args.seed)

data = bench.gen_task(bench.TaskConfig())
space = tiny_space()


def trace(label):
    def show(rec):
        if rec.epoch % 20 == 0 or rec.shrink_events:
            pruned = sum(len(ev["removed"]) for ev in rec.shrink_events)
            print(f"[{label}] epoch {rec.epoch:3d}  entropy {rec.total_entropy:6.3f}  task {rec.task_loss:.3f}"
                  + (f"  pruned {pruned}" if pruned else ""))
    return show


# %% SSR with shrinking
arch, _, rep = engine.run_search(engine.SearchConfig(**TINY), data, space, on_record=trace("SSR"))
print("SSR  :", arch.encode(), "zero entropy at epoch", rep.zero_entropy_epoch, "gap", round(rep.gap, 5))

# %% Plain relaxation, no regulariser, no shrinking
arch_p, _, rep_p = engine.run_search(engine.SearchConfig.plain(**TINY), data, space, on_record=trace("plain"))
print("plain:", arch_p.encode(), "final entropy", round(rep_p.final_entropy, 3), "gap", round(rep_p.gap, 5))

# %% Retrain both and compare on the validation split
for name, a in (("SSR", arch), ("plain", arch_p)):
    _, metric = engine.retrain(a, data, engine.SearchConfig(retrain_lr=1e-2, seed=0), space)
    print(f"{name:<5} retrained mIoU {metric:.4f}")
