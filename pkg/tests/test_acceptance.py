"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Criteria 6-10 share one set of searches (three seeds per arm) and one oracle
table, computed lazily and cached for the session. They take about 20 minutes
on one core and are marked ``slow``.
"""
from __future__ import annotations

import dataclasses
import math
import time
from functools import cached_property

import numpy as np
import pytest

from ssrnas import adcore as ad
from ssrnas import bench, engine
from ssrnas.archspace import build_supernet, cardinality_log10, paper_space, tiny_space
from ssrnas.cli import finite_difference_suite
from ssrnas.costmodel import CostSpec, expected_total_flops
from ssrnas.regloss import check_l0_equivalence, normalize_probs
from tests.conftest import record_criterion
from tests.test_costmodel import one_hot_probs

SEEDS = (0, 1, 2)
# search settings for the 256-sample search split (README, "Tiny-space settings")
TINY = dict(weight_lr=1e-2, arch_lr=1e-2, warmup_epochs=20, weight_weight_decay=3e-3, retrain_lr=1e-2)
# the oracle retrains with the plain defaults apart from the learning rate
ORACLE = engine.SearchConfig(retrain_lr=1e-2)
TOP = math.floor(0.1 * 39)  # top 10% of 39 architectures: ranks 1..3


# ---------------------------------------------------------------------------
# 1-4: gradients and the SSR / L0 diagnostics
# ---------------------------------------------------------------------------

PRIMITIVES = {"add", "mul", "scale", "matmul", "conv1d", "avg_pool", "upsample_linear", "sigmoid", "relu", "log",
              "abs", "maximum", "sum", "normalize", "take", "channel_mask", "pad_channels", "cross_entropy"}


def random_tape(rng, depth):
    """A random differentiable program of ``depth`` layer ops over a (1, 2, 8) input and a 3-vector.

    Returns ``fn(x, v)`` with constants frozen at construction.
    """
    ops = []
    for _ in range(depth):
        kind = rng.integers(0, 9)
        if kind == 0:
            ops.append(("conv", rng.normal(size=(2, 2, 3)), rng.normal(size=2), int(rng.choice([1, 2, 4]))))
        elif kind == 1:
            ops.append(("pool",))
        elif kind == 2:
            ops.append(("act", int(rng.integers(0, 2))))
        elif kind == 3:
            ops.append(("logabs",))
        elif kind == 4:
            ops.append(("mask", rng.normal(size=(3, 2))))
        elif kind == 5:
            ops.append(("pad", rng.normal(size=(2, 3, 1)), rng.normal(size=2)))
        elif kind == 6:
            ops.append(("affine", rng.normal(size=(1, 2, 8)), float(rng.normal())))
        elif kind == 7:
            ops.append(("floor", float(rng.normal())))
        else:
            ops.append(("residual", float(rng.uniform(-1, 1))))
    head = int(rng.integers(0, 2))
    labels = rng.integers(0, 2, size=(1, 8))
    weights = rng.normal(size=(1, 2, 8))

    def fn(x, v):
        y = x
        for op in ops:
            if op[0] == "conv":
                y = ad.conv1d(y, op[1], op[2], op[3])
            elif op[0] == "pool":
                y = ad.upsample_linear(ad.avg_pool(y, 2), 2)
            elif op[0] == "act":
                y = ad.sigmoid(y) if op[1] == 0 else ad.relu(y)
            elif op[0] == "logabs":
                y = ad.log(ad.add(ad.absolute(y), 0.5))
            elif op[0] == "mask":
                p = ad.normalize(ad.sigmoid(v))
                y = ad.channel_mask(y, ad.matmul(p, op[1]))
            elif op[0] == "pad":
                y = ad.conv1d(ad.pad_channels(y, 3), op[1], op[2], 1)
            elif op[0] == "affine":
                y = ad.add(ad.mul(y, op[1]), op[2])
            elif op[0] == "floor":
                y = ad.maximum(y, op[1])
            else:
                y = ad.sub(y, ad.scale(ad.sigmoid(y), op[1]))
        tail = ad.mul(ad.take(ad.normalize(ad.sigmoid(v)), 1), 1.0)
        out = ad.cross_entropy_with_logits(y, labels) if head else ad.sum_all(ad.mul(y, weights))
        return ad.add(out, tail)

    return fn


def tape_fd_error(fn, x, v, step=1e-6):
    """Normwise relative error of the tape gradient against central differences."""
    tx, tv = ad.Tensor(x), ad.Tensor(v)
    tape = ad.Tape()
    with tape:
        out = fn(tx, tv)
    ad.backward(tape, out)
    analytic = np.concatenate([tx.grad.ravel(), tv.grad])
    flat = np.concatenate([x.ravel(), v])
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += step
        dn[i] -= step
        f_up = float(fn(up[:16].reshape(x.shape), up[16:]))
        f_dn = float(fn(dn[:16].reshape(x.shape), dn[16:]))
        numeric[i] = (f_up - f_dn) / (2 * step)
    names = {r.name for r in tape.records}
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), 1e-12)), names


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors, seen = [], set()
    for _ in range(50):
        fn = random_tape(rng, int(rng.integers(1, 9)))
        err, names = tape_fd_error(fn, rng.normal(size=(1, 2, 8)), rng.normal(size=3))
        errors.append(err)
        seen |= names
    fd = finite_difference_suite(tiny_space(), bench.TaskConfig(), states=10, seed=0)
    arch_errors = [r["error"] for r in fd if r["function"] == "total_arch_loss"]
    elapsed = time.perf_counter() - t0
    missing = PRIMITIVES - seen
    ok = max(errors) <= 1e-6 and max(arch_errors) <= 1e-6 and not missing and elapsed < 60
    record_criterion(1, "gradient correctness", ok,
                     f"max error random tapes {max(errors):.2e}, total_arch_loss {max(arch_errors):.2e} "
                     f"({len(arch_errors)} states), primitives missing {sorted(missing) or 'none'}, {elapsed:.1f}s")
    assert ok


def simplex_points(n_points=100, seed=7):
    rng = np.random.default_rng(seed)
    points = []
    while len(points) < n_points:
        p = rng.dirichlet(np.ones(int(rng.integers(2, 11))))
        if p.min() >= 1e-3:
            points.append(p)
    return points


M_VALUES = [1e-2, 1e-3, 1e-4]


@pytest.fixture(scope="module")
def equivalence_reports():
    return [check_l0_equivalence(p, M_VALUES) for p in simplex_points()]


def test_criterion_02_taylor_residual(equivalence_reports):
    worst = max(r / b for rep in equivalence_reports for r, b in zip(rep.taylor_residuals, rep.taylor_bounds))
    ok = all(rep.within_bounds for rep in equivalence_reports)
    record_criterion(2, "Taylor residual within Lagrange bound", ok,
                     f"{len(equivalence_reports)} points x {len(M_VALUES)} m, worst residual/bound {worst:.6f}")
    assert ok


def test_criterion_03_power_mean_limit(equivalence_reports):
    at_small = max(rep.limit_rel_errors[-1] for rep in equivalence_reports)
    monotone = all(e[0] >= e[1] >= e[2] for e in (rep.limit_rel_errors for rep in equivalence_reports))
    ok = at_small < 1e-3 and monotone
    record_criterion(3, "power-mean limit", ok,
                     f"max relative error at m=1e-4 {at_small:.2e}, monotone in m for all points: {monotone}")
    assert ok


def test_criterion_04_gradient_factorization(equivalence_reports):
    worst = max(rep.gradient_factorization_error for rep in equivalence_reports)
    ok = worst <= 1e-9
    record_criterion(4, "gradient factorization", ok, f"max |autodiff - diag(1/p^2) p| = {worst:.2e}")
    assert ok


def test_criterion_05_cardinality():
    log10 = cardinality_log10(paper_space(), "paper")
    ok = abs(log10 - 324.44) <= 0.05
    record_criterion(5, "paper cardinality", ok, f"log10 = {log10:.4f} (~{10 ** (log10 % 1):.3f}e{int(log10)})")
    assert ok


# ---------------------------------------------------------------------------
# 6-10: searches and the oracle
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Run:
    arch: object
    report: engine.GapReport
    seconds: float


class Experiments:
    def __init__(self):
        self.data = bench.gen_task(bench.TaskConfig())
        self.space = tiny_space()

    def _search(self, **kw) -> list[Run]:
        runs = []
        for seed in SEEDS:
            t0 = time.perf_counter()
            cfg = engine.SearchConfig(**{**TINY, **kw, "seed": seed})
            arch, _, report = engine.run_search(cfg, self.data, self.space)
            runs.append(Run(arch, report, time.perf_counter() - t0))
        return runs

    @cached_property
    def ssr(self):
        return self._search()

    @cached_property
    def plain(self):
        return self._search(regularizer="none", shrinking=False)

    @cached_property
    def ie(self):
        return self._search(regularizer="IE")

    @cached_property
    def flops(self):
        runs = []
        for seed, free in zip(SEEDS, self.ssr):
            spec = CostSpec(target=0.7 * free.report.expected_flops)
            t0 = time.perf_counter()
            cfg = engine.SearchConfig(**{**TINY, "seed": seed, "cost": spec})
            arch, _, report = engine.run_search(cfg, self.data, self.space)
            runs.append((spec, Run(arch, report, time.perf_counter() - t0)))
        return runs

    @cached_property
    def oracle(self):
        t0 = time.perf_counter()
        entries = bench.oracle_rank(self.space, self.data, budget=60, seed=0, search_config=ORACLE)
        return entries, time.perf_counter() - t0

    def rank(self, arch) -> int:
        return bench.oracle_rank_of(self.oracle[0], arch)


@pytest.fixture(scope="session")
def experiments():
    return Experiments()


def _zero(run):
    return run.report.zero_entropy_epoch


@pytest.mark.slow
def test_criterion_06_entropy_convergence(experiments):
    ssr, plain = experiments.ssr, experiments.plain
    ssr_ok = sum(r.report.converged and _zero(r) is not None and _zero(r) <= 200 for r in ssr)
    plain_ok = sum(r.report.final_entropy > 0.1 for r in plain)
    seconds = sum(r.seconds for r in ssr + plain)
    ok = ssr_ok == 3 and plain_ok == 3 and seconds < 600
    record_criterion(6, "entropy convergence", ok,
                     f"SSR zero-entropy epochs {[_zero(r) for r in ssr]}; plain final entropy "
                     f"{[round(r.report.final_entropy, 3) for r in plain]}; {seconds:.0f}s for 6 searches")
    assert ok


@pytest.mark.slow
def test_criterion_07_gap_reduction(experiments):
    ssr_gap = float(np.mean([abs(r.report.gap) for r in experiments.ssr]))
    plain_gap = float(np.mean([abs(r.report.gap) for r in experiments.plain]))
    ok = ssr_gap <= 0.5 * plain_gap
    record_criterion(7, "discretization gap", ok, f"mean |gap| SSR {ssr_gap:.5f} vs plain {plain_gap:.5f}")
    assert ok


@pytest.mark.slow
def test_criterion_08_oracle_quality(experiments):
    entries, seconds = experiments.oracle
    ranks = [experiments.rank(r.arch) for r in experiments.ssr]
    hits = sum(rank <= TOP for rank in ranks)
    ok = hits >= 2 and seconds < 1800
    record_criterion(8, "oracle quality", ok,
                     f"SSR ranks {ranks} of {len(entries)} (top 10% = rank <= {TOP}), {hits}/3 hits; "
                     f"oracle {seconds:.0f}s, best {entries[0].arch.encode()} {entries[0].metric:.4f}, "
                     f"spread {entries[0].metric - entries[-1].metric:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_09_regularizer_ordering(experiments):
    ssr, ie, plain = experiments.ssr, experiments.ie, experiments.plain
    faster = sum(_zero(s) is not None and (_zero(i) is None or _zero(s) <= _zero(i)) for s, i in zip(ssr, ie))
    rank = {name: [experiments.rank(r.arch) for r in runs] for name, runs in
            (("SSR", ssr), ("IE", ie), ("plain", plain))}
    mean = {k: float(np.mean(v)) for k, v in rank.items()}
    ok = faster == 3 and mean["SSR"] < mean["plain"] and mean["IE"] < mean["plain"]
    record_criterion(9, "regularizer ordering", ok,
                     f"zero-entropy epochs SSR {[_zero(r) for r in ssr]} vs IE {[_zero(r) for r in ie]} "
                     f"({faster}/3 SSR no later); oracle ranks SSR {rank['SSR']} IE {rank['IE']} "
                     f"plain {rank['plain']} (means {mean['SSR']:.1f} / {mean['IE']:.1f} / {mean['plain']:.1f})")
    assert ok


@pytest.mark.slow
def test_criterion_10_flops_constraint(experiments):
    rows, hits = [], 0
    for spec, run in experiments.flops:
        e = run.report.expected_flops
        inside = spec.tolerance * spec.target <= e <= 1.05 * spec.target
        hits += run.report.converged and inside
        rows.append(f"T={spec.target:.0f} E={e:.0f} converged={run.report.converged} {run.arch.encode()}")
    ok = hits >= 2
    record_criterion(10, "FLOPs constraint", ok, f"{hits}/3 converged inside [0.95T, 1.05T]: " + "; ".join(rows))
    assert ok


# ---------------------------------------------------------------------------
# 11-12: cost model and shrinking
# ---------------------------------------------------------------------------

def test_criterion_11_cost_model_consistency():
    space = tiny_space()
    net, groups = build_supernet(space, 0)
    worst = 0.0
    archs = bench.enumerate_space(space)
    for arch in archs:
        with ad.no_grad():
            e = float(ad.value_of(expected_total_flops(net, groups, one_hot_probs(groups, arch))))
        exact = bench.exact_flops(arch, space)
        worst = max(worst, abs(e - exact) / exact)
    ok = worst <= 1e-9
    record_criterion(11, "cost model consistency", ok, f"{len(archs)} architectures, max relative error {worst:.1e}")
    assert ok


def test_criterion_12_shrinking_safety():
    from ssrnas import shrink
    from ssrnas.archspace import SpaceConfig, StageSpec

    space = SpaceConfig(stages=(StageSpec((1, 2, 3), 8, (4, 8)),), dilations=(1, 2, 4), spatials=(1, 2))
    rng = np.random.default_rng(12)
    violations = {"empty": 0, "reactivated": 0, "normalization": 0}
    events = 0
    for _ in range(1000):
        _, groups = build_supernet(space, 0)
        for step in range(100):
            before = [g.active.copy() for g in groups]
            for g in groups:
                if not g.frozen:
                    g.logits.values = g.logits.values + rng.normal(scale=1.5, size=g.size)
            events += len(shrink.hierarchical_shrink_step(groups, float(rng.uniform(0.05, 0.5)), step))
            for g, was in zip(groups, before):
                violations["empty"] += g.n_active < 1
                violations["reactivated"] += int(np.any(g.active & ~was))
                violations["normalization"] += int(abs(normalize_probs(g).p.sum() - 1.0) > 1e-9)
            if shrink.is_discrete(groups):
                break
    ok = not any(violations.values())
    record_criterion(12, "shrinking safety", ok, f"1000 sequences, {events} prune events, violations {violations}")
    assert ok
