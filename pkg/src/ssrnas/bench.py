"""Synthetic multi-scale 1D labeling task, exhaustive enumeration and the oracle.

Task construction
-----------------
Each sample is ``in_channels x length``. A sample receives
``motifs_per_sample`` motifs placed one after another; every motif draws a
class ``c in 1..K-1``, a width from ``widths`` and a start position, all
independently. A motif adds a box of height 1 over its support on channel 0
and a short onset marker of height 1 over its first ``marker_width`` samples
on channel ``c``. The width says nothing about the class, so a position can
only be labelled correctly by a network that sees the onset marker: the
half receptive field has to reach back to the start of the motif, up to
``width - 1`` samples. Gaussian noise is added to every
entry.

The label of a position is the class of the widest motif covering it (a later
motif wins a tie), background (0) elsewhere.

Random numbers
--------------
All draws come from one SplitMix64 stream seeded with ``TaskConfig.seed``:
``state += 0x9E3779B97F4A7C15`` then the standard 30/27/31 mixing. Uniforms
are ``(z >> 11) * 2**-53``; Gaussians use Box-Muller on consecutive uniform
pairs ``(u1, u2)`` as ``sqrt(-2 ln(1-u1)) cos(2 pi u2)``. The draw order is
documented in :func:`gen_task`.
"""
from __future__ import annotations

import hashlib
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .archspace import (ConfigError, DiscreteArchitecture, LayerChoice, SpaceConfig, StageChoice,
                        space_count)

SPLITS = ("train", "val", "test")
DEFAULT_CAP = 10_000

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """Counter-based SplitMix64 generator producing vectors of draws."""

    def __init__(self, seed: int):
        self.state = np.uint64(seed % 2 ** 64)
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = self.state + steps * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def integers(self, high: np.ndarray | int, n: int) -> np.ndarray:
        """Draws in ``[0, high)`` as ``floor(u * high)``."""
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


@dataclass(frozen=True)
class TaskConfig:
    length: int = 64
    in_channels: int = 3
    num_classes: int = 3
    widths: tuple[int, ...] = (3, 9, 27)
    noise: float = 0.1
    motifs_per_sample: int = 2
    marker_width: int = 3
    n_train: int = 512
    n_val: int = 256
    n_test: int = 256
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))

    def validate(self) -> "TaskConfig":
        if self.num_classes < 2:
            raise ConfigError("num_classes: K must be >= 2")
        if self.in_channels < self.num_classes:
            raise ConfigError("in_channels: need one support channel plus one marker channel per motif class")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths: must be non-empty positive integers")
        if max(self.widths) > self.length:
            raise ConfigError(f"widths: motif width {max(self.widths)} exceeds length {self.length}")
        if self.noise < 0:
            raise ConfigError("noise: must be non-negative")
        if self.marker_width < 1:
            raise ConfigError("marker_width: must be positive")
        if self.motifs_per_sample < 0:
            raise ConfigError("motifs_per_sample: must be non-negative")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        return self


@dataclass
class Dataset:
    inputs: np.ndarray      # (samples, channels, length) float64
    labels: np.ndarray      # (samples, length) int64
    split: np.ndarray       # (samples,) split tag per sample
    config: TaskConfig

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        sel = self.split == name
        return self.inputs[sel], self.labels[sel]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(",".join(self.split.tolist()).encode())
        return h.hexdigest()


def gen_task(config: TaskConfig) -> Dataset:
    """Generate all splits from one stream.

    Draw order: for the whole dataset (train, then val, then test samples),
    ``n*m`` class draws, ``n*m`` width draws, ``n*m`` start draws, then
    ``n*C*L`` Gaussians for the noise (row-major).
    """
    config.validate()
    cfg = config
    n = cfg.n_train + cfg.n_val + cfg.n_test
    m = cfg.motifs_per_sample
    rng = SplitMix64(cfg.seed)
    widths = np.asarray(cfg.widths)
    cls = 1 + rng.integers(cfg.num_classes - 1, n * m).reshape(n, m)
    wid = widths[rng.integers(len(widths), n * m)].reshape(n, m)
    start = rng.integers(cfg.length - wid.ravel() + 1, n * m).reshape(n, m)

    x = np.zeros((n, cfg.in_channels, cfg.length))
    y = np.zeros((n, cfg.length), dtype=np.int64)
    cover = np.zeros((n, cfg.length), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            c, w, a = int(cls[i, j]), int(wid[i, j]), int(start[i, j])
            x[i, 0, a:a + w] += 1.0
            x[i, c, a:a + min(cfg.marker_width, w)] += 1.0
            win = slice(a, a + w)
            take = cover[i, win] <= w
            y[i, win][take] = c
            cover[i, win][take] = w
    if cfg.noise > 0:
        x += cfg.noise * rng.normal(x.size).reshape(x.shape)
    split = np.array(["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test)
    return Dataset(x, y, split, cfg)


def mean_iou(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    """Mean intersection-over-union over classes present in prediction or target."""
    ious = []
    for c in range(num_classes):
        p, t = pred == c, target == c
        union = np.count_nonzero(p | t)
        if union:
            ious.append(np.count_nonzero(p & t) / union)
    return float(np.mean(ious)) if ious else 1.0


# ---------------------------------------------------------------------------
# enumeration and exact cost
# ---------------------------------------------------------------------------

def enumerate_space(config: SpaceConfig, cap: int = DEFAULT_CAP) -> list[DiscreteArchitecture]:
    """Every discrete architecture, depth-major then lexicographic in layer choices."""
    config.validate()
    count = space_count(config)
    if count > cap:
        raise ConfigError(f"space: {count} architectures exceed the enumeration cap {cap}")
    per_stage = []
    for spec in config.stages:
        choices = [LayerChoice(r, s, (c1, c2)) for (r, s) in config.operators
                   for c1 in spec.channel_options for c2 in spec.channel_options]
        stage_opts = []
        for d in sorted(spec.depths):
            stage_opts.extend(StageChoice(d, layers) for layers in itertools.product(choices, repeat=d))
        per_stage.append(stage_opts)
    return [DiscreteArchitecture(tuple(st)) for st in itertools.product(*per_stage)]


def exact_flops(arch: DiscreteArchitecture, config: SpaceConfig) -> float:
    """Cost of a discrete architecture counted layer by layer.

    Same units as the expected-cost model: ``(k*c_in + 1) * c_out`` per output
    position for each convolution, plus ``spatial * c_in`` per pooled position
    for a down-sampled operator.
    """
    arch.validate(config)
    k, length = config.kernel, config.length
    total = 0
    c_prev = config.in_channels
    for st, spec in zip(arch.stages, config.stages):
        c = spec.width
        total += (k * c_prev + 1) * c * length
        for layer in st.layers:
            c1, c2 = layer.channels
            per_pos = (k * c + 1) * c1 + (k * c1 + 1) * c2
            s = layer.spatial
            total += per_pos * length if s == 1 else (per_pos + s * c) * (length // s)
        c_prev = c
    total += (c_prev + 1) * config.num_classes * length
    return float(total)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleEntry:
    index: int
    arch: DiscreteArchitecture
    metric: float
    flops: float

    def to_dict(self) -> dict:
        return {"index": self.index, "arch": self.arch.encode(), "metric": self.metric, "flops": self.flops,
                "architecture": self.arch.to_dict()}


def _oracle_job(args):
    from .engine import retrain
    index, arch, space, dataset, search_config = args
    _, metric = retrain(arch, dataset, search_config, space=space)
    return index, metric


def oracle_rank(space: SpaceConfig, dataset: Dataset, budget: int = 60, seed: int = 0,
                search_config=None, workers: int = 1, cap: int = DEFAULT_CAP) -> list[OracleEntry]:
    """Retrain every architecture of the space and sort by validation metric (descending).

    Ties are broken by enumeration index, so serial and parallel runs agree.
    """
    from .engine import SearchConfig
    from dataclasses import replace
    archs = enumerate_space(space, cap)
    cfg = replace(search_config or SearchConfig(), retrain_epochs=budget, seed=seed)
    jobs = [(i, a, space, dataset, cfg) for i, a in enumerate(archs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_oracle_job, jobs))
    else:
        results = [_oracle_job(j) for j in jobs]
    entries = [OracleEntry(i, archs[i], float(m), exact_flops(archs[i], space)) for i, m in results]
    entries.sort(key=lambda e: (-e.metric, e.index))
    return entries


def oracle_rank_of(entries: list[OracleEntry], arch: DiscreteArchitecture) -> int:
    """1-based position of ``arch`` in a sorted oracle table."""
    code = arch.encode()
    for pos, e in enumerate(entries, start=1):
        if e.arch.encode() == code:
            return pos
    raise KeyError(code)
