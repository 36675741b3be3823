"""Bi-level alternating search, discretization, gap measurement and retraining."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import adcore as ad
from .archspace import (CHANNEL, DEPTH, LEVELS, OPERATOR, ArchParamGroup, DiscreteArchitecture, LayerChoice,
                        SpaceConfig, StageChoice, SuperNet, build_discrete_net, build_supernet, discrete_forward,
                        group_index, supernet_forward)
from .bench import Dataset, mean_iou
from .costmodel import CostSpec, expected_total_flops, flops_constraint_loss
from .regloss import (DEFAULT_RHO, entropy, normalize_probs, regularizer, relaxed_probs, total_arch_loss)
from .shrink import DEFAULT_THRESHOLD, hierarchical_shrink_step, is_discrete

REGULARIZERS = ("SSR", "L1", "L2", "IE", "none")


class SearchAborted(RuntimeError):
    """Raised on a non-finite loss; ``snapshot`` holds the offending state."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 200
    batch_size: int = 32
    arch_lr: float = 0.002
    arch_weight_decay: float = 1e-3
    weight_lr: float = 3e-4
    weight_weight_decay: float = 1e-4
    poly_power: float = 0.9
    rho: dict = field(default_factory=lambda: dict(DEFAULT_RHO))
    h: float = DEFAULT_THRESHOLD
    cost: CostSpec | None = None
    regularizer: str = "SSR"
    ie_sign: float = 1.0
    shrinking: bool = True
    seed: int = 0
    warmup_epochs: int = 0
    retrain_epochs: int = 60
    retrain_lr: float | None = None

    def validate(self) -> "SearchConfig":
        from .archspace import ConfigError
        if self.epochs < 0:
            raise ConfigError("epochs: must be non-negative")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs: must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive")
        for name in ("arch_lr", "weight_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: learning rate must be > 0")
        if self.retrain_lr is not None and not self.retrain_lr > 0:
            raise ConfigError("retrain_lr: learning rate must be > 0")
        if not 0 < self.h < 1:
            raise ConfigError("h must be in (0,1)")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer: must be one of {REGULARIZERS}")
        for level, v in self.rho.items():
            if level not in LEVELS:
                raise ConfigError(f"rho.{level}: unknown level")
            if v < 0:
                raise ConfigError(f"rho.{level}: must be non-negative")
        return self

    @classmethod
    def plain(cls, **kw) -> "SearchConfig":
        """Baseline mode: no regularizer, no shrinking."""
        return cls(regularizer="none", shrinking=False, **kw)


class Adam:
    """Adam with L2 weight decay and per-entry masking.

    Moments and step counts are kept per key; entries outside ``mask`` are
    neither decayed nor moved and their moments stay untouched.
    """

    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state: dict = {}

    def step(self, key, param: ad.Tensor, lr: float | None = None, mask: np.ndarray | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        m, v, t = self.state.get(key, (np.zeros_like(param.values), np.zeros_like(param.values), 0))
        g = param.grad + self.weight_decay * param.values
        t += 1
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        delta = lr * (m_new / (1 - b1 ** t)) / (np.sqrt(v_new / (1 - b2 ** t)) + self.eps)
        if mask is None:
            m, v = m_new, v_new
            param.values -= delta
        else:
            m = np.where(mask, m_new, m)
            v = np.where(mask, v_new, v)
            param.values -= np.where(mask, delta, 0.0)
        self.state[key] = (m, v, t)

    def reset(self, key) -> None:
        """Forget the moments and step count of ``key``; the next step starts fresh."""
        self.state.pop(key, None)


@dataclass
class TrajectoryRecord:
    epoch: int
    step: int
    groups: list
    level_entropy: dict
    total_entropy: float
    task_loss: float
    reg_loss: float
    flops_loss: float
    expected_flops: float
    weight_loss: float
    shrink_events: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class SearchState:
    net: SuperNet
    groups: list
    config: SearchConfig
    arch_opt: Adam
    weight_opt: Adam
    epoch: int = 0
    step: int = 0
    total_steps: int = 1
    trajectory: list = field(default_factory=list)
    rng: np.random.Generator | None = None


@dataclass
class GapReport:
    continuous_loss: float
    discrete_loss: float
    gap: float
    converged: bool
    epochs_run: int
    zero_entropy_epoch: int | None
    final_entropy: float
    expected_flops: float

    def to_dict(self) -> dict:
        return asdict(self)


def init_state(space: SpaceConfig, config: SearchConfig, steps_per_epoch: int = 1) -> SearchState:
    config.validate()
    net, groups = build_supernet(space, config.seed)
    return SearchState(net, groups, config,
                       Adam(config.arch_lr, config.arch_weight_decay),
                       Adam(config.weight_lr, config.weight_weight_decay),
                       total_steps=max(1, config.epochs * steps_per_epoch),
                       rng=np.random.default_rng(config.seed + 1))


def _live(groups):
    return [g for g in groups if not g.frozen]


def _group_snapshot(groups) -> list:
    out = []
    for g in groups:
        if g.frozen:
            continue
        pv = normalize_probs(g)
        out.append({"level": g.level, "owner": list(g.owner),
                    "candidates": [list(c) if isinstance(c, tuple) else c for c in g.candidates],
                    "active": [int(i) for i in pv.candidates], "probs": pv.p.tolist()})
    return out


def _entropies(groups):
    levels = {lvl: 0.0 for lvl in LEVELS}
    for g in _live(groups):
        levels[g.level] += entropy(normalize_probs(g))
    return levels, float(sum(levels.values()))


def _live_params(net: SuperNet, groups) -> list:
    """Weights reachable through live candidates (entry, head and active operator convs)."""
    index = group_index(groups)
    keys = [k for k in net.params if k[0] != "op"]
    for si, st in enumerate(net.config.stages):
        for li in range(st.max_depth):
            og = index[(OPERATOR, (si, li))]
            if og.frozen:
                continue
            for oi in og.active_idx:
                for ci in range(2):
                    keys += [("op", si, li, int(oi), ci, "w"), ("op", si, li, int(oi), ci, "b")]
    return keys


def _check_finite(state: SearchState, what: str, value: float):
    if not math.isfinite(value):
        snap = {"epoch": state.epoch, "step": state.step, "what": what,
                "groups": _group_snapshot(state.groups)}
        raise SearchAborted(f"non-finite {what} at epoch {state.epoch}, step {state.step}", snap)


def arch_loss_terms(net, groups, batch, config: SearchConfig, tensor: bool = True):
    """Task, regularizer and FLOPs terms of the architecture objective on ``batch``."""
    x, y = batch
    live = _live(groups)
    probs = {(g.level, g.owner): relaxed_probs(g) for g in live}
    task = ad.cross_entropy_with_logits(supernet_forward(net, groups, x, probs), y)
    by_level = {lvl: [] for lvl in LEVELS}
    for g in live:
        if g.n_active > 1:
            by_level[g.level].append(ad.take(probs[(g.level, g.owner)], g.active_idx))
    e_f = fl = 0.0
    if config.cost is not None:
        e_f = expected_total_flops(net, groups, probs)
        fl = flops_constraint_loss(e_f, config.cost)
    total = total_arch_loss(task, by_level, config.rho, fl, config.regularizer, config.ie_sign)
    reg = ad.value_of(total) - ad.value_of(task) - ad.value_of(fl)
    return total, task, float(reg), fl, e_f


def search_step(state: SearchState, train_batch, val_batch, shrink: bool = False) -> TrajectoryRecord:
    """One alternation: architecture update on ``val_batch``, then weights on ``train_batch``."""
    cfg, net, groups = state.config, state.net, state.groups
    warm = state.epoch < cfg.warmup_epochs
    live = [] if warm else [g for g in _live(groups) if g.n_active > 1]
    task_v = reg_v = fl_v = 0.0
    e_f = 0.0
    if live:
        for t in net.params.values():
            t.zero_grad()
        for g in groups:
            g.logits.zero_grad()
        tape = ad.Tape()
        with tape:
            total, task, reg_v, fl, e_f = arch_loss_terms(net, groups, val_batch, cfg)
        _check_finite(state, "architecture loss", float(ad.value_of(total)))
        ad.backward(tape, total)
        for g in live:
            state.arch_opt.step(("arch", g.level, g.owner), g.logits, mask=g.active)
        task_v, fl_v = float(ad.value_of(task)), float(ad.value_of(fl))
    elif cfg.cost is not None:
        with ad.no_grad():
            e_f = expected_total_flops(net, groups)
            fl_v = float(flops_constraint_loss(e_f, cfg.cost))

    keys = _live_params(net, groups)
    for t in net.params.values():
        t.zero_grad()
    with ad.no_grad():
        with_probs = {(g.level, g.owner): relaxed_probs(g) for g in _live(groups)}
    tape = ad.Tape()
    x, y = train_batch
    with tape:
        w_loss = ad.cross_entropy_with_logits(supernet_forward(net, groups, x, with_probs), y)
    _check_finite(state, "weight loss", float(ad.value_of(w_loss)))
    ad.backward(tape, w_loss)
    lr = cfg.weight_lr * (1.0 - min(state.step, state.total_steps - 1) / state.total_steps) ** cfg.poly_power
    for k in keys:
        state.weight_opt.step(k, net.params[k], lr=lr)
    state.step += 1

    events = []
    if shrink and cfg.shrinking and not warm:
        events = hierarchical_shrink_step(groups, cfg.h, state.epoch)
        # a pruned group continues as if its search had started on the smaller
        # candidate set: the removed entries' gradient history would otherwise
        # linger in the survivors' moments (the candidates are coupled by the
        # normalization) and damp their steps for ~1/(1-beta2) steps
        for ev in events:
            state.arch_opt.reset(("arch", ev.level, ev.owner))
    levels, tot = _entropies(groups)
    rec = TrajectoryRecord(state.epoch, state.step, _group_snapshot(groups), levels, tot, task_v, reg_v, fl_v,
                           float(ad.value_of(e_f)), float(ad.value_of(w_loss)), [e.to_dict() for e in events])
    return rec


def _batches(rng, n: int, size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def search_splits(dataset: Dataset):
    """Split the training pool 50/50 into search-train and search-val parts."""
    x, y = dataset.part("train")
    half = len(x) // 2
    return (x[:half], y[:half]), (x[half:], y[half:])


def run_epoch(state: SearchState, train, val) -> TrajectoryRecord:
    cfg = state.config
    tb = _batches(state.rng, len(train[0]), cfg.batch_size)
    vb = _batches(state.rng, len(val[0]), cfg.batch_size)
    rec = None
    for b, idx in enumerate(tb):
        vidx = vb[b % len(vb)]
        rec = search_step(state, (train[0][idx], train[1][idx]), (val[0][vidx], val[1][vidx]),
                          shrink=b == len(tb) - 1)
    state.epoch += 1
    rec.epoch = state.epoch
    state.trajectory.append(rec)
    return rec


def run_search(config: SearchConfig, dataset: Dataset, space: SpaceConfig, on_record=None,
               return_state: bool = False):
    """Search until every live group is a singleton or the epoch budget is spent.

    Returns ``(architecture, trajectory, gap_report)``; ``gap_report.converged``
    flags whether the search ended discrete. With ``return_state`` the final
    :class:`SearchState` is appended to the tuple.
    """
    config.validate()
    train, val = search_splits(dataset)
    steps = math.ceil(len(train[0]) / config.batch_size)
    state = init_state(space, config, steps)
    zero_epoch = 0 if is_discrete(state.groups) else None
    while state.epoch < config.epochs and not is_discrete(state.groups):
        rec = run_epoch(state, train, val)
        if on_record is not None:
            on_record(rec)
        if zero_epoch is None and is_discrete(state.groups):
            zero_epoch = state.epoch
    arch = discretize(state.groups, space)
    report = gap_report(state, val, zero_epoch)
    if return_state:
        return arch, state.trajectory, report, state
    return arch, state.trajectory, report


def gap_report(state: SearchState, val, zero_epoch=None) -> GapReport:
    cont, disc = _gap_losses(state.net, state.groups, val)
    with ad.no_grad():
        e_f = float(expected_total_flops(state.net, state.groups))
    _, tot = _entropies(state.groups)
    return GapReport(cont, disc, disc - cont, is_discrete(state.groups), state.epoch, zero_epoch, tot, e_f)


def discretize(groups: list[ArchParamGroup], space: SpaceConfig | None = None) -> DiscreteArchitecture:
    """Arg-max of every group (lowest index on ties), following the selected path only."""
    index = group_index(groups)

    def pick(level, owner):
        g = index[(level, owner)]
        pv = normalize_probs(g)
        return g.candidates[int(pv.candidates[int(np.argmax(pv.p))])]

    n_stages = 1 + max(g.owner[0] for g in groups if g.level == DEPTH)
    stages = []
    for si in range(n_stages):
        depth = pick(DEPTH, (si,))
        layers = []
        for li in range(depth):
            og = index[(OPERATOR, (si, li))]
            r, s = pick(OPERATOR, (si, li))
            oi = og.candidates.index((r, s))
            layers.append(LayerChoice(r, s, (pick(CHANNEL, (si, li, oi, 0)), pick(CHANNEL, (si, li, oi, 1)))))
        stages.append(StageChoice(depth, tuple(layers)))
    arch = DiscreteArchitecture(tuple(stages))
    if space is not None:
        arch.validate(space)
    return arch


def hard_probs(groups) -> dict:
    """One-hot probability vectors at the arg-max of every live group."""
    out = {}
    for g in _live(groups):
        pv = normalize_probs(g)
        onehot = np.zeros(g.size)
        onehot[int(pv.candidates[int(np.argmax(pv.p))])] = 1.0
        out[(g.level, g.owner)] = onehot
    return out


def _gap_losses(net, groups, val):
    x, y = val
    with ad.no_grad():
        soft = {(g.level, g.owner): relaxed_probs(g) for g in _live(groups)}
        cont = float(ad.cross_entropy_with_logits(supernet_forward(net, groups, x, soft), y))
        disc = float(ad.cross_entropy_with_logits(supernet_forward(net, groups, x, hard_probs(groups)), y))
    return cont, disc


def discretization_gap(net: SuperNet, groups, val_set) -> float:
    """Validation loss with one-hot arg-max probabilities minus loss with the relaxed ones."""
    cont, disc = _gap_losses(net, groups, val_set)
    return disc - cont


def retrain(arch: DiscreteArchitecture, dataset: Dataset, config: SearchConfig, space: SpaceConfig | None = None):
    """Train a fresh subnet on the full training split; return (net, validation mIoU)."""
    space = space or _space_from_dataset(dataset)
    net = build_discrete_net(arch, space, config.seed)
    x, y = dataset.part("train")
    rng = np.random.default_rng(config.seed + 2)
    lr0 = config.retrain_lr or config.weight_lr
    opt = Adam(lr0, config.weight_weight_decay)
    steps_per_epoch = math.ceil(len(x) / config.batch_size)
    total = max(1, config.retrain_epochs * steps_per_epoch)
    step = 0
    for _ in range(config.retrain_epochs):
        for idx in _batches(rng, len(x), config.batch_size):
            for t in net.params.values():
                t.zero_grad()
            tape = ad.Tape()
            with tape:
                loss = ad.cross_entropy_with_logits(discrete_forward(net, x[idx]), y[idx])
            ad.backward(tape, loss)
            lr = lr0 * (1.0 - step / total) ** config.poly_power
            for k, t in net.params.items():
                opt.step(k, t, lr=lr)
            step += 1
    return net, evaluate(net, dataset, "val")


def predict(net, inputs: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        logits = discrete_forward(net, inputs)
    return np.argmax(logits, axis=1)


def evaluate(net, dataset: Dataset, split: str = "val") -> float:
    x, y = dataset.part(split)
    return mean_iou(predict(net, x), y, net.config.num_classes)


def _space_from_dataset(dataset: Dataset) -> SpaceConfig:
    from .archspace import tiny_space
    c = dataset.config
    return tiny_space(length=c.length, in_channels=c.in_channels, num_classes=c.num_classes)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _key_str(key) -> str:
    return json.dumps(list(key) if isinstance(key, tuple) else key)


def save_checkpoint(state: SearchState, path) -> None:
    """Write logits, masks, weights, optimizer moments and counters to one ``.npz`` file."""
    arrays = {}
    meta = {"epoch": state.epoch, "step": state.step, "total_steps": state.total_steps,
            "groups": [], "params": [], "arch_opt": [], "weight_opt": [],
            "rng": state.rng.bit_generator.state if state.rng is not None else None}
    for i, g in enumerate(state.groups):
        arrays[f"g{i}_logits"] = g.logits.values
        arrays[f"g{i}_active"] = g.active
        meta["groups"].append({"level": g.level, "owner": list(g.owner), "frozen": g.frozen})
    for i, (k, t) in enumerate(state.net.params.items()):
        arrays[f"p{i}"] = t.values
        meta["params"].append(list(k))
    for name in ("arch_opt", "weight_opt"):
        opt = getattr(state, name)
        for i, (k, (m, v, t)) in enumerate(opt.state.items()):
            arrays[f"{name}{i}_m"] = m
            arrays[f"{name}{i}_v"] = v
            meta[name].append({"key": list(k), "t": t})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _tuple(x):
    return tuple(_tuple(i) for i in x) if isinstance(x, list) else x


def load_checkpoint(state: SearchState, path) -> SearchState:
    """Restore a checkpoint into a state built from the same space and config."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        index = group_index(state.groups)
        for i, gm in enumerate(meta["groups"]):
            g = index[(gm["level"], _tuple(gm["owner"]))]
            g.logits.values = data[f"g{i}_logits"].copy()
            g.active = data[f"g{i}_active"].copy()
            g.frozen = gm["frozen"]
        for i, k in enumerate(meta["params"]):
            state.net.params[_tuple(k)].values = data[f"p{i}"].copy()
        for name in ("arch_opt", "weight_opt"):
            opt = getattr(state, name)
            opt.state = {_tuple(e["key"]): (data[f"{name}{i}_m"].copy(), data[f"{name}{i}_v"].copy(), e["t"])
                         for i, e in enumerate(meta[name])}
    state.epoch, state.step, state.total_steps = meta["epoch"], meta["step"], meta["total_steps"]
    if meta["rng"] is not None:
        state.rng = np.random.default_rng()
        state.rng.bit_generator.state = meta["rng"]
    return state
