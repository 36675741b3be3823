"""Hierarchical, progressive pruning of the relaxed search space."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import adcore as ad
from .archspace import CHANNEL, DEPTH, LEVELS, OPERATOR, ArchParamGroup, group_index

DEFAULT_THRESHOLD = 0.1


@dataclass
class ShrinkEvent:
    step: int
    level: str
    owner: tuple
    removed: list
    retaining: list
    frozen: list

    def to_dict(self) -> dict:
        d = asdict(self)
        d["owner"] = list(self.owner)
        d["frozen"] = [[lvl, list(own)] for lvl, own in self.frozen]
        return d


def retaining_probs(group: ArchParamGroup) -> np.ndarray:
    """``sigmoid(theta_i) / max_j sigmoid(theta_j)`` over active candidates (in active order)."""
    idx = group.active_idx
    if idx.size == 0:
        raise ValueError(f"group {group.owner} has no active candidate")
    s = ad.sigmoid(ad.value_of(group.logits)[idx])
    return s / s.max()


def prune_group(group: ArchParamGroup, h: float = DEFAULT_THRESHOLD) -> list[int]:
    """Deactivate every active candidate whose retaining probability is <= h."""
    if not 0 < h < 1:
        raise ValueError("h must be in (0,1)")
    idx = group.active_idx
    r = retaining_probs(group)
    removed = [int(i) for i, ri in zip(idx, r) if ri <= h]
    # the arg-max has r == 1 > h, so at least one candidate survives
    group.active[removed] = False
    return removed


def _freeze(groups_iter, frozen_log):
    for g in groups_iter:
        if not g.frozen:
            g.frozen = True
            frozen_log.append((g.level, g.owner))


def hierarchical_shrink_step(groups: list[ArchParamGroup], h: float = DEFAULT_THRESHOLD,
                             step: int = 0) -> list[ShrinkEvent]:
    """Prune level by level (depth, dilation-spatial, channel), cascading to dependents.

    Removing the deepest surviving depth option freezes every operator and
    channel group of the layers above the new maximum; removing an operator
    candidate freezes its two channel groups.
    """
    index = group_index(groups)
    events: list[ShrinkEvent] = []
    for level in LEVELS:
        for g in groups:
            if g.level != level or g.frozen or g.n_active <= 1:
                continue
            r_before = dict(zip(g.active_idx.tolist(), retaining_probs(g).tolist()))
            removed = prune_group(g, h)
            if not removed:
                continue
            frozen: list = []
            if level == DEPTH:
                (si,) = g.owner
                new_max = max(g.candidates[i] for i in g.active_idx)
                stale = [x for x in groups if x.level in (OPERATOR, CHANNEL)
                         and x.owner[0] == si and x.owner[1] >= new_max]
                _freeze(stale, frozen)
            elif level == OPERATOR:
                si, li = g.owner
                _freeze((index[(CHANNEL, (si, li, oi, ci))] for oi in removed for ci in range(2)), frozen)
            events.append(ShrinkEvent(step, level, g.owner, removed, [r_before[i] for i in removed], frozen))
    return events


def live_groups(groups):
    return [g for g in groups if not g.frozen]


def is_discrete(groups) -> bool:
    return all(g.n_active == 1 for g in groups if not g.frozen)
