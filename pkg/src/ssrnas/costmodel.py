"""Differentiable expected-FLOPs model and the piecewise-log FLOPs constraint.

Units: one unit per multiply-accumulate plus one per bias add, i.e. a
convolution with kernel k, ``c_in`` inputs and ``c_out`` outputs costs
``(k * c_in + 1) * c_out`` per output position.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import adcore as ad
from .archspace import CHANNEL, DEPTH, OPERATOR, SpaceConfig, SuperNet, group_index
from .regloss import relaxed_probs

ARG_FLOOR = 1e-9


@dataclass(frozen=True)
class CostSpec:
    target: float
    tolerance: float = 0.95
    weight: float = 0.01

    def __post_init__(self):
        if not self.target > 0:
            raise ValueError("target must be positive")
        if not 0 < self.tolerance <= 1:
            raise ValueError("tolerance must be in (0,1]")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")

    @property
    def band(self) -> tuple[float, float]:
        return self.tolerance * self.target, self.target


def expected_channels(p, masks):
    """Sum of the entries of the soft mask ``sum_k p_k M_k``."""
    return ad.sum_all(ad.matmul(p, masks))


def expected_operator_flops(e_in, e_outs, kernel: int, length: int, spatial: int):
    """Expected cost of pool -> conv chain -> upsample for one operator.

    ``e_outs`` lists the expected output channels of each convolution in
    order; every convolution reads the previous one's output. With
    ``spatial > 1`` the convolutions run on ``length / spatial`` positions and
    an extra ``spatial * e_in`` per pooled position models pooling and
    upsampling.
    """
    if length % spatial:
        raise ValueError(f"spatial {spatial} does not divide length {length}")
    kernel_cost = 0.0
    c_in = e_in
    for e_out in e_outs:
        term = ad.mul(ad.add(ad.scale(c_in, kernel), 1.0), e_out)
        kernel_cost = ad.add(kernel_cost, term)
        c_in = e_out
    if spatial == 1:
        return ad.scale(kernel_cost, length)
    return ad.scale(ad.add(kernel_cost, ad.scale(e_in, spatial)), length // spatial)


def basic_flops(config: SpaceConfig, stage: int) -> float:
    """Fixed cost of a stage: its entry convolution (plus the classifier for the last stage)."""
    st = config.stages[stage]
    prev = config.in_channels if stage == 0 else config.stages[stage - 1].width
    cost = (config.kernel * prev + 1) * st.width * config.length
    if stage == len(config.stages) - 1:
        cost += (st.width + 1) * config.num_classes * config.length
    return float(cost)


def expected_total_flops(net: SuperNet, groups, probs: dict | None = None):
    """Expected cost under the current relaxed distribution.

    Operators are mixed by their dilation-spatial probabilities, depth taps
    by the depth probabilities over cumulative layer costs, and stages are
    summed. Frozen groups and inactive candidates are skipped. Returns a
    Tensor when any probability is a Tensor.
    """
    cfg = net.config
    index = group_index(groups)

    def prob(level, owner):
        if probs is not None and (level, owner) in probs:
            return probs[(level, owner)]
        return relaxed_probs(index[(level, owner)])

    total = 0.0
    for si, st in enumerate(cfg.stages):
        masks = net.masks[si]
        dg = index[(DEPTH, (si,))]
        pd = prob(DEPTH, (si,))
        live = [dg.candidates[i] for i in dg.active_idx]
        stage_cost = basic_flops(cfg, si)
        cumulative = 0.0
        for li in range(max(live)):
            og = index[(OPERATOR, (si, li))]
            po = prob(OPERATOR, (si, li))
            layer_cost = 0.0
            for oi in og.active_idx:
                r, s = og.candidates[oi]
                e_outs = [expected_channels(prob(CHANNEL, (si, li, oi, ci)), masks) for ci in range(2)]
                op_cost = expected_operator_flops(float(st.width), e_outs, cfg.kernel, cfg.length, s)
                layer_cost = ad.add(layer_cost, ad.mul(ad.take(po, int(oi)), op_cost))
            cumulative = ad.add(cumulative, layer_cost)
            depth = li + 1
            if depth in live:
                j = dg.candidates.index(depth)
                stage_cost = ad.add(stage_cost, ad.mul(ad.take(pd, j), cumulative))
        total = ad.add(total, stage_cost)
    return total


def flops_constraint_loss(e_f, spec: CostSpec):
    """Piecewise log penalty around the closed band ``[tolerance * target, target]``.

    Below the band: ``weight * log|E - target|``; above the target:
    ``weight * log|E - tolerance * target|``; zero inside. Arguments of the
    log are floored at 1e-9.
    """
    e = float(ad.value_of(e_f))
    lo, hi = spec.band
    if lo <= e <= hi:
        return 0.0
    anchor = hi if e < lo else lo
    gap = ad.maximum(ad.absolute(ad.add(e_f, -anchor)), ARG_FLOOR)
    out = ad.scale(ad.log(gap), spec.weight)
    return out if isinstance(out, ad.Tensor) else float(out)


def factorized_conv_flops_2d(e_in: float, e_3x1: float, e_1x3: float, height: int, width: int,
                             spatial: int) -> float:
    """Reference cost of the 2D 3x1 / 1x3 factorized operator.

    The first convolution maps ``e_in`` to ``e_1x3`` channels, the second maps
    ``e_1x3`` to ``e_3x1``; with ``spatial > 1`` the operator runs on an
    ``s x s`` average-pooled map and pays ``s^2 * e_in`` per pooled pixel.
    """
    kernel = (3 * e_in + 1) * e_1x3 + (3 * e_1x3 + 1) * e_3x1
    if spatial == 1:
        return kernel * height * width
    return (kernel + spatial ** 2 * e_in) * (height / spatial) * (width / spatial)

