import math

import numpy as np
import pytest

from ssrnas import adcore as ad
from ssrnas import costmodel as cm
from ssrnas.archspace import DEPTH, OPERATOR, build_supernet, group_index, tiny_space
from ssrnas.bench import enumerate_space, exact_flops


def one_hot_probs(groups, arch):
    """Probability overrides selecting ``arch`` in a one-stage space."""
    idx = group_index(groups)
    st = arch.stages[0]
    d = idx[(DEPTH, (0,))]
    probs = {(DEPTH, (0,)): np.eye(d.size)[d.candidates.index(st.depth)]}
    for li, layer in enumerate(st.layers):
        og = idx[(OPERATOR, (0, li))]
        probs[(OPERATOR, (0, li))] = np.eye(og.size)[og.candidates.index((layer.dilation, layer.spatial))]
    return probs


def test_single_convolution_hand_count():
    # C_in=4, C_out=8, k=3, L=16: (3*4+1)*8*16
    assert cm.expected_operator_flops(4.0, [8.0], 3, 16, 1) == pytest.approx(1664)


def test_operator_flops_full_resolution():
    # two convolutions 8 -> 8 -> 8, kernel 3: (3*8+1)*8 per conv and position
    assert cm.expected_operator_flops(8.0, [8.0, 8.0], 3, 64, 1) == pytest.approx(2 * 25 * 8 * 64)


def test_operator_flops_pooled():
    # half the positions plus the pooling term s * e_in
    per_pos = (3 * 4 + 1) * 4 * 2 + 2 * 4
    assert cm.expected_operator_flops(4.0, [4.0, 4.0], 3, 64, 2) == pytest.approx(per_pos * 32)
    with pytest.raises(ValueError):
        cm.expected_operator_flops(4.0, [4.0], 3, 63, 2)


def test_factorized_2d_reference():
    # 3x1 then 1x3 on an s x s pooled map
    got = cm.factorized_conv_flops_2d(4, 6, 5, 8, 8, 2)
    expect = ((3 * 4 + 1) * 5 + (3 * 5 + 1) * 6 + 4 * 4) * 16
    assert got == pytest.approx(expect)


def test_expected_flops_matches_exact_on_every_architecture():
    space = tiny_space()
    net, groups = build_supernet(space, 0)
    for arch in enumerate_space(space):
        with ad.no_grad():
            e = cm.expected_total_flops(net, groups, one_hot_probs(groups, arch))
        assert abs(float(ad.value_of(e)) - exact_flops(arch, space)) <= 1e-9


def test_expected_flops_is_linear_in_depth_probs():
    space = tiny_space()
    net, groups = build_supernet(space, 0)
    with ad.no_grad():
        uniform = float(ad.value_of(cm.expected_total_flops(net, groups)))
    costs = {}
    for arch in enumerate_space(space):
        costs.setdefault(arch.stages[0].depth, exact_flops(arch, space))
    assert uniform == pytest.approx(np.mean(list(costs.values())))


def test_constraint_band_and_values():
    spec = cm.CostSpec(target=100.0, tolerance=0.9, weight=0.01)
    assert spec.band == (90.0, 100.0)
    assert cm.flops_constraint_loss(95.0, spec) == 0.0
    assert cm.flops_constraint_loss(90.0, spec) == 0.0
    assert cm.flops_constraint_loss(100.0, spec) == 0.0
    assert cm.flops_constraint_loss(80.0, spec) == pytest.approx(0.01 * math.log(20.0))
    assert cm.flops_constraint_loss(110.0, spec) == pytest.approx(0.01 * math.log(20.0))


@pytest.mark.parametrize("e,sign", [(50.0, -1), (150.0, 1)])
def test_constraint_gradient_sign(e, sign):
    spec = cm.CostSpec(target=100.0, tolerance=0.9, weight=0.01)
    h = 1e-4
    slope = (cm.flops_constraint_loss(e + h, spec) - cm.flops_constraint_loss(e - h, spec)) / (2 * h)
    assert np.sign(slope) == sign
    assert ad.finite_diff_check(lambda x: cm.flops_constraint_loss(ad.sum_all(x), spec), np.array([e])) <= 1e-6


@pytest.mark.parametrize("kw", [dict(target=0.0), dict(target=1.0, tolerance=0.0),
                                dict(target=1.0, tolerance=1.5), dict(target=1.0, weight=-1.0)])
def test_invalid_cost_spec(kw):
    with pytest.raises(ValueError):
        cm.CostSpec(**kw)
