import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssrnas import adcore as ad


def grad_of(fn, x):
    leaf = ad.Tensor(x)
    tape = ad.Tape()
    with tape:
        out = fn(leaf)
    ad.backward(tape, out)
    return leaf.grad


def test_plain_arrays_compute_eagerly():
    out = ad.add(np.ones(3), 2.0)
    assert isinstance(out, np.ndarray)
    np.testing.assert_allclose(out, 3.0)


def test_tensor_outside_tape_raises():
    with pytest.raises(ad.TapeError):
        ad.add(ad.Tensor(np.ones(2)), 1.0)


def test_no_grad_computes_without_tape():
    out = None
    with ad.no_grad():
        out = ad.mul(ad.Tensor(np.arange(3.0)), 2.0)
    np.testing.assert_allclose(ad.value_of(out), [0, 2, 4])


def test_backward_needs_scalar():
    tape = ad.Tape()
    with tape:
        y = ad.scale(ad.Tensor(np.ones(3)), 2.0)
    with pytest.raises(ad.TapeError):
        ad.backward(tape, y)


def test_shape_mismatch_is_reported():
    with pytest.raises(ad.ShapeError):
        with ad.Tape():
            ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))


def test_log_domain():
    with pytest.raises(ad.DomainError):
        with ad.Tape():
            ad.log(ad.Tensor(np.array([1.0, -1.0])))


def test_normalize_sigmoid_values():
    p = ad.normalize(ad.sigmoid(np.array([2.0, 0.0, -2.0])))
    np.testing.assert_allclose(p, [0.587198, 0.333333, 0.079469], atol=1e-6)


def test_gradient_of_shared_input_accumulates():
    g = grad_of(lambda x: ad.sum_all(ad.mul(x, x)), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_allclose(g, [2.0, -4.0, 6.0])


def test_forward_eval_replays_with_new_leaf():
    x = ad.Tensor(np.array([1.0, 2.0]), name="x")
    tape = ad.Tape()
    with tape:
        y = ad.sum_all(ad.mul(x, x))
        y.name = "y"
    named = ad.forward_eval(tape, {"x": np.array([3.0, 4.0])})
    assert named["y"].item() == pytest.approx(25.0)
    with pytest.raises(ad.ShapeError):
        ad.forward_eval(tape, {"x": np.ones(3)})
    with pytest.raises(ad.TapeError):
        ad.forward_eval(tape, {"nope": np.ones(2)})


def test_conv1d_matches_direct_sum(rng):
    x = rng.normal(size=(2, 3, 10))
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    out = ad.conv1d(x, w, b, 2)
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.einsum("oik,bikl->bol", w, np.stack([xp[:, :, k * 2:k * 2 + 10] for k in range(3)], axis=2)) \
        + b[None, :, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("name,fn,shape", [
    ("conv1d", lambda x: ad.sum_all(ad.mul(ad.conv1d(x, np.linspace(-1, 1, 18).reshape(2, 3, 3), np.ones(2), 2),
                                           np.linspace(0, 1, 16).reshape(1, 2, 8))), (1, 3, 8)),
    ("pool_up", lambda x: ad.sum_all(ad.mul(ad.upsample_linear(ad.avg_pool(x, 2), 2),
                                            np.arange(16.0).reshape(1, 2, 8))), (1, 2, 8)),
    ("normalize", lambda x: ad.sum_all(ad.mul(ad.normalize(ad.sigmoid(x)), np.array([1.0, -2.0, 0.5]))), (3,)),
    ("cross_entropy", lambda x: ad.cross_entropy_with_logits(x, np.array([[0, 2, 1, 1]])), (1, 3, 4)),
    ("matmul_take", lambda x: ad.sum_all(ad.mul(ad.matmul(x, np.arange(6.0).reshape(3, 2)), ad.take(x, 1))),
     (3,)),
])
def test_finite_difference(name, fn, shape, rng):
    assert ad.finite_diff_check(fn, rng.normal(size=shape)) <= 1e-6


def _random_tape_fn(ops):
    def fn(x):
        y = x
        for op in ops:
            if op == 0:
                y = ad.sigmoid(y)
            elif op == 1:
                y = ad.add(ad.mul(y, y), 0.5)
            elif op == 2:
                y = ad.log(ad.add(ad.mul(y, y), 1.0))
            elif op == 3:
                y = ad.scale(y, -1.5)
            else:
                y = ad.normalize(ad.add(ad.sigmoid(y), 0.1))
        return ad.sum_all(ad.mul(y, np.linspace(-1.0, 1.0, 4)))
    return fn


@settings(max_examples=50, deadline=None)
@given(ops=st.lists(st.integers(0, 4), min_size=1, max_size=6),
       x=arrays(np.float64, 4, elements=st.floats(-2, 2)))
def test_random_tapes_match_finite_differences(ops, x):
    fn = _random_tape_fn(ops)
    g = grad_of(fn, x)
    h = 1e-6
    num = np.array([(fn(x + h * e) - fn(x - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.max(np.abs(g - num)) <= 1e-6 * max(1.0, np.max(np.abs(g)))
