import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcheck import PRIMITIVE_CASES, check
from nodeinject import autodiff as ad


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_primitive_matches_finite_differences(name, seed):
    fn, arrays = PRIMITIVE_CASES[name](np.random.default_rng(seed))
    assert check(fn, *arrays) < 1e-6


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
def test_matmul_softmax_chain_gradient(r, k, c, data):
    a = data.draw(hnp.arrays(np.float64, (r, k), elements=finite))
    b = data.draw(hnp.arrays(np.float64, (k, c), elements=finite))
    w = np.linspace(-1, 1, r * c).reshape(r, c)
    err = check(lambda x, y: ad.reduce_sum(ad.mul(ad.row_softmax(ad.matmul(x, y)), ad.Tensor(w))), a, b)
    assert err < 1e-5


def test_shared_leaf_accumulates():
    x = ad.Tensor([[3.0]], requires_grad=True)
    with ad.GradTape() as tape:
        y = ad.add(ad.mul(x, x), x)
    tape.backward(y)
    assert x.grad[0, 0] == pytest.approx(7.0)


def test_backward_twice_is_refused():
    x = ad.Tensor([[1.0]], requires_grad=True)
    with ad.GradTape() as tape:
        y = ad.exp(x)
    tape.backward(y)
    with pytest.raises(ad.TapeError):
        tape.backward(y)


def test_non_scalar_loss_rejected():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.GradTape() as tape:
        y = ad.exp(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_no_recording_outside_tape():
    x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
    y = ad.exp(x)
    assert y._backward is None and not y.requires_grad


def test_constants_get_no_grad():
    x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
    c = ad.Tensor([[5.0, 5.0]])
    with ad.GradTape() as tape:
        y = ad.reduce_sum(ad.mul(x, c))
    tape.backward(y)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [[5.0, 5.0]])


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.add(ad.Tensor(np.ones((2, 2))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        ad.Tensor(np.ones((2, 2, 2)))


def test_spmm_pattern_equals_dense():
    rng = np.random.default_rng(0)
    dense = (rng.random((5, 6)) < 0.4) * rng.normal(size=(5, 6))
    rows, cols = np.nonzero(dense)
    pat = ad.SparsePattern(rows, cols, dense.shape)
    t = rng.normal(size=(6, 3))
    out = ad.spmm_pattern(pat, ad.Tensor(dense[rows, cols].reshape(-1, 1)), ad.Tensor(t))
    np.testing.assert_allclose(out.data, dense @ t, atol=1e-14)


def test_sparse_pattern_rejects_duplicates():
    with pytest.raises(ValueError):
        ad.SparsePattern([0, 0], [1, 1], (2, 2))


def test_row_normalize_keeps_zero_row_finite():
    x = ad.Tensor(np.zeros((1, 3)), requires_grad=True)
    with ad.GradTape() as tape:
        y = ad.reduce_sum(ad.row_normalize(x))
    tape.backward(y)
    assert np.all(y.data == 0) and np.all(np.isfinite(x.grad))


def test_rmsprop_matches_hand_update():
    p = ad.Tensor([[1.0, -2.0]], requires_grad=True)
    p.grad = np.array([[0.5, 0.1]])
    opt = ad.RMSprop([p], lr=0.1, decay=0.9, eps=1e-8, weight_decay=0.01)
    opt.step()
    g = np.array([0.5, 0.1]) + 0.01 * np.array([1.0, -2.0])
    sq = 0.1 * g * g
    expect = np.array([1.0, -2.0]) - 0.1 * g / (np.sqrt(sq) + 1e-8)
    np.testing.assert_allclose(p.data[0], expect, rtol=1e-12)


def test_rmsprop_minimises_quadratic():
    target = np.array([[3.0, -1.0, 0.5]])
    p = ad.Tensor(np.zeros((1, 3)), requires_grad=True)
    opt = ad.RMSprop([p], lr=0.05)
    for _ in range(600):
        opt.zero_grad()
        with ad.GradTape() as tape:
            diff = ad.sub(p, ad.Tensor(target))
            loss = ad.reduce_sum(ad.mul(diff, diff))
        tape.backward(loss)
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=0.05)


def test_tensor_roundtrip_and_truncation():
    arr = np.arange(6, dtype=float).reshape(2, 3) / 7
    buf = io.BytesIO()
    ad.write_tensor(buf, arr)
    raw = buf.getvalue()
    assert len(raw) == 16 + 8 * 6
    np.testing.assert_array_equal(ad.read_tensor(io.BytesIO(raw)).data, arr)
    with pytest.raises(ValueError):
        ad.read_tensor(io.BytesIO(raw[:-3]))
