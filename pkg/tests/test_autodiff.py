from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kontext import autodiff as ad
from kontext import gradcheck
from kontext.autodiff import GradTape, Tensor
from kontext.errors import ContractError, DimensionError


def test_every_registered_op_has_a_gradcheck_case():
    cases = gradcheck.op_cases(np.random.default_rng(0))
    assert set(ad.REGISTERED_OPS) <= set(cases)


@pytest.mark.parametrize("name", sorted(ad.REGISTERED_OPS))
def test_gradcheck_per_op(name):
    for k in range(5):
        rng = np.random.default_rng([7, k])
        fn, inputs = gradcheck.op_cases(rng)[name]
        assert gradcheck.check(fn, inputs, rng) <= 1e-3


def test_reverse_order_and_accumulation():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with GradTape() as tape:
        y = ad.mul(x, x)
        z = ad.add(y, x)  # x used twice
        loss = ad.sum_(z)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)
    assert [n.kind for n in tape.nodes] == ["mul", "add", "sum"]


def test_frozen_leaves_get_no_gradient():
    w = Tensor(np.ones((2, 2)), requires_grad=False)
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = ad.sum_(ad.linear(x, w))
    grads = tape.backward(loss)
    assert w.grad is None and w not in grads
    assert x.grad is not None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_unreachable_param_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        loss = ad.sum_(a)
    grads = tape.backward(loss, params=[a, b])
    np.testing.assert_array_equal(grads[b], np.zeros(3))


def test_no_recording_outside_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.exp(x)
    assert isinstance(y, Tensor) and x.grad is None


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.floats(-50, 50))
def test_softmax_rows_sum_to_one(rows, cols, shift):
    x = np.random.default_rng(rows * cols).standard_normal((rows, cols)) * 10 + shift
    p = ad.softmax(x).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_softmax_nan_propagates():
    p = ad.softmax(np.array([[0.0, np.nan, 1.0]])).data
    assert np.isnan(p).all()


def test_attention_rows_sum_to_one_under_mask():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
    mask = np.zeros((1, 5, 5), np.float32)
    mask[..., 3:] = -1e9
    _, p = ad.attention(q, k, v, mask, return_probs=True)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert p[..., 3:].max() == 0.0


def test_precision_context_restores_dtype():
    with ad.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
