import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualnet.gradcheck import gradcheck, relative_error
from dualnet.tensor import (
    NumericalError,
    ShapeError,
    Tensor,
    conv2d,
    float64_mode,
    get_default_dtype,
    log_softmax,
    no_grad,
    softmax,
)
from gradcases import OPERATIONS
from oracles import conv2d_naive


def test_default_dtype_is_float32():
    assert get_default_dtype() is np.float32
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    with float64_mode():
        assert Tensor([1.0]).data.dtype == np.float64
    assert get_default_dtype() is np.float32


def test_backward_accumulates_through_shared_nodes():
    x = Tensor([2.0, -1.0], requires_grad=True)
    y = x * x + x * 3.0
    (y * y).sum().backward()
    # d/dx (x^2 + 3x)^2 = 2 (x^2 + 3x)(2x + 3)
    xs = np.array([2.0, -1.0])
    np.testing.assert_allclose(x.grad, 2 * (xs**2 + 3 * xs) * (2 * xs + 3), rtol=1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_mismatched_shapes_raise():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_size_one_operand_broadcasts():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    s = Tensor([2.0], requires_grad=True)
    (a * s).sum().backward()
    assert s.grad[0] == pytest.approx(15.0)
    np.testing.assert_allclose(a.grad, 2.0)


def test_nan_and_log_domain_raise():
    with pytest.raises(NumericalError):
        Tensor([np.nan])
    with pytest.raises(NumericalError):
        Tensor([0.0, 1.0]).log()
    with pytest.raises(NumericalError), np.errstate(over="ignore"):
        Tensor([1e30]) * 1e30


def test_sqrt_subgradient_at_zero():
    x = Tensor([0.0, 4.0], requires_grad=True)
    x.sqrt().sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        softmax(Tensor([[1.0, 2.0]]), 0.0)
    with pytest.raises(ValueError):
        log_softmax(Tensor([[1.0, 2.0]]), -1.0)


@given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)), st.floats(0.1, 10))
def test_softmax_rows_sum_to_one(x, t):
    with float64_mode():
        p = softmax(Tensor(x), t).data
        lp = log_softmax(Tensor(x), t).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(np.exp(lp), p, rtol=1e-9, atol=1e-300)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_naive_loops(rng, stride, padding):
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    with float64_mode():
        out = conv2d(Tensor(x), Tensor(k), stride, padding).data
    np.testing.assert_allclose(out, conv2d_naive(x, k, stride, padding), rtol=1e-10, atol=1e-12)


def test_conv2d_errors():
    x = Tensor(np.ones((1, 2, 4, 4)))
    with pytest.raises(ShapeError, match="channel"):
        conv2d(x, Tensor(np.ones((3, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.ones((3, 2, 7, 7))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.ones((3, 2, 3, 3))), stride=0)


@pytest.mark.parametrize("name", sorted(OPERATIONS))
def test_gradcheck_operations(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    with float64_mode():
        for _ in range(5):
            fn, inputs = OPERATIONS[name](rng)
            assert gradcheck(fn, inputs) <= 1e-3


def test_gradcheck_rejects_float32():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(TypeError):
        gradcheck(lambda: (x * x).sum(), [x])


def test_relative_error_handles_zero():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.ones(2), np.ones(2)) == 0.0
