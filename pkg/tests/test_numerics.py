import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from loramixer import numerics as nx
from loramixer.errors import DimensionError, NonFiniteError
from loramixer.numerics import Tensor
from loramixer.verify import op_cases

mpmath.mp.dps = 50


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def mp_softmax(row):
    e = [mpmath.exp(mpmath.mpf(float(x))) for x in row]
    z = mpmath.fsum(e)
    return np.array([float(v / z) for v in e])


# -- matmul -----------------------------------------------------------------

def test_matmul_identity(rng):
    m = rng.normal(size=(3, 3))
    assert np.array_equal(nx.matmul(np.eye(3), m).data, m)


def test_matmul_one_by_one():
    assert nx.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(nx.matmul(a, b).data, triple_loop(a, b), rtol=0, atol=1e-12)


@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31))
def test_matmul_triple_loop_property(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
    np.testing.assert_allclose(nx.matmul(a, b).data, triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        nx.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_backward_is_chain_rule(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    nx.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


# -- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    assert nx.softmax(np.zeros(4)).data.tolist() == [0.25] * 4


def test_softmax_saturates_without_overflow():
    p = nx.softmax([1000.0, 0.0]).data
    assert p[0] == 1.0 and p[1] == 0.0


def test_softmax_matches_extended_precision(rng):
    for _ in range(20):
        row = rng.normal(0, 5, size=int(rng.integers(1, 9)))
        np.testing.assert_allclose(nx.softmax(row).data, mp_softmax(row), rtol=1e-13, atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        nx.softmax(np.zeros((3, 0)))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_simplex_and_shift_invariance(logits, c):
    p = nx.softmax(logits).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax(logits + c).data, p, rtol=0, atol=1e-12)


# -- grad_check -------------------------------------------------------------

@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-1e6, 1e6)))
def test_sum_gradient_is_exactly_ones(x):
    t = Tensor(x, requires_grad=True)
    nx.tsum(t).backward()
    assert np.array_equal(t.grad, np.ones_like(x))


def test_grad_check_linear_function_is_exact(rng):
    # dyadic inputs and a power-of-two step make every probe exact, so the error is exactly 0
    x = rng.integers(-64, 64, size=(3, 2)) / 8.0
    assert nx.grad_check(lambda t: nx.tsum(t), [x], eps=2.0 ** -20) == 0.0
    # arbitrary inputs only add summation rounding
    assert nx.grad_check(lambda t: nx.tsum(t), [rng.normal(size=(3, 2))]) <= 1e-9


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-8)
    assert nx.grad_check(lambda t: nx.tsum(t * t), [[1.0, 2.0]]) <= 1e-8


def test_grad_check_rejects_nonfinite_probe():
    # log of a point one eps from zero: the downward probe lands on a nonpositive value
    with pytest.raises(NonFiniteError):
        nx.grad_check(lambda t: nx.tsum(nx.log(t)), [[1e-7]], eps=1e-6)


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        nx.grad_check(lambda t: nx.tsum(t), [[1.0]], eps=0.0)


@pytest.mark.parametrize("seed", range(5))
def test_every_op_gradient(seed):
    for name, f, inputs in op_cases(np.random.default_rng(seed)):
        assert nx.grad_check(f, inputs) <= 1e-5, name


# -- tape -------------------------------------------------------------------

def test_backward_accumulates_shared_subexpressions():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1
    nx.tsum(y).backward()
    assert x.grad.tolist() == [7.0]


def test_tape_is_discarded_after_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = nx.tsum(nx.exp(x))
    y.backward()
    assert y._parents == () and y._backward is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_nonfinite_result_raises():
    with pytest.raises(NonFiniteError):
        nx.exp(Tensor([1e4]))


def test_float32_mode_round_trip():
    nx.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).dtype == np.float32
    finally:
        nx.set_default_dtype(np.float64)
    assert Tensor([1.0]).dtype == np.float64
