import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vista import numerics as nx
from vista.numerics import ContractError, DimensionError


def naive_matmul(A, B):
    m, k = A.shape
    n = B.shape[1]
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += A[i, p] * B[p, j]
            C[i, j] = s
    return C


def test_matmul_identity_and_dot():
    out = nx.matmul(nx.tensor([[1, 0], [0, 1]]), nx.tensor([[3, 4], [5, 6]]))
    assert out.data.tolist() == [[3, 4], [5, 6]]
    assert nx.matmul(nx.tensor([[1, 2]]), nx.tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(nx.matmul(nx.tensor(A), nx.tensor(B)).data, naive_matmul(A, B), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matmul_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(nx.matmul(nx.tensor(A), nx.tensor(B)).data, naive_matmul(A, B), atol=1e-12)


def test_softmax_examples():
    out = nx.softmax_rows(nx.tensor([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0], [1.0, 2.0, 3.0]])).data
    np.testing.assert_allclose(out[0], [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(out[1], [1.0, 0.0, 0.0], atol=1e-12)
    e = [math.exp(1), math.exp(2), math.exp(3)]
    np.testing.assert_allclose(out[2], [x / math.fsum(e) for x in e], rtol=1e-14)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                     elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = nx.softmax_rows(nx.tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax_rows(nx.tensor(x + c)).data, p, atol=1e-12)


def test_backward_square():
    x = nx.parameter([3.0])
    nx.backward(nx.sum_all(nx.mul(x, x)))
    assert x.grad.tolist() == [6.0]


def test_backward_softmax_sum_is_zero():
    x = nx.parameter([[0.3, -1.2, 2.0, 0.5]])
    nx.backward(nx.sum_all(nx.softmax_rows(x)))
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


def test_fan_out_accumulates():
    x = nx.parameter([[1.5, -2.0]])
    nx.backward(nx.sum_all(nx.add(x, x)))
    assert x.grad.tolist() == [[2.0, 2.0]]


def test_backward_requires_scalar():
    x = nx.parameter([[1.0, 2.0]])
    with pytest.raises(ContractError):
        nx.backward(nx.add(x, x))


def test_tape_is_topological_and_visits_once():
    a = nx.parameter([[1.0, 2.0]])
    b = nx.add(a, a)
    c = nx.mul(b, a)
    loss = nx.sum_all(nx.add(c, b))
    tape = nx.ComputationTape.record(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {i: k for k, i in enumerate(ids)}
    for node in tape.nodes:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_grad_check_quadratic_form():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(4, 4))
    A = nx.tensor(M @ M.T)
    x = nx.parameter(rng.normal(size=(4, 1)))
    f = lambda: nx.sum_all(nx.mul(x, nx.matmul(A, x)))
    assert nx.grad_check(f, [x], eps=1e-5) < 1e-8
    # analytic gradient of x^T A x is 2 A x for symmetric A
    np.testing.assert_allclose(x.grad, 2 * (M @ M.T) @ x.data, rtol=1e-12)


def test_grad_check_rejects_nondeterminism():
    x = nx.parameter([[1.0]])
    calls = iter(range(100))
    f = lambda: nx.scale(x, float(next(calls)) + 1.0)
    with pytest.raises(ContractError, match="deterministic"):
        nx.grad_check(f, [x])


def test_grad_check_eps_range():
    x = nx.parameter([[1.0]])
    with pytest.raises(ContractError):
        nx.grad_check(lambda: nx.sum_all(x), [x], eps=1e-2)


PRIMITIVE_CASES = {
    "matmul_transpose": lambda a, b: nx.matmul(a, nx.transpose(b)),
    "mul_sub": lambda a, b: nx.mul(nx.sub(a, b), a),
    "softmax": lambda a, b: nx.mul(nx.softmax_rows(a), b),
    "log_softmax": lambda a, b: nx.mul(nx.log_softmax_rows(a), b),
    "standardize": lambda a, b: nx.mul(nx.standardize_rows(a), b),
    "l2": lambda a, b: nx.mul(nx.l2_normalize_rows(a), b),
    "gelu_exp": lambda a, b: nx.mul(nx.gelu(a), nx.exp(b)),
    "log": lambda a, b: nx.log(nx.add(nx.mul(a, a), nx.exp(b))),
    "concat_slice": lambda a, b: nx.slice_rows(nx.concat_rows([a, b]), 1, 5),
    "concat_cols": lambda a, b: nx.mul(nx.concat_cols([a, b]), nx.concat_cols([b, a])),
    "gather_diag": lambda a, b: nx.diagonal(nx.matmul(nx.gather_rows(a, [0, 2, 0]), nx.transpose(nx.gather_rows(b, [1, 1, 0])))),
    "mean_rows": lambda a, b: nx.mul(nx.mean_rows(a), nx.mean_rows(b)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a = nx.parameter(rng.normal(size=(3, 4)))
    b = nx.parameter(rng.normal(size=(3, 4)))
    w = nx.tensor(rng.normal(size=PRIMITIVE_CASES[name](a, b).shape))

    def f():
        out = PRIMITIVE_CASES[name](a, b)
        return nx.sum_all(nx.mul(out, w))

    assert nx.grad_check(f, [a, b], eps=1e-5) < 1e-4


def test_row_broadcast_gradients():
    rng = np.random.default_rng(2)
    x = nx.parameter(rng.normal(size=(3, 4)))
    g = nx.parameter(rng.normal(size=4))
    b = nx.parameter(rng.normal(size=4))
    w = nx.tensor(rng.normal(size=(3, 4)))
    f = lambda: nx.sum_all(nx.mul(nx.add_row(nx.mul_row(x, g), b), w))
    assert nx.grad_check(f, [x, g, b]) < 1e-6


def test_scale_and_divide_by_scalar_tensor():
    rng = np.random.default_rng(3)
    x = nx.parameter(rng.normal(size=(2, 3)))
    s = nx.parameter([0.7])
    w = nx.tensor(rng.normal(size=(2, 3)))
    f = lambda: nx.sum_all(nx.mul(nx.add(nx.scale(x, s), nx.divide(x, s)), w))
    assert nx.grad_check(f, [x, s]) < 1e-6


def test_no_grad_records_nothing():
    x = nx.parameter([[1.0, 2.0]])
    with nx.no_grad():
        y = nx.add(x, x)
    assert not y.requires_grad and y._parents == ()
    assert nx.grad_enabled()


def test_no_silent_broadcast():
    with pytest.raises(DimensionError):
        nx.add(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((1, 3))))
    with pytest.raises(DimensionError):
        nx.add_row(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones(2)))


def test_tensor_fields():
    t = nx.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert t.shape == (2, 3)
    assert t.values.tolist() == [1, 2, 3, 4, 5, 6]
    assert t.values.size == math.prod(t.shape)
