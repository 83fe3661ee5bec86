import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from components.linalg import (
    MacCounter,
    matvec,
    offdiag_frobenius,
    orthonormal_rows,
    thresholded_leaky_relu,
    thresholded_leaky_relu_grad,
    top_k,
    top_k_indices,
    unit_normalize,
    unit_normalize_rows,
)
from utils.errors import DegenerateInputError, InvalidArgumentError

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("v, k, indices, values", [
    ([3, 1, 2], 2, [0, 2], [3, 2]),
    ([1, 1, 1], 2, [0, 1], [1, 1]),
    ([-1, -2, -3], 1, [0], [-1]),
])
def test_top_k_examples(v, k, indices, values):
    code = top_k(v, k)
    assert code.indices.tolist() == indices
    assert code.values.tolist() == values


@pytest.mark.parametrize("k", [0, 4, -1])
def test_top_k_rejects_out_of_range_k(k):
    with pytest.raises(InvalidArgumentError):
        top_k([1.0, 2.0, 3.0], k)


def test_top_k_indices_batched_rows_are_independent():
    values = np.array([[0.1, 0.5, 0.3], [2.0, 1.0, 2.0]])
    assert top_k_indices(values, 2).tolist() == [[1, 2], [0, 2]]


@given(v=arrays(np.float64, st.integers(1, 30), elements=finite), data=st.data())
@settings(max_examples=100, deadline=None)
def test_top_k_properties(v, data):
    k = data.draw(st.integers(1, len(v)))
    code = top_k(v, k)
    assert len(code) == k
    assert np.all(np.diff(code.indices) > 0)
    rest = np.setdiff1d(np.arange(len(v)), code.indices)
    if rest.size:
        assert code.values.min() >= v[rest].max()


@pytest.mark.parametrize("u, expected", [(1.0, 1.0), (0.5, 0.0), (0.0, -0.005)])
def test_thresholded_leaky_relu_examples(u, expected):
    assert thresholded_leaky_relu(np.array([u]), 0.5, 0.01)[0] == pytest.approx(expected)


def test_thresholded_leaky_relu_rejects_negative_params():
    with pytest.raises(InvalidArgumentError):
        thresholded_leaky_relu([1.0], -0.1, 0.01)
    with pytest.raises(InvalidArgumentError):
        thresholded_leaky_relu([1.0], 0.1, -0.01)


@given(arrays(np.float64, 20, elements=finite))
@settings(max_examples=50, deadline=None)
def test_thresholded_leaky_relu_is_monotone(v):
    v = np.sort(v)
    out = thresholded_leaky_relu(v, 0.3, 0.01)
    assert np.all(np.diff(out) >= 0)


def test_thresholded_leaky_relu_grad():
    grad = thresholded_leaky_relu_grad(np.array([1.0, 0.5, -2.0]), 0.5, 0.01)
    assert grad.tolist() == [1.0, 0.01, 0.01]


@pytest.mark.parametrize("M, expected", [
    (np.eye(2), 0.0),
    (np.array([[1.0, 0.5], [0.5, 1.0]]), np.sqrt(0.5)),
    (np.zeros((3, 3)), 0.0),
])
def test_offdiag_frobenius_examples(M, expected):
    assert offdiag_frobenius(M) == pytest.approx(expected, abs=1e-7)


@pytest.mark.parametrize("M", [np.zeros((2, 3)), np.ones((1, 1)), np.ones(4)])
def test_offdiag_frobenius_rejects_bad_shapes(M):
    with pytest.raises(InvalidArgumentError):
        offdiag_frobenius(M)


@given(arrays(np.float64, (4, 4),
              elements=st.one_of(st.just(0.0), st.floats(1e-3, 10), st.floats(-10, -1e-3))))
@settings(max_examples=50, deadline=None)
def test_offdiag_frobenius_zero_iff_diagonal(M):
    is_diagonal = np.count_nonzero(M - np.diag(np.diag(M))) == 0
    assert (offdiag_frobenius(M) == 0) == is_diagonal


def test_unit_normalize():
    assert unit_normalize([3.0, 4.0]).tolist() == [0.6, 0.8]
    with pytest.raises(DegenerateInputError):
        unit_normalize([0.0, 0.0])


def test_unit_normalize_rows_reports_zero_rows():
    with pytest.raises(DegenerateInputError, match=r"\[1\]"):
        unit_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_matvec_counts_macs():
    counter = MacCounter()
    out = matvec(np.ones((3, 4)), np.arange(4.0), counter, "term")
    assert out.tolist() == [6.0, 6.0, 6.0]
    matvec(np.ones((2, 2)), np.ones(2), counter, "term")
    assert counter.terms == {"term": 16}
    assert counter.total == 16


def test_orthonormal_rows(rng):
    Q = orthonormal_rows(rng.standard_normal((3, 7)))
    np.testing.assert_allclose(Q @ Q.T, np.eye(3), atol=1e-12)
