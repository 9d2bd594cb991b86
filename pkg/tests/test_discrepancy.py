import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geoxval.discrepancy import (
    DiscrepancyKind,
    evaluate,
    evaluate_batch,
    mahalanobis,
    mahalanobis_batch,
    mse,
    mse_batch,
)
from geoxval.errors import DomainError, NotPDError, ShapeError


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([1.0, 2.0, 2.0], [0.0, 0.0, 0.0]) == 3.0
    assert mse([5.0], [0.0]) == 25.0
    with pytest.raises(ShapeError):
        mse([1.0, 2.0], [1.0])


def test_mahalanobis_examples():
    assert mahalanobis([3.0, 4.0], [0.0, 0.0], np.eye(2)) == pytest.approx(5.0, abs=1e-15)
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert mahalanobis([1.0, -1.0], [1.0, -1.0], S) == 0.0
    assert mahalanobis([6.0], [0.0], [[4.0]]) == pytest.approx(3.0, abs=1e-15)
    with pytest.raises(NotPDError):
        mahalanobis([1.0, 1.0], [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ShapeError):
        mahalanobis([1.0, 1.0], [0.0, 0.0], np.eye(3))


def test_dispatch():
    assert DiscrepancyKind.parse("MSE") is DiscrepancyKind.MSE
    assert DiscrepancyKind.MAHALANOBIS.needs_covariance
    with pytest.raises(DomainError):
        DiscrepancyKind.parse("crps")
    assert evaluate("mse", [2.0], [0.0]) == 4.0
    assert evaluate("mahalanobis", [2.0], [0.0], [[4.0]]) == 1.0
    with pytest.raises(ShapeError):
        evaluate("mahalanobis", [2.0], [0.0])


vec = arrays(np.float64, 4, elements=st.floats(-50, 50))


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.floats(1e-3, 1e3))
def test_scaled_identity(a, b, c):
    d = np.linalg.norm(a - b)
    assert mahalanobis(a, b, c * np.eye(4)) == pytest.approx(d / np.sqrt(c), rel=1e-10, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(vec, vec)
def test_symmetry(a, b):
    S = np.array([[2.0, 0.5, 0, 0], [0.5, 1.0, 0.1, 0], [0, 0.1, 1.5, 0.2], [0, 0, 0.2, 3.0]])
    assert mse(a, b) == mse(b, a)
    assert mahalanobis(a, b, S) == pytest.approx(mahalanobis(b, a, S), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_linear_invariance(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    S = A @ A.T + 0.5 * np.eye(4)
    L = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    d = rng.normal(size=4)
    base = mahalanobis(d, np.zeros(4), S)
    moved = mahalanobis(L @ d, np.zeros(4), L @ S @ L.T)
    assert moved == pytest.approx(base, abs=1e-8, rel=1e-8)


def test_batches_match_scalar():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(7, 6))
    y = rng.normal(size=6)
    A = rng.normal(size=(7, 6, 6))
    S = A @ np.swapaxes(A, 1, 2) + np.eye(6)
    groups = [slice(0, 6), slice(0, 2), slice(2, 6)]
    m = mse_batch(Y, y, groups)
    h = mahalanobis_batch(Y, y, S, groups)
    assert m.shape == h.shape == (7, 3)
    for i in range(7):
        for g, sl in enumerate(groups):
            assert m[i, g] == pytest.approx(mse(Y[i, sl], y[sl]), rel=1e-14)
            assert h[i, g] == pytest.approx(mahalanobis(Y[i, sl], y[sl], S[i][sl, sl]), rel=1e-10)
    assert np.array_equal(evaluate_batch("mse", Y, y), mse_batch(Y, y))
    shared = mahalanobis_batch(Y, y, S[0])
    assert shared[3] == pytest.approx(mahalanobis(Y[3], y, S[0]), rel=1e-10)
