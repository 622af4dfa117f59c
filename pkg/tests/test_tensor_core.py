import numpy as np
import pytest

from rana_compress.errors import NonFiniteError, ShapeMismatchError
from rana_compress.tensor_core import (
    as_matrix,
    keep_threshold,
    left_singular_vectors,
    matmul,
    numerical_rank,
    quantile,
    thin_svd,
)


def _jacobi_singular_values(m, sweeps=60):
    """One-sided Jacobi: orthogonalise column pairs until they stop rotating."""
    u = np.array(m, dtype=np.float64)
    n = u.shape[1]
    for _ in range(sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if abs(gamma) <= 1e-15 * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta**2)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t**2)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
        if not rotated:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def _naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for r in range(a.shape[0]):
        for c in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[r, c] += a[r, k] * b[k, c]
    return out


def test_matmul_small_cases():
    m = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert np.array_equal(matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]])), [[2.0], [4.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 3))

    assert np.allclose(matmul(a, b), _naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatchError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_nan_and_vectors():
    with pytest.raises(NonFiniteError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeMismatchError):
        as_matrix([1.0, 2.0])


def test_thin_svd_diagonal_and_rank_one():
    result = thin_svd(np.diag([2.0, 1.0]))
    assert np.allclose(result.s, [2.0, 1.0])
    assert np.allclose(np.abs(result.u), np.eye(2))

    u = np.array([1.0, 2.0, 2.0])
    v = np.array([3.0, 4.0])
    result = thin_svd(np.outer(u, v))
    assert result.s[0] == pytest.approx(15.0)
    assert result.s[1] == pytest.approx(0.0, abs=1e-12)


def test_thin_svd_matches_jacobi_oracle():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((12, 9))

    result = thin_svd(m)

    assert np.linalg.norm(result.reconstruct() - m) <= 1e-10 * np.linalg.norm(m)
    assert np.allclose(result.s, _jacobi_singular_values(m), rtol=1e-10, atol=0)
    assert np.allclose(result.u.T @ result.u, np.eye(9), atol=1e-12)


def test_thin_svd_sign_convention():
    rng = np.random.default_rng(2)
    result = thin_svd(rng.standard_normal((6, 4)))

    for column in result.u.T:
        first = column[np.flatnonzero(np.abs(column) > np.finfo(np.float64).eps)[0]]
        assert first > 0


def test_left_singular_vectors_gram_path_agrees_with_svd():
    rng = np.random.default_rng(3)
    wide = rng.standard_normal((5, 200))

    u, s = left_singular_vectors(wide)
    reference = thin_svd(wide)

    assert np.allclose(s, reference.s, rtol=1e-9)
    assert np.allclose(np.abs(u.T @ reference.u), np.eye(5), atol=1e-8)


def test_numerical_rank_cutoff():
    assert numerical_rank(np.array([1.0, 1e-3, 1e-14])) == 2
    assert numerical_rank(np.array([0.0, 0.0])) == 0


def test_quantile_order_statistic():
    assert quantile([1, 2, 3, 4], 0.5) == 2
    assert quantile([5], 0.0) == 5
    assert quantile([5], 0.7) == 5


def test_quantile_matches_sort_oracle():
    values = np.random.default_rng(4).uniform(size=1000)
    ordered = np.sort(values)

    assert quantile(values, 0.9) == ordered[int(np.ceil(0.9 * 1000)) - 1]


def test_quantile_levels_that_land_on_whole_counts():
    # 0.28 * 25 evaluates to 7.000000000000001 in floating point
    assert quantile(np.arange(1, 26), 0.28) == 7.0
    for n in range(1, 60):
        values = np.arange(1, n + 1, dtype=np.float64)[::-1]
        for j in range(101):
            smallest = max(-(-j * n // 100), 1)
            assert quantile(values, j / 100) == float(smallest), (n, j)


def test_keep_threshold_counts_are_exact_across_levels():
    for n in range(1, 60):
        values = np.arange(1, n + 1, dtype=np.float64)
        for j in range(101):
            keep = min((j * n + 50) // 100, n)
            assert np.sum(values >= keep_threshold(values, j / 100)) == keep, (n, j)


def test_keep_threshold_keeps_rounded_count():
    values = np.array([4.0, 3.0, 2.0, 1.0])

    assert keep_threshold(values, 0.5) == 3.0
    assert keep_threshold(values, 1.0) == 1.0
    assert keep_threshold(values, 0.0) > 4.0
    assert np.sum(values >= keep_threshold(values, 0.75)) == 3
