import os
import subprocess
import sys

import numpy as np
import pytest

import oracles
from vodkit import kernels
from vodkit.errors import DegenerateError


@pytest.mark.parametrize("shape", [(1, 1), (3, 3), (8, 5), (5, 8), (40, 7), (7, 1), (2, 9)])
def test_jacobi_matches_lapack(backend, shape):
    a = np.random.default_rng(sum(shape)).uniform(-1, 1, shape)
    u, s, vt, _ = kernels.jacobi_svd(a)
    np.testing.assert_allclose(s, np.linalg.svd(a, compute_uv=False), atol=1e-12)
    np.testing.assert_allclose((u * s) @ vt, a, atol=1e-12)
    k = min(shape)
    # one factor is accumulated rotations, the other normalised columns whose
    # orthogonality is limited by the Jacobi stopping tolerance
    np.testing.assert_allclose(vt @ vt.T, np.eye(k), atol=1e-9)
    np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-9)
    assert np.all(np.diff(s) <= 0)


def test_jacobi_3x3_cubic_oracle(backend):
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.uniform(0, 1, (3, 3))
        np.testing.assert_allclose(kernels.singular_values(a), oracles.singular_values_3x3(a), atol=1e-8)


def test_jacobi_rank_deficient_and_zero(backend):
    a = np.outer([1.0, 2, 3, 4], [1.0, 0.5, 0.25])
    u, s, vt, _ = kernels.jacobi_svd(a)
    assert s[1] < 1e-12 * s[0]
    np.testing.assert_allclose((u * s) @ vt, a, atol=1e-12)
    u, s, vt, _ = kernels.jacobi_svd(np.zeros((3, 2)))
    assert np.all(s == 0) and np.all(u == 0)


def test_jacobi_does_not_touch_input(backend):
    a = np.random.default_rng(0).random((3, 6))
    before = a.copy()
    kernels.jacobi_svd(a)
    kernels.jacobi_svd(a.T)
    np.testing.assert_array_equal(a, before)


def test_backends_agree():
    if len(kernels.available_backends()) < 2:
        pytest.skip("numba not available")
    a = np.random.default_rng(1).random((30, 9))
    with kernels.use_backend("numba"):
        s1 = kernels.singular_values(a)
    with kernels.use_backend("numpy"):
        s2 = kernels.singular_values(a)
    np.testing.assert_allclose(s1, s2, atol=1e-13)


def _csr(rng, m, n, r, fill):
    mask = rng.random((m, n)) < fill
    vals = rng.random((m, n))
    rows, cols = np.nonzero(mask)
    indptr = np.concatenate([[0], np.cumsum(mask.sum(axis=1))])
    return mask, vals, indptr, cols, vals[rows, cols], rng.random((n, r))


def test_solve_rows_matches_lstsq(backend):
    rng = np.random.default_rng(5)
    mask, vals, indptr, cols, v, other = _csr(rng, 25, 9, 3, 0.6)
    lam = 0.05
    out = kernels.solve_rows(indptr, cols, v, other, lam)
    for i in range(25):
        o = other[mask[i]]
        g = o.T @ o + lam * np.eye(3)
        np.testing.assert_allclose(out[i], np.linalg.solve(g, o.T @ vals[i, mask[i]]), atol=1e-12)


def test_solve_rows_threads_bitwise(backend):
    rng = np.random.default_rng(6)
    _, _, indptr, cols, v, other = _csr(rng, 301, 20, 2, 0.4)
    one = kernels.solve_rows(indptr, cols, v, other, 0.01, threads=1)
    four = kernels.solve_rows(indptr, cols, v, other, 0.01, threads=4)
    assert np.array_equal(one, four)


def test_solve_rows_empty_row_gives_zero(backend):
    indptr = np.array([0, 0, 2])
    out = kernels.solve_rows(indptr, np.array([0, 1]), np.array([0.5, 0.2]), np.eye(2), 0.1)
    assert np.all(out[0] == 0)


def test_solve_rows_singular_raises(backend):
    indptr = np.array([0, 0])
    with pytest.raises(DegenerateError):
        kernels.solve_rows(indptr, np.array([], dtype=np.int64), np.array([]), np.ones((1, 2)), 0.0)
    # two identical observed columns for a rank-2 solve, no ridge
    with pytest.raises(DegenerateError):
        kernels.solve_rows(np.array([0, 2]), np.array([0, 1]), np.array([0.1, 0.1]), np.ones((2, 2)), 0.0)


def test_env_flag_disables_numba():
    code = "from vodkit import kernels; print(kernels.backend(), kernels.available_backends())"
    env = dict(os.environ, VODKIT_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy ['numpy']"


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        with kernels.use_backend("fortran"):
            pass
