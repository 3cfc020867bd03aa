"""Hot numeric kernels: one-sided Jacobi SVD and batched ALS row solves.

Each kernel has two implementations. The numba one is a plain scalar loop
compiled with ``@njit``; the numpy one is vectorised (round-robin Jacobi
pairs, batched normal equations). The numba path is used when numba is
importable and ``VODKIT_DISABLE_NUMBA`` is unset. ``use_backend`` switches
at runtime, mainly for tests and the benchmark.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np

from ._accel import HAVE_NUMBA, njit
from .errors import DegenerateError

JACOBI_TOL = 1e-10
MAX_SWEEPS = 80
# Cholesky pivot below this fraction of the largest diagonal => singular.
PIVOT_RTOL = 1e-13

_state = {"backend": "numba" if HAVE_NUMBA else "numpy"}


def backend() -> str:
    return _state["backend"]


def available_backends() -> list[str]:
    return ["numba", "numpy"] if HAVE_NUMBA else ["numpy"]


@contextmanager
def use_backend(name: str):
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    old = _state["backend"]
    _state["backend"] = name
    try:
        yield
    finally:
        _state["backend"] = old


# ---------------------------------------------------------------------------
# One-sided Jacobi
# ---------------------------------------------------------------------------

def _jacobi_cyclic(w, vr, tol, max_sweeps):
    # Rows of w are the columns being orthogonalised; vr accumulates V^T.
    n, m = w.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += w[p, i] * w[p, i]
                    beta += w[q, i] * w[q, i]
                    gamma += w[p, i] * w[q, i]
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    wp = w[p, i]
                    wq = w[q, i]
                    w[p, i] = c * wp - s * wq
                    w[q, i] = s * wp + c * wq
                for i in range(vr.shape[1]):
                    vp = vr[p, i]
                    vq = vr[q, i]
                    vr[p, i] = c * vp - s * vq
                    vr[q, i] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return max_sweeps


def _round_robin(n):
    """Pairings of 0..n-1 (n even) covering every pair once per sweep."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_round_robin(w, vr, tol, max_sweeps):
    n = w.shape[0]
    if n % 2:
        # zero dummy row: never rotates
        w = np.vstack([w, np.zeros((1, w.shape[1]))])
        vr = np.vstack([vr, np.zeros((1, vr.shape[1]))])
    rounds = _round_robin(w.shape[0])
    sweeps = max_sweeps
    for sweep in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            wp, wq = w[p], w[q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            # zeta may overflow for a near-zero gamma; t -> 0 is the right limit
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            wp, wq = w[p], w[q]
            w[p], w[q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = vr[p], vr[q]
            vr[p], vr[q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            sweeps = sweep + 1
            break
    if w.shape[0] != n:
        w, vr = w[:n], vr[:n, :n]
    return w, vr, sweeps


if HAVE_NUMBA:
    _jacobi_cyclic_nb = njit(nogil=True, cache=True)(_jacobi_cyclic)


def jacobi_svd(a, tol: float = JACOBI_TOL, max_sweeps: int = MAX_SWEEPS):
    """Thin SVD ``a = u @ diag(s) @ vt`` by one-sided Jacobi rotations.

    Works on the smaller Gram dimension (transposes wide inputs). Singular
    values come back in descending order; equal values keep their original
    column order. Returns ``(u, s, vt, sweeps)``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or 0 in a.shape:
        raise ValueError(f"need a non-empty 2-d array, got shape {a.shape}")
    if a.shape[1] > a.shape[0]:
        v, s, ut, sweeps = jacobi_svd(a.T, tol, max_sweeps)
        return ut.T, s, v.T, sweeps
    n = a.shape[1]
    w = np.array(a.T, dtype=np.float64, order="C")
    vr = np.eye(n)
    if backend() == "numba":
        sweeps = _jacobi_cyclic_nb(w, vr, tol, max_sweeps)
    else:
        w, vr, sweeps = _jacobi_round_robin(w, vr, tol, max_sweeps)
    s = np.sqrt(np.einsum("ij,ij->i", w, w))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[order]
    vt = vr[order]
    u = np.zeros_like(w)
    nz = s > 0
    u[nz] = w[nz] / s[nz, None]
    return u.T, s, vt, sweeps


def singular_values(a, tol: float = JACOBI_TOL) -> np.ndarray:
    return jacobi_svd(a, tol)[1]


# ---------------------------------------------------------------------------
# Regularised least squares, one small system per row
# ---------------------------------------------------------------------------

def _solve_rows_loop(indptr, indices, values, other, lam, out, start, stop):
    r = other.shape[1]
    g = np.empty((r, r))
    b = np.empty(r)
    y = np.empty(r)
    for row in range(start, stop):
        for a in range(r):
            b[a] = 0.0
            for c in range(r):
                g[a, c] = 0.0
        for k in range(indptr[row], indptr[row + 1]):
            j = indices[k]
            x = values[k]
            for a in range(r):
                oa = other[j, a]
                b[a] += oa * x
                for c in range(a + 1):
                    g[a, c] += oa * other[j, c]
        scale = 0.0
        for a in range(r):
            g[a, a] += lam
            if g[a, a] > scale:
                scale = g[a, a]
        # in-place Cholesky on the lower triangle
        for a in range(r):
            for c in range(a + 1):
                acc = g[a, c]
                for k in range(c):
                    acc -= g[a, k] * g[c, k]
                if a == c:
                    if acc <= PIVOT_RTOL * scale:
                        return row
                    g[a, a] = math.sqrt(acc)
                else:
                    g[a, c] = acc / g[c, c]
        for a in range(r):
            acc = b[a]
            for k in range(a):
                acc -= g[a, k] * y[k]
            y[a] = acc / g[a, a]
        for a in range(r - 1, -1, -1):
            acc = y[a]
            for k in range(a + 1, r):
                acc -= g[k, a] * out[row, k]
            out[row, a] = acc / g[a, a]
    return -1


if HAVE_NUMBA:
    _solve_rows_nb = njit(nogil=True, cache=True)(_solve_rows_loop)


def _solve_rows_numpy(indptr, indices, values, other, lam):
    nrows = len(indptr) - 1
    r = other.shape[1]
    row_of = np.repeat(np.arange(nrows), np.diff(indptr))
    o = other[indices]
    g = np.empty((nrows, r, r))
    for a in range(r):
        for c in range(a + 1):
            g[:, a, c] = g[:, c, a] = np.bincount(row_of, weights=o[:, a] * o[:, c], minlength=nrows)
    b = np.empty((nrows, r))
    for a in range(r):
        b[:, a] = np.bincount(row_of, weights=o[:, a] * values, minlength=nrows)
    diag = np.arange(r)
    g[:, diag, diag] += lam
    scale = g[:, diag, diag].max(axis=1)
    # Cholesky pivots vectorised over rows; same singularity test as the scalar kernel.
    low = np.zeros_like(g)
    for a in range(r):
        for c in range(a + 1):
            acc = g[:, a, c] - np.einsum("ik,ik->i", low[:, a, :c], low[:, c, :c])
            if a == c:
                bad = acc <= PIVOT_RTOL * scale
                if bad.any():
                    return None, int(np.flatnonzero(bad)[0])
                low[:, a, a] = np.sqrt(acc)
            else:
                low[:, a, c] = acc / low[:, c, c]
    sol = np.linalg.solve(g, b[:, :, None])[:, :, 0]
    return sol, -1


def solve_rows(indptr, indices, values, other, lam: float, threads: int = 1) -> np.ndarray:
    """For each row ``i`` solve ``(O_i^T O_i + lam I) x = O_i^T y_i``.

    ``indptr/indices/values`` hold the observed entries in CSR layout and
    ``other`` is the frozen factor matrix of the opposite side. Rows are
    independent, so threaded execution gives bitwise the same result.
    """
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    other = np.ascontiguousarray(other, dtype=np.float64)
    nrows = len(indptr) - 1
    if backend() == "numpy":
        out, failed = _solve_rows_numpy(indptr, indices, values, other, float(lam))
    else:
        out = np.zeros((nrows, other.shape[1]))
        threads = max(1, min(int(threads), nrows))
        if threads == 1:
            failed = _solve_rows_nb(indptr, indices, values, other, float(lam), out, 0, nrows)
        else:
            bounds = np.linspace(0, nrows, threads + 1).astype(np.int64)
            with ThreadPoolExecutor(threads) as pool:
                futs = [
                    pool.submit(_solve_rows_nb, indptr, indices, values, other, float(lam), out, lo, hi)
                    for lo, hi in zip(bounds[:-1], bounds[1:])
                ]
                codes = [f.result() for f in futs]
            bad = [c for c in codes if c >= 0]
            failed = min(bad) if bad else -1
    if failed >= 0:
        raise DegenerateError(f"singular normal equations for row {failed} (lambda={lam})")
    return out
