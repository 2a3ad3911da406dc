"""Sparse 1-D operator matrices behind every 2-D stencil.

Each separable stencil used by the package (differencing, Gaussian
smoothing, average pooling, the 5-point Laplacian) is written as a pair of
1-D linear maps, one per axis.  A 2-D field ``f`` of shape ``(H, W)`` is then
transformed as ``A_rows @ f @ A_cols.T``.  Keeping the operators explicit
gives exact adjoints for free (``A.T``), which is what the loss gradients in
:mod:`physbed.physics` are built from.

Boundary convention for padded stencils is scipy's ``reflect`` mode
(``d c b a | a b c d``), i.e. numpy's ``symmetric`` padding.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp


def _freeze(m: sp.csr_matrix) -> sp.csr_matrix:
    m.sort_indices()
    for arr in (m.data, m.indices, m.indptr):
        arr.flags.writeable = False
    return m


@lru_cache(maxsize=256)
def diff_matrix(n: int, spacing: float) -> sp.csr_matrix:
    """First derivative: central differences inside, one-sided at both ends.

    Matches ``np.gradient(f, spacing, edge_order=1)`` along one axis.
    """
    if n < 2:
        return _freeze(sp.csr_matrix((n, n)))
    rows, cols, vals = [], [], []
    rows += [0, 0]
    cols += [0, 1]
    vals += [-1.0 / spacing, 1.0 / spacing]
    inner = np.arange(1, n - 1)
    rows += list(inner) + list(inner)
    cols += list(inner - 1) + list(inner + 1)
    vals += [-0.5 / spacing] * len(inner) + [0.5 / spacing] * len(inner)
    rows += [n - 1, n - 1]
    cols += [n - 2, n - 1]
    vals += [-1.0 / spacing, 1.0 / spacing]
    return _freeze(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps of odd length ``size``."""
    r = size // 2
    t = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _padded_correlation(n: int, taps: np.ndarray) -> sp.csr_matrix:
    r = len(taps) // 2
    idx = np.pad(np.arange(n), r, mode="symmetric")
    rows = np.repeat(np.arange(n), len(taps))
    cols = np.concatenate([idx[i:i + len(taps)] for i in range(n)])
    vals = np.tile(taps, n)
    # duplicate (row, col) entries from the reflection are summed by scipy
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=256)
def smooth_matrix(n: int, size: int, sigma: float) -> sp.csr_matrix:
    """Gaussian smoothing along one axis with reflect padding."""
    if size == 1:
        return _freeze(sp.identity(n, format="csr"))
    return _freeze(_padded_correlation(n, gaussian_kernel(size, sigma)))


@lru_cache(maxsize=256)
def second_diff_matrix(n: int) -> sp.csr_matrix:
    """``2 f[i] - f[i-1] - f[i+1]`` with reflect padding (one axis of the 5-point kernel)."""
    return _freeze(_padded_correlation(n, np.array([-1.0, 2.0, -1.0])))


@lru_cache(maxsize=256)
def pool_matrix(n: int, k: int) -> sp.csr_matrix:
    """Block means of length ``k``; a trailing partial block averages its actual cells."""
    m = -(-n // k)
    rows = np.arange(n) // k
    counts = np.bincount(rows, minlength=m).astype(float)
    vals = 1.0 / counts[rows]
    return _freeze(sp.csr_matrix((vals, (rows, np.arange(n))), shape=(m, n)))


def apply2(a_rows, f: np.ndarray, a_cols) -> np.ndarray:
    """Compute ``a_rows @ f @ a_cols.T`` for sparse 1-D operators (either may be None)."""
    out = f
    if a_rows is not None:
        out = a_rows @ out
    if a_cols is not None:
        out = (a_cols @ out.T).T
    return np.ascontiguousarray(out)


def apply2_adjoint(a_rows, g: np.ndarray, a_cols) -> np.ndarray:
    """Adjoint of :func:`apply2`: ``a_rows.T @ g @ a_cols``."""
    out = g
    if a_cols is not None:
        out = (a_cols.T @ out.T).T
    if a_rows is not None:
        out = a_rows.T @ out
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Array-level 2-D operators and their adjoints.  Axis 0 is y (rows, south to
# north), axis 1 is x (columns, west to east).


def grad_xy(f: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    ny, nx = f.shape
    gx = apply2(None, f, diff_matrix(nx, spacing))
    gy = apply2(diff_matrix(ny, spacing), f, None)
    return gx, gy


def grad_xy_adjoint(ax: np.ndarray, ay: np.ndarray, spacing: float) -> np.ndarray:
    ny, nx = ax.shape
    return (apply2_adjoint(None, ax, diff_matrix(nx, spacing))
            + apply2_adjoint(diff_matrix(ny, spacing), ay, None))


def div_xy(fx: np.ndarray, fy: np.ndarray, spacing: float) -> np.ndarray:
    ny, nx = fx.shape
    return (apply2(None, fx, diff_matrix(nx, spacing))
            + apply2(diff_matrix(ny, spacing), fy, None))


def div_xy_adjoint(g: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    ny, nx = g.shape
    return (apply2_adjoint(None, g, diff_matrix(nx, spacing)),
            apply2_adjoint(diff_matrix(ny, spacing), g, None))


def laplace5(f: np.ndarray) -> np.ndarray:
    """Correlation with [[0,-1,0],[-1,4,-1],[0,-1,0]] under reflect padding."""
    ny, nx = f.shape
    return apply2(second_diff_matrix(ny), f, None) + apply2(None, f, second_diff_matrix(nx))


def laplace5_adjoint(g: np.ndarray) -> np.ndarray:
    ny, nx = g.shape
    return (apply2_adjoint(second_diff_matrix(ny), g, None)
            + apply2_adjoint(None, g, second_diff_matrix(nx)))


def smooth2(f: np.ndarray, size: int, sigma: float) -> np.ndarray:
    ny, nx = f.shape
    return apply2(smooth_matrix(ny, size, sigma), f, smooth_matrix(nx, size, sigma))


def smooth2_adjoint(g: np.ndarray, size: int, sigma: float) -> np.ndarray:
    ny, nx = g.shape
    return apply2_adjoint(smooth_matrix(ny, size, sigma), g, smooth_matrix(nx, size, sigma))


def pool2(f: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return f
    ny, nx = f.shape
    return apply2(pool_matrix(ny, k), f, pool_matrix(nx, k))


def pool2_adjoint(g: np.ndarray, k: int, shape: tuple[int, int]) -> np.ndarray:
    if k == 1:
        return g
    ny, nx = shape
    return apply2_adjoint(pool_matrix(ny, k), g, pool_matrix(nx, k))
