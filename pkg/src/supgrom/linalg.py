"""
Sparse and dense linear algebra kernels.

Sparse matrices are plain ``scipy.sparse.csr_matrix`` objects kept in
canonical form (sorted column indices, no duplicates). Factorizations go
through SuperLU with partial pivoting and a fill-reducing column ordering
(COLAMD, or a caller-supplied nested-dissection order); the KKT systems
assembled elsewhere are nonsymmetric, so no symmetric factorization is
ever used.
"""

from __future__ import annotations

import gc
import struct
import time
from pathlib import Path

import numpy as np
from scipy import sparse as sp
from scipy.sparse import linalg as spla


MAGIC = b"ROMXMAT1"


class SingularMatrixError(RuntimeError):
    """Raised when a sparse factorization hits a zero (or negligible) pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class AsymmetricMatrixError(ValueError):
    pass


def csr_from_triplets(rows, cols, triplets):
    """
    Build a canonical CSR matrix from ``(i, j, v)`` triplets.

    Duplicate entries are summed.

    Parameters
    ----------
    rows, cols : int
        matrix shape
    triplets : iterable of (int, int, float)
        entries; an empty iterable gives the zero matrix

    Returns
    -------
    scipy.sparse.csr_matrix
    """
    triplets = list(triplets)
    if triplets:
        i, j, v = (np.asarray(c) for c in zip(*triplets))
        i = i.astype(np.int64)
        j = j.astype(np.int64)
        v = v.astype(np.float64)
    else:
        i = j = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    return csr_from_arrays(rows, cols, i, j, v)


def csr_from_arrays(rows, cols, i, j, v):
    """Vectorized variant of :func:`csr_from_triplets`."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    v = np.asarray(v, dtype=np.float64)
    bad = (i < 0) | (i >= rows) | (j < 0) | (j >= cols)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise IndexError(
            "triplet ({}, {}, {}) out of range for {}x{} matrix".format(
                int(i[k]), int(j[k]), float(v[k]), rows, cols))
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite value in triplets")
    mat = sp.coo_matrix((v, (i, j)), shape=(rows, cols)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def canonical(mat):
    """Return ``mat`` as a canonical CSR matrix (float64, sorted, summed)."""
    mat = sp.csr_matrix(mat, dtype=np.float64)
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


class SparseLU:
    """
    LU factorization of a square sparse matrix.

    Without explicit orderings SuperLU picks a COLAMD column ordering and
    uses full partial pivoting. When ``rows``/``cols`` are given, the matrix
    ``A[rows][:, cols]`` is factorized in that order with threshold partial
    pivoting (a row is swapped only if its pivot drops below
    ``1e-3 * max |column|``), which keeps a fill-reducing ordering intact.

    The factor can be reused for several right-hand sides.
    """

    def __init__(self, A, rows=None, cols=None, pivot_rtol=1e-14):
        A = sp.csr_matrix(A, dtype=np.float64)
        n, m = A.shape
        if n != m:
            raise ValueError("matrix must be square, got {}x{}".format(n, m))
        _check_structure(A)
        self._rows = None if rows is None else np.asarray(rows)
        self._cols = None if cols is None else np.asarray(cols)
        if self._cols is not None:
            r = self._rows if self._rows is not None else np.arange(n)
            B = sp.csc_matrix(A[r][:, self._cols])
            opts = dict(permc_spec="NATURAL", diag_pivot_thresh=1e-3)
        else:
            B = sp.csc_matrix(A)
            opts = dict(permc_spec="COLAMD")
        try:
            self._lu = spla.splu(B, **opts)
        except RuntimeError as exc:
            raise SingularMatrixError(
                "sparse LU failed: {}".format(exc), pivot=_first_bad_pivot(B)
            ) from None
        diag = np.abs(self._lu.U.diagonal())
        scale = max(diag.max(initial=0.0), 1.0)
        tiny = np.flatnonzero(diag <= pivot_rtol * scale)
        if tiny.size:
            k = int(tiny[0])
            raise SingularMatrixError(
                "numerically singular matrix: pivot {} has magnitude {:.3e}"
                .format(k, diag[k]), pivot=k)
        self.shape = A.shape

    @property
    def fill(self):
        return self._lu.L.nnz + self._lu.U.nnz

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if self._cols is None:
            return self._lu.solve(b)
        rb = b if self._rows is None else b[self._rows]
        x = np.empty_like(b)
        x[self._cols] = self._lu.solve(rb)
        return x


def nested_dissection(coords, leaf_size=32):
    """
    Geometric nested-dissection ordering of unknowns on a structured grid.

    ``coords`` holds integer grid coordinates, one row per unknown. The
    graph is assumed to couple only unknowns whose coordinates differ by at
    most one in every direction, so a coordinate plane is a separator.
    The box is split at the middle plane of its longest extent; both halves
    are ordered recursively and the separator goes last.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim == 1:
        coords = coords[:, None]
    parts = []

    def visit(idx):
        if len(idx) <= leaf_size:
            parts.append(idx)
            return
        c = coords[idx]
        lo = c.min(axis=0)
        hi = c.max(axis=0)
        d = int(np.argmax(hi - lo))
        if hi[d] - lo[d] < 2:
            parts.append(idx)
            return
        mid = (lo[d] + hi[d]) // 2
        visit(idx[c[:, d] < mid])
        visit(idx[c[:, d] > mid])
        parts.append(idx[c[:, d] == mid])

    visit(np.arange(len(coords)))
    return np.concatenate(parts)


def _check_structure(A):
    """Reject matrices with an empty row or column."""
    A = sp.csc_matrix(A)
    nnz_col = np.diff(A.indptr)
    empty = np.flatnonzero(nnz_col == 0)
    if empty.size:
        raise SingularMatrixError(
            "structurally singular matrix: column {} is empty".format(
                int(empty[0])), pivot=int(empty[0]))
    nnz_row = np.bincount(A.indices, minlength=A.shape[0])
    empty = np.flatnonzero(nnz_row == 0)
    if empty.size:
        raise SingularMatrixError(
            "structurally singular matrix: row {} is empty".format(
                int(empty[0])), pivot=int(empty[0]))


def _first_bad_pivot(A):
    # SuperLU does not report where it stopped; a dense QR rank probe is
    # affordable only for small matrices.
    if A.shape[0] > 2000:
        return None
    R = np.linalg.qr(A.toarray(), mode="r")
    d = np.abs(np.diag(R))
    bad = np.flatnonzero(d <= 1e-12 * max(d.max(initial=0.0), 1.0))
    return int(bad[0]) if bad.size else None


def sparse_lu_solve(A, b, rows=None, cols=None):
    """
    Solve ``A x = b`` with a sparse LU factorization.

    ``rows``/``cols`` optionally fix the elimination order (see
    :class:`SparseLU`).

    Raises
    ------
    SingularMatrixError
        if the matrix is structurally or numerically singular; the
        ``pivot`` attribute carries the offending position when known
    """
    return SparseLU(A, rows=rows, cols=cols).solve(b)


def sym_eigh(C, rtol=1e-12):
    """
    Eigendecomposition of a dense symmetric matrix, eigenvalues descending.

    Eigenvector signs are fixed so that the largest-magnitude component of
    each vector is positive, which makes the output deterministic.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
    eigenvectors : ndarray, shape (n, n)
        columns are orthonormal eigenvectors
    """
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    n, m = C.shape
    if n != m or n < 1:
        raise ValueError("expected a non-empty square matrix")
    scale = max(np.abs(C).max(), np.finfo(float).tiny)
    asym = np.abs(C - C.T).max()
    if asym > rtol * scale:
        raise AsymmetricMatrixError(
            "matrix is not symmetric (max |C - C^T| = {:.3e})".format(asym))
    lam, vec = np.linalg.eigh(0.5 * (C + C.T))
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    vec = vec[:, order]
    idx = np.argmax(np.abs(vec), axis=0)
    signs = np.sign(vec[idx, np.arange(n)])
    signs[signs == 0] = 1.0
    return lam, vec * signs


def gram(A, G=None, B=None):
    """Return ``A^T G B`` (``G`` defaults to identity, ``B`` to ``A``)."""
    B = A if B is None else B
    if G is None:
        return A.T @ B
    return A.T @ (G @ B)


def write_matrix(path, array):
    """
    Write a dense matrix (or vector, stored as one column) to a ROMXMAT1 file.

    Layout: 8-byte magic, little-endian u64 rows, u64 cols, then rows*cols
    little-endian f64 values in column-major order.
    """
    a = np.asarray(array, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("only 1-D or 2-D arrays can be stored")
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(np.asfortranarray(a).tobytes(order="F"))


def read_matrix(path):
    """Read a ROMXMAT1 file back into a 2-D float64 array."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError("{}: not a ROMXMAT1 file".format(path))
    rows, cols = struct.unpack("<QQ", data[8:24])
    payload = data[24:]
    if len(payload) != 8 * rows * cols:
        raise ValueError("{}: truncated payload".format(path))
    return np.frombuffer(payload, dtype="<f8").reshape((rows, cols), order="F").copy()


class Stopwatch:
    """
    Wall-clock timer for solver phases.

    Garbage collection is paused inside the block, as ``timeit`` does, so a
    collection cycle triggered elsewhere is not billed to a millisecond solve.
    """

    def __enter__(self):
        self._gc = gc.isenabled()
        gc.disable()
        self._t0 = time.perf_counter()
        self.elapsed = 0.0
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self._t0
        if self._gc:
            gc.enable()
        return False
