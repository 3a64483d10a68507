"""Symmetric positive-definite linear algebra.

Sparse operators are stored in CSR form with both triangles present and are
solved by Jacobi-preconditioned conjugate gradients; the small dense patch
systems use an LDL^T factorization with pivot diagnostics.  Dual norms of
residual vectors are evaluated through a Gram solve.
"""

import numpy as np

__all__ = [
    "DegenerateSystemError",
    "LinearSolveError",
    "SparseSpd",
    "cg_solve",
    "dense_solve",
    "dual_norm",
    "from_coo",
]


class LinearSolveError(Exception):
    """Iterative solver failed to reach the requested tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class DegenerateSystemError(Exception):
    """Dense factorization hit a non-positive or negligible pivot."""


class SparseSpd:
    """Sparse symmetric operator in CSR storage (both triangles stored).

    Attributes
    ----------
    n : int
        Dimension.
    indptr, indices, data : ndarray
        Standard CSR arrays.
    """

    def __init__(self, n, indptr, indices, data):
        self.n = n
        self.indptr = indptr
        self.indices = indices
        self.data = data
        self._rows = np.repeat(np.arange(n, dtype=np.int64),
                               np.diff(indptr))
        self._diag = None

    def matvec(self, x):
        return np.bincount(self._rows, weights=self.data * x[self.indices],
                           minlength=self.n)

    __matmul__ = matvec

    def diagonal(self):
        if self._diag is None:
            diag = np.zeros(self.n)
            hit = self.indices == self._rows
            diag[self._rows[hit]] = self.data[hit]
            self._diag = diag
        return self._diag

    def todense(self):
        out = np.zeros((self.n, self.n))
        for i in range(self.n):
            row = slice(self.indptr[i], self.indptr[i + 1])
            out[i, self.indices[row]] = self.data[row]
        return out

    def max_asymmetry(self):
        """max |A_ij - A_ji|, for symmetry audits (0.0 when assembled
        from symmetric element matrices)."""
        transposed = from_coo(self.n, self.indices, self._rows, self.data)
        same_pattern = (transposed.indptr.shape == self.indptr.shape
                        and np.array_equal(transposed.indptr, self.indptr)
                        and np.array_equal(transposed.indices, self.indices))
        if same_pattern:
            return float(np.abs(transposed.data - self.data).max(initial=0.0))
        return float(np.abs(self.todense() - transposed.todense()).max())

    def add_scaled(self, other, factor):
        """Return self + factor * other (identical sparsity not required)."""
        return from_coo(
            self.n,
            np.concatenate([self._rows, other._rows]),
            np.concatenate([self.indices, other.indices]),
            np.concatenate([self.data, factor * other.data]),
        )


def from_coo(n, rows, cols, vals):
    """Assemble a :class:`SparseSpd` from COO triplets, summing duplicates."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if rows.size:
        new = np.empty(rows.size, dtype=bool)
        new[0] = True
        new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.nonzero(new)[0]
        vals = np.add.reduceat(vals, starts)
        rows = rows[starts]
        cols = cols[starts]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    return SparseSpd(n, indptr, cols, vals)


def cg_solve(A, b, rel_tol=1e-10, max_iter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Parameters
    ----------
    A : SparseSpd
    b : ndarray
    rel_tol : float
        Convergence when ||b - A x|| <= rel_tol * ||b||.
    max_iter : int, optional
        Defaults to 10 * dimension.
    x0 : ndarray, optional
        Warm start.

    Raises
    ------
    LinearSolveError
        On non-convergence, with the achieved relative residual attached.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side contains non-finite entries")
    n = A.n
    if max_iter is None:
        max_iter = 10 * n
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros(n)
    inv_diag = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A.matvec(x)
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    tol = rel_tol * norm_b
    for _ in range(max_iter):
        res = np.linalg.norm(r)
        if res <= tol:
            # recurrence may have drifted; accept only a true residual
            r = b - A.matvec(x)
            res = np.linalg.norm(r)
            if res <= tol:
                return x
            z = inv_diag * r
            p = z.copy()
            rz = r @ z
        Ap = A.matvec(p)
        pAp = p @ Ap
        if pAp <= 0.0:
            raise LinearSolveError(
                "matrix is not positive definite along search direction",
                achieved=res / norm_b)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - A.matvec(x))
    if res <= tol:
        return x
    raise LinearSolveError(
        f"no convergence within {max_iter} iterations "
        f"(achieved relative residual {res / norm_b:.3e})",
        achieved=res / norm_b)


def dense_solve(A, b, pivot_tol=1e-12):
    """Solve a small symmetric positive-definite system by LDL^T.

    Raises
    ------
    DegenerateSystemError
        When a pivot is non-positive or below ``pivot_tol`` times the
        largest diagonal magnitude (singular or indefinite to tolerance,
        which signals a degenerate patch system).
    """
    A = np.array(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m = A.shape[0]
    scale = np.abs(np.diag(A)).max() if m else 0.0
    if scale == 0.0:
        raise DegenerateSystemError("zero matrix")
    L = np.eye(m)
    d = np.zeros(m)
    for k in range(m):
        d[k] = A[k, k] - (L[k, :k] ** 2) @ d[:k]
        if not d[k] > pivot_tol * scale:
            raise DegenerateSystemError(
                f"pivot {k} = {d[k]:.3e} (scale {scale:.3e})")
        for i in range(k + 1, m):
            L[i, k] = (A[i, k] - (L[i, :k] * L[k, :k]) @ d[:k]) / d[k]
    y = np.zeros(m)
    for i in range(m):
        y[i] = b[i] - L[i, :i] @ y[:i]
    y /= d
    x = np.zeros(m)
    for i in range(m - 1, -1, -1):
        x[i] = y[i] - L[i + 1:, i] @ x[i + 1:]
    return x


def dual_norm(r, M, x0=None, return_solution=False):
    """Norm of a residual vector in the dual of the norm induced by the
    Gram matrix M: sqrt(r^T M^{-1} r).

    The Gram solve runs at relative tolerance 1e-12 and accepts a warm
    start, which the fixed-space iteration reuses across evaluations.
    """
    r = np.asarray(r, dtype=float)
    if not np.any(r):
        return (0.0, np.zeros(M.n)) if return_solution else 0.0
    w = cg_solve(M, r, rel_tol=1e-12, x0=x0)
    value = float(np.sqrt(max(r @ w, 0.0)))
    if return_solution:
        return value, w
    return value
