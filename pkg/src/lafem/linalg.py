"""Dense contraction, sparse COO/CSR matrices, and the solvers used by the FEM core.

Dense tensors are plain ``numpy.ndarray`` objects of dtype float64.  Sparse
matrices carry either one value vector or a stack of ``[B, nnz]`` value
planes over a single sparsity pattern, which is how batched assembly shares
symbolic structure between coefficients.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
import scipy.linalg
import scipy.sparse


class NotSymmetricError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# named-index contraction
# ---------------------------------------------------------------------------

def _parse_spec(spec, operands):
    spec = spec.replace(" ", "")
    if "->" in spec:
        lhs, out = spec.split("->")
    else:
        lhs = spec
        # implicit mode: letters appearing exactly once, alphabetical
        counts = {}
        for c in lhs.replace(",", ""):
            counts[c] = counts.get(c, 0) + 1
        out = "".join(sorted(c for c, k in counts.items() if k == 1))
    terms = lhs.split(",")
    if len(terms) != len(operands):
        raise ValueError(f"spec names {len(terms)} operands, got {len(operands)}")
    sizes = {}
    for t, op in zip(terms, operands):
        if not all(c.isalpha() for c in t):
            raise ValueError(f"invalid index letters in {t!r}")
        if len(t) != op.ndim:
            raise ValueError(f"term {t!r} has {len(t)} letters but operand has {op.ndim} axes")
        for c, n in zip(t, op.shape):
            if sizes.setdefault(c, n) != n:
                raise ValueError(f"axis {c!r} has inconsistent lengths {sizes[c]} and {n}")
    for c in out:
        if c not in sizes:
            raise ValueError(f"output letter {c!r} does not appear among the inputs")
    if len(set(out)) != len(out):
        raise ValueError("output letters must be unique")
    return terms, out, sizes


def _take_diagonals(term, arr):
    """Collapse repeated letters inside one operand to their diagonal."""
    while len(set(term)) != len(term):
        for i, c in enumerate(term):
            j = term.find(c, i + 1)
            if j >= 0:
                arr = np.diagonal(arr, axis1=i, axis2=j)  # new axis goes last
                term = term[:i] + term[i + 1:j] + term[j + 1:] + c
                break
    return term, arr


def _sum_out(term, arr, keep):
    drop = [i for i, c in enumerate(term) if c not in keep]
    if drop:
        arr = arr.sum(axis=tuple(drop))
        term = "".join(c for c in term if c in keep)
    return term, arr


def _pair(ta, a, tb, b, keep, sizes):
    batch = [c for c in ta if c in tb and c in keep]
    contr = [c for c in ta if c in tb and c not in keep]
    afree = [c for c in ta if c not in tb]
    bfree = [c for c in tb if c not in ta]

    def prod(letters):
        return int(np.prod([sizes[c] for c in letters], dtype=np.int64))

    a2 = a.transpose([ta.index(c) for c in batch + afree + contr])
    b2 = b.transpose([tb.index(c) for c in batch + contr + bfree])
    a2 = a2.reshape(prod(batch), prod(afree), prod(contr))
    b2 = b2.reshape(prod(batch), prod(contr), prod(bfree))
    if not contr:
        r = a2 * b2  # outer product per batch entry: [.., A, 1] * [.., 1, B]
    else:
        r = np.matmul(a2, b2)
    letters = batch + afree + bfree
    return "".join(letters), r.reshape([sizes[c] for c in letters])


def contract(spec: str, *operands) -> np.ndarray:
    """Sum-of-products over repeated index letters, e.g. ``"qkb,nbd->nqkd"``.

    Operands are contracted pairwise from left to right; each pairwise step is
    reduced to a batched matrix product, so the order of operands controls
    the size of the intermediates.
    """
    ops = [np.asarray(op, dtype=np.float64) for op in operands]
    terms, out, sizes = _parse_spec(spec, ops)
    prepared = []
    for t, op in zip(terms, ops):
        prepared.append(_take_diagonals(t, op))
    # letters each remaining step must keep: output letters plus anything still
    # referenced by later operands
    later = [set() for _ in prepared]
    acc = set()
    for i in range(len(prepared) - 1, -1, -1):
        later[i] = set(acc)
        acc |= set(prepared[i][0])
    t, cur = prepared[0]
    t, cur = _sum_out(t, cur, set(out) | later[0])
    for i in range(1, len(prepared)):
        tb, b = prepared[i]
        keep = set(out) | later[i]
        tb, b = _sum_out(tb, b, keep | set(t))
        t, cur = _sum_out(t, cur, keep | set(tb))
        t, cur = _pair(t, cur, tb, b, keep, sizes)
    t, cur = _sum_out(t, cur, set(out))
    return np.array(np.transpose(cur, [t.index(c) for c in out]), order="C")


# ---------------------------------------------------------------------------
# sparse matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CooMatrix:
    """Triplet matrix; duplicate ``(row, col)`` entries are summed."""

    nrows: int
    ncols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray  # [nnz] or [B, nnz]

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        vals = np.asarray(self.values, dtype=np.float64)
        vals = vals.reshape(-1) if vals.ndim <= 1 else vals.reshape(vals.shape[0], -1)
        if rows.shape != cols.shape or rows.shape[0] != vals.shape[-1]:
            raise ValueError("rows, cols and values must have matching lengths")
        if rows.size and (rows.min() < 0 or rows.max() >= self.nrows
                          or cols.min() < 0 or cols.max() >= self.ncols):
            raise ValueError("triplet index out of range")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", vals)

    @property
    def batched(self):
        return self.values.ndim == 2

    def matvec(self, x):
        """Triplet-sum product; reference path for tests."""
        x = np.asarray(x, dtype=np.float64)
        contrib = self.values * x[self.cols]
        if self.batched:
            return np.stack([np.bincount(self.rows, weights=c, minlength=self.nrows)
                             for c in contrib])
        return np.bincount(self.rows, weights=contrib, minlength=self.nrows)


@dataclass(frozen=True)
class CsrMatrix:
    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray  # [nnz] or [B, nnz]
    _scipy: list = field(default_factory=list, repr=False, compare=False)

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return int(self.col_indices.shape[0])

    @property
    def batched(self):
        return self.values.ndim == 2

    @property
    def batch_size(self):
        return self.values.shape[0] if self.batched else None

    def plane(self, b):
        """Unbatched matrix holding value plane ``b``."""
        if not self.batched:
            raise ValueError("matrix is not batched")
        return CsrMatrix(self.nrows, self.ncols, self.row_offsets,
                         self.col_indices, self.values[b])

    def planes(self):
        if not self.batched:
            return [self]
        return [self.plane(b) for b in range(self.values.shape[0])]

    def to_scipy(self):
        if self.batched:
            raise ValueError("convert individual planes of a batched matrix")
        if not self._scipy:
            self._scipy.append(scipy.sparse.csr_matrix(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape))
        return self._scipy[0]

    def toarray(self):
        if self.batched:
            return np.stack([p.toarray() for p in self.planes()])
        return self.to_scipy().toarray()

    def matvec(self, x):
        """``A @ x`` for x of shape [n] or [m, n] (rows of x are vectors)."""
        x = np.asarray(x, dtype=np.float64)
        if self.batched:
            return np.stack([p.matvec(x) for p in self.planes()])
        if x.ndim == 1:
            return self.to_scipy() @ x
        return np.ascontiguousarray((self.to_scipy() @ x.T).T)

    def __matmul__(self, x):
        return self.matvec(x)

    def diagonal(self):
        if self.batched:
            return np.stack([p.diagonal() for p in self.planes()])
        return self.to_scipy().diagonal()

    def transpose(self):
        if self.batched:
            return CsrMatrix.from_planes([p.transpose() for p in self.planes()])
        t = self.to_scipy().T.tocsr()
        t.sort_indices()
        return CsrMatrix(self.ncols, self.nrows, t.indptr.astype(np.int64),
                         t.indices.astype(np.int64), t.data.copy())

    def row_sums(self):
        if self.batched:
            return np.stack([p.row_sums() for p in self.planes()])
        return np.add.reduceat(np.append(self.values, 0.0), self.row_offsets[:-1]) * (
            np.diff(self.row_offsets) > 0)

    def submatrix(self, rows, cols):
        if self.batched:
            return CsrMatrix.from_planes([p.submatrix(rows, cols) for p in self.planes()])
        s = self.to_scipy()[rows][:, cols].tocsr()
        s.sort_indices()
        return CsrMatrix(s.shape[0], s.shape[1], s.indptr.astype(np.int64),
                         s.indices.astype(np.int64), s.data.copy())

    def asymmetry(self):
        """max |A - A^T| (over all planes)."""
        if self.batched:
            return max(p.asymmetry() for p in self.planes())
        s = self.to_scipy()
        d = abs(s - s.T)
        return float(d.max()) if d.nnz else 0.0

    @staticmethod
    def from_planes(mats):
        first = mats[0]
        for m in mats[1:]:
            if not (np.array_equal(m.row_offsets, first.row_offsets)
                    and np.array_equal(m.col_indices, first.col_indices)):
                raise ValueError("planes do not share a sparsity pattern")
        return CsrMatrix(first.nrows, first.ncols, first.row_offsets,
                         first.col_indices, np.stack([m.values for m in mats]))

    @staticmethod
    def from_dense(a, tol=0.0):
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(np.abs(a) > tol)
        return coo_to_csr(CooMatrix(a.shape[0], a.shape[1], r, c, a[r, c]))


def coo_to_csr(m: CooMatrix) -> CsrMatrix:
    """Sort triplets by (row, col) and sum duplicate runs.

    Duplicates are also ordered by value before summation so the floating
    point result does not depend on the order triplets were produced in.
    """
    vals = m.values
    planes = vals if vals.ndim == 2 else vals[None]
    keys = [planes[b] for b in range(planes.shape[0] - 1, -1, -1)] + [m.cols, m.rows]
    order = np.lexsort(keys) if m.rows.size else np.zeros(0, dtype=np.int64)
    rows = m.rows[order]
    cols = m.cols[order]
    planes = planes[:, order]
    if rows.size:
        start = np.empty(rows.size, dtype=bool)
        start[0] = True
        start[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        idx = np.flatnonzero(start)
        summed = np.add.reduceat(planes, idx, axis=1)
        rows, cols = rows[idx], cols[idx]
    else:
        summed = planes[:, :0]
    offsets = np.zeros(m.nrows + 1, dtype=np.int64)
    np.add.at(offsets, rows + 1, 1)
    offsets = np.cumsum(offsets)
    values = summed if vals.ndim == 2 else summed[0]
    return CsrMatrix(m.nrows, m.ncols, offsets, cols, np.ascontiguousarray(values))


# ---------------------------------------------------------------------------
# conjugate gradients
# ---------------------------------------------------------------------------

@dataclass
class CGInfo:
    converged: np.ndarray   # [L] bool
    iterations: np.ndarray  # [L] int
    residuals: np.ndarray   # [L] final ||A x - b|| / ||b||

    @property
    def all_converged(self):
        return bool(np.all(self.converged))


class CGNotConverged(RuntimeError):
    def __init__(self, info):
        self.info = info
        bad = np.flatnonzero(~info.converged)
        super().__init__(f"CG did not converge for columns {bad.tolist()}; "
                         f"final relative residuals {info.residuals[bad].tolist()}")


def _as_operator(A):
    if isinstance(A, CsrMatrix):
        if A.batched:
            raise ValueError("cg_solve needs a single matrix plane")
        return A.nrows, A.matvec
    if scipy.sparse.issparse(A) or isinstance(A, np.ndarray):
        return A.shape[0], (lambda x: np.ascontiguousarray((A @ x.T).T) if x.ndim == 2 else A @ x)
    if callable(A):
        raise ValueError("pass (n, matvec) for matrix-free operators")
    n, mv = A
    return n, mv


def _rowdot(A, B):
    """Row-wise dot products; same rounding for a row alone or inside a stack."""
    return (A * B).sum(axis=1)


def _cg_sweep(matvec, R, X, active, target, precond, maxit, iters):
    """Run CG on the active rows of ``X`` in place, starting from residual ``R``."""
    active = active.copy()
    Z = R * precond if precond is not None else R.copy()
    P = Z.copy()
    rz = _rowdot(R, Z)
    while True:
        active &= iters < maxit
        idx = np.flatnonzero(active)
        if not idx.size:
            return
        Ap = matvec(P[idx])
        pAp = _rowdot(P[idx], Ap)
        ok = pAp > 0
        if not ok.all():
            # breakdown: operator not positive definite on the Krylov space
            active[idx[~ok]] = False
            idx, Ap, pAp = idx[ok], Ap[ok], pAp[ok]
            if not idx.size:
                return
        alpha = rz[idx] / pAp
        X[idx] += alpha[:, None] * P[idx]
        R[idx] -= alpha[:, None] * Ap
        Zi = R[idx] * precond if precond is not None else R[idx]
        rz_new = _rowdot(R[idx], Zi)
        beta = rz_new / rz[idx]
        rz[idx] = rz_new
        P[idx] = Zi + beta[:, None] * P[idx]
        iters[idx] += 1
        rnorm = np.sqrt(_rowdot(R[idx], R[idx]))
        active[idx] = rnorm > target[idx]


def cg_solve(A, B, tol=1e-10, maxit=None, x0=None, precond=None, check_symmetry=True,
             raise_on_fail=False):
    """Conjugate gradients for several right-hand sides at once.

    Parameters
    ----------
    A : CsrMatrix, dense array, or a ``(n, matvec)`` pair
        Symmetric positive (semi)definite operator.  ``matvec`` must accept
        stacked row vectors of shape [L, n].
    B : array, shape [n] or [L, n]
        Right-hand sides stored as rows.
    tol : float
        Relative residual target ``||A x - b|| <= tol ||b||`` per column.
    precond : array [n], optional
        Jacobi scaling (inverse diagonal).

    Returns
    -------
    X, CGInfo
        Solutions with the shape of ``B`` and per-column convergence data.
    """
    if check_symmetry and isinstance(A, CsrMatrix):
        scale = np.abs(A.values).max() if A.nnz else 1.0
        if A.asymmetry() > 1e-12 * max(scale, 1.0):
            raise NotSymmetricError("cg_solve requires a symmetric matrix")
    n, matvec = _as_operator(A)
    B = np.asarray(B, dtype=np.float64)
    single = B.ndim == 1
    Bm = np.atleast_2d(B)
    if not np.all(np.isfinite(Bm)):
        raise ValueError("right-hand side contains non-finite entries")
    if maxit is None:
        maxit = 10 * n
    L = Bm.shape[0]
    X = np.zeros_like(Bm) if x0 is None else np.array(np.atleast_2d(x0), dtype=np.float64)
    bnorm = np.sqrt(_rowdot(Bm, Bm))
    target = tol * bnorm
    iters = np.zeros(L, dtype=np.int64)
    R = Bm - matvec(X) if x0 is not None else Bm.copy()
    res = np.sqrt(_rowdot(R, R))
    todo = res > target
    # restarts guard against drift between recursive and true residual
    for _ in range(4):
        if not todo.any() or iters.max() >= maxit:
            break
        _cg_sweep(matvec, R, X, todo, target, precond, maxit, iters)
        R = Bm - matvec(X)
        res = np.sqrt(_rowdot(R, R))
        todo = (res > target) & (iters < maxit)
    rel = np.where(bnorm > 0, res / np.where(bnorm > 0, bnorm, 1.0), res)
    info = CGInfo(converged=res <= target, iterations=iters, residuals=rel)
    if raise_on_fail and not info.all_converged:
        raise CGNotConverged(info)
    return (X[0] if single else X), info


# ---------------------------------------------------------------------------
# dense Cholesky and the generalized eigenproblem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray

    @property
    def n(self):
        return self.lower.shape[0]


def dense_cholesky_factor(A) -> CholeskyFactor:
    A = A.toarray() if isinstance(A, CsrMatrix) else np.asarray(A, dtype=np.float64)
    try:
        L = scipy.linalg.cholesky(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None
    if np.any(np.diag(L) <= 0):
        raise NotPositiveDefiniteError("nonpositive pivot")
    return CholeskyFactor(L)


def dense_cholesky_solve(factor: CholeskyFactor, B) -> np.ndarray:
    """Solve with a reusable factor; ``B`` holds right-hand sides as rows ([n] or [L, n])."""
    B = np.asarray(B, dtype=np.float64)
    X = scipy.linalg.cho_solve((factor.lower, True), B.T, check_finite=False)
    return np.ascontiguousarray(X.T)


@dataclass(frozen=True)
class EigenPairs:
    eigenvalues: np.ndarray   # [k] ascending
    eigenvectors: np.ndarray  # [n, k], M-orthonormal columns
    mass: np.ndarray          # [n, n]

    def orthonormality_error(self):
        F = self.eigenvectors
        return float(np.abs(F.T @ self.mass @ F - np.eye(F.shape[1])).max())


def sym_gen_eig(A, M, k, skip_null=False, null_tol=1e-10) -> EigenPairs:
    """Smallest ``k`` eigenpairs of ``A f = lam M f`` by Cholesky reduction.

    With ``M = L L^T`` the pencil reduces to the standard symmetric problem
    ``L^-1 A L^-T y = lam y`` with ``f = L^-T y``.  When ``skip_null`` is set
    the eigenvalues below ``null_tol * max|lam|`` (the constant mode of a
    closed-curve Laplacian) are dropped before taking ``k``.  Each
    eigenvector's largest-magnitude entry is made positive.
    """
    A = A.toarray() if isinstance(A, CsrMatrix) else np.asarray(A, dtype=np.float64)
    M = M.toarray() if isinstance(M, CsrMatrix) else np.asarray(M, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or M.shape != (n, n):
        raise ValueError("A and M must be square with equal size")
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range 1..{n}")
    L = dense_cholesky_factor(M).lower
    C = scipy.linalg.solve_triangular(L, A, lower=True)
    C = scipy.linalg.solve_triangular(L, C.T, lower=True)
    C = 0.5 * (C + C.T)
    lam, Y = np.linalg.eigh(C)
    F = scipy.linalg.solve_triangular(L.T, Y, lower=False)
    if skip_null:
        scale = max(np.abs(lam).max(), 1.0)
        keep = lam > null_tol * scale
        lam, F = lam[keep], F[:, keep]
    if k > lam.size:
        raise ValueError(f"only {lam.size} eigenpairs available, requested {k}")
    lam, F = lam[:k], F[:, :k]
    pivot = np.argmax(np.abs(F), axis=0)
    F = F * np.sign(F[pivot, np.arange(F.shape[1])])
    return EigenPairs(lam.copy(), np.ascontiguousarray(F), M)


# ---------------------------------------------------------------------------
# binary tensor container
# ---------------------------------------------------------------------------

_MAGIC = b"LAFT"


def save_tensor(path, array) -> None:
    """Write ``array`` as a JSON header followed by a little-endian f64 payload.

    Layout: 4-byte magic, uint64 LE header length, UTF-8 JSON header
    ``{"shape": [...], "order": "row-major", "dtype": "f64"}``, payload.
    """
    a = np.array(array, dtype="<f8", order="C")
    header = json.dumps({"shape": list(a.shape), "order": "row-major", "dtype": "f64"},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(a.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    if header.get("dtype") != "f64" or header.get("order") != "row-major":
        raise ValueError(f"{path}: unsupported header {header}")
    shape = tuple(header["shape"])
    data = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{path}: payload length does not match shape {shape}")
    return data.reshape(shape).astype(np.float64)
