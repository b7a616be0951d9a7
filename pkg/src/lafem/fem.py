"""Lagrange spaces, contraction-based assembly and mean-zero Neumann solves.

Everything that takes coefficients or data accepts an optional leading batch
axis.  Batched stiffness matrices keep one sparsity pattern with ``[B, nnz]``
value planes; batched loads are ``[B, ndof]`` arrays.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .linalg import (CooMatrix, CsrMatrix, cg_solve, coo_to_csr, contract,
                     dense_cholesky_factor, dense_cholesky_solve, CGNotConverged)
from .mesh import (BoundaryTrace, ReferenceBasis, SimplicialMesh, boundary_trace_mesh,
                   shape_gradients, simplex_quadrature)
from .parallel import thread_map

CHUNK_CELLS = 32768
DENSE_LIMIT = 6000


class DataQualityWarning(UserWarning):
    pass


class EmptySubdomainWarning(UserWarning):
    pass


class LagrangeSpace:
    """Continuous Lagrange space of order 1 or 2 on a simplicial mesh.

    The mesh may be embedded in a higher dimension (a closed curve in the
    plane); gradients are then tangential.

    Global DoFs are the mesh vertices followed (order 2) by one DoF per edge.
    For P1 on a planar mesh the boundary DoFs are listed in the
    counterclockwise order of the boundary trace, so boundary vectors line up
    with :class:`~lafem.mesh.BoundaryTrace` nodes.
    """

    def __init__(self, mesh: SimplicialMesh, p=1):
        self.mesh = mesh
        self.p = p
        self.basis = ReferenceBasis(mesh.dim, p)

    @property
    def dim(self):
        return self.mesh.dim

    @cached_property
    def cell2dof(self) -> np.ndarray:
        c2d = self.mesh.cells
        if self.p == 2:
            c2d = np.hstack([c2d, self.mesh.number_of_nodes + self.mesh.cell_to_edge])
        return np.ascontiguousarray(c2d)

    @property
    def ndof(self):
        n = self.mesh.number_of_nodes
        return n + (self.mesh.edges.shape[0] if self.p == 2 else 0)

    @cached_property
    def interpolation_points(self):
        pts = self.mesh.nodes
        if self.p == 2:
            pts = np.vstack([pts, self.mesh.nodes[self.mesh.edges].mean(axis=1)])
        return pts

    def interpolate(self, fn):
        """Nodal interpolant of ``fn(points [P, D]) -> [P]`` or ``[B, P]``."""
        return np.asarray(fn(self.interpolation_points), dtype=np.float64)

    # -- boundary -----------------------------------------------------------

    @cached_property
    def _boundary(self):
        mesh = self.mesh
        cell, local, fv = mesh.boundary_facets()
        D = self.dim
        if self.p == 1:
            f2d = fv
        else:
            pairs = {pr: i for i, pr in enumerate(itertools.combinations(range(D + 1), 2))}
            loc = np.array([[i for i in range(D + 1) if i != b] for b in range(D + 1)])
            cols = []
            for s, t in itertools.combinations(range(D), 2):
                li, lj = loc[local, s], loc[local, t]
                pid = np.array([pairs[(int(a), int(b))] for a, b in zip(li, lj)], dtype=np.int64)
                cols.append(mesh.number_of_nodes + mesh.cell_to_edge[cell, pid])
            f2d = np.hstack([fv] + [c[:, None] for c in cols]) if cols else fv
        J = mesh.barycentric_jacobians()[cell, local]          # grad of opposite coordinate
        normals = -J / np.linalg.norm(J, axis=1, keepdims=True)
        if D == 1:
            meas = np.ones(len(cell))
        else:
            meas = SimplicialMesh(mesh.nodes, fv).cell_measures()
        return dict(cell=cell, local=local, vertices=fv, facet2dof=f2d,
                    normals=normals, measures=meas)

    @property
    def facet2dof(self):
        return self._boundary["facet2dof"]

    @cached_property
    def trace(self) -> BoundaryTrace | None:
        if self.dim != 2 or self.mesh.gdim != 2:
            return None
        return boundary_trace_mesh(self.mesh)

    @cached_property
    def boundary_dofs(self) -> np.ndarray:
        if self.dim == 2 and self.p == 1:
            return self.trace.node_map
        return np.unique(self.facet2dof)

    @property
    def n_bdof(self):
        return self.boundary_dofs.shape[0]

    def facet_quadrature_points(self, quad):
        b = self._boundary
        return contract("qb,fbg->fqg", quad.points, self.mesh.nodes[b["vertices"]])

    # -- evaluation ---------------------------------------------------------

    def basis_gradients_at_point(self, x):
        """Global DoFs and gradients of the basis functions nonzero at ``x``."""
        dofs, grads = self.basis_gradients_at_points(np.atleast_2d(x))
        return dofs[0], grads[0]

    def basis_gradients_at_points(self, pts):
        """[P, K] DoFs and [P, K, D] gradients at each point (cell walk location)."""
        cell, lam = self.mesh.locate_points(pts)
        F = np.stack([self.basis.grad_lambda(l[None])[0] for l in lam])      # [P, K, D+1]
        J = self.mesh.barycentric_jacobians()[cell]
        return self.cell2dof[cell], contract("pkb,pbd->pkd", F, J)

    def value_at_points(self, u, pts):
        """Values of FE function(s) ``u`` ([ndof] or [L, ndof]) at points."""
        cell, lam = self.mesh.locate_points(pts)
        vals = self.basis.values(lam)                                    # [P, K]
        u = np.asarray(u, dtype=np.float64)
        return np.sum(vals * u[..., self.cell2dof[cell]], axis=-1)


def trace(space: LagrangeSpace, u):
    """Boundary values of ``u`` ([..., ndof]) in ``space.boundary_dofs`` order."""
    return np.asarray(u)[..., space.boundary_dofs]


def grad_at_points(space: LagrangeSpace, u, pts):
    """Gradient of the FE function(s) ``u`` at points; [P, D] or [L, P, D]."""
    dofs, grads = space.basis_gradients_at_points(pts)
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        return contract("pkd,pk->pd", grads, u[dofs])
    return np.stack([contract("pkd,pk->pd", grads, ul[dofs]) for ul in u])


@dataclass(frozen=True)
class BoundaryChannelSet:
    """Batched boundary functions, one row per channel, on ``space.boundary_dofs``."""

    space: LagrangeSpace
    values: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if v.shape[1] != self.space.n_bdof:
            raise ValueError(f"channel length {v.shape[1]} != boundary DoFs {self.space.n_bdof}")
        if not np.all(np.isfinite(v)):
            raise ValueError("boundary channels must be finite")
        object.__setattr__(self, "values", v)
        labels = tuple(self.labels) if self.labels else tuple(range(1, v.shape[0] + 1))
        if len(labels) != v.shape[0]:
            raise ValueError("one label per channel")
        object.__setattr__(self, "labels", labels)

    @property
    def L(self):
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _coef_at_quad(coef, space, quad, batched, cells=None):
    """Normalise a coefficient to [N, Q] (or [B, N, Q] when batched)."""
    N = space.mesh.number_of_cells
    Q = quad.number_of_points
    if coef is None:
        return None
    if callable(coef):
        coef = coef(space.mesh.bc_to_points(quad.points))
    c = np.asarray(coef, dtype=np.float64)
    if batched:
        if c.ndim == 1:
            c = c[:, None, None]
        elif c.ndim == 2:
            c = c[:, :, None] if c.shape[1] == N else c[:, None, :]
        return np.broadcast_to(c, (c.shape[0], N, Q))
    if c.ndim == 0:
        return np.broadcast_to(c, (N, Q))
    if c.ndim == 1:
        return np.broadcast_to(c[:, None], (N, Q))
    return np.broadcast_to(c, (N, Q))


def _scatter_matrix(space, local, rows_map=None, cols_map=None):
    """Scatter local [N, K, K] (or [B, N, K, K]) blocks via cell2dof."""
    c2d = space.cell2dof if rows_map is None else rows_map
    c2d_c = c2d if cols_map is None else cols_map
    K = c2d.shape[1]
    rows = np.broadcast_to(c2d[:, :, None], c2d.shape + (c2d_c.shape[1],))
    cols = np.broadcast_to(c2d_c[:, None, :], (c2d.shape[0], K, c2d_c.shape[1]))
    vals = local.reshape(local.shape[0], -1) if local.ndim == 4 else local.ravel()
    return coo_to_csr(CooMatrix(space.ndof, space.ndof, rows, cols, vals))


def _chunks(n):
    return [slice(s, min(s + CHUNK_CELLS, n)) for s in range(0, n, CHUNK_CELLS)]


def assemble_stiffness(space: LagrangeSpace, coef=None, batched=False, q=None) -> CsrMatrix:
    """Stiffness matrix sum_n sum_q |T_n| w_q c grad(v_k) . grad(v_j).

    ``coef`` may be a scalar, per-cell ``[N]``, per-point ``[N, Q]`` or a
    callable of physical points; with ``batched=True`` a leading batch axis
    is expected and the result has ``[B, nnz]`` value planes.
    """
    quad = simplex_quadrature(space.dim, q if q is not None else 2 * space.p)
    c = _coef_at_quad(coef, space, quad, batched)
    if c is not None and np.any(c <= 0):
        raise ValueError("diffusion coefficient must be positive")
    meas = space.mesh.cell_measures()
    F = space.basis.grad_lambda(quad.points)
    J = space.mesh.barycentric_jacobians()

    def local(sl):
        phi = contract("qkb,nbd->nqkd", F, J[sl])
        cw = contract("n,q->nq", meas[sl], quad.weights)
        if c is None:
            return contract("nq,nqkd,nqjd->nkj", cw, phi, phi)
        if batched:
            return contract("nq,bnq,nqkd,nqjd->bnkj", cw, c[:, sl], phi, phi)
        return contract("nq,nq,nqkd,nqjd->nkj", cw, c[sl], phi, phi)

    parts = thread_map(local, _chunks(space.mesh.number_of_cells))
    loc = np.concatenate(parts, axis=1 if (batched and c is not None) else 0)
    return _scatter_matrix(space, loc)


def _facet_mass_local(space, quad, coef=None):
    b = space._boundary
    fbasis = ReferenceBasis(space.dim - 1, space.p) if space.dim > 1 else None
    V = fbasis.values(quad.points) if fbasis is not None else np.ones((1, 1))
    cw = contract("f,q->fq", b["measures"], quad.weights)
    if coef is not None:
        cw = cw * coef
    return contract("fq,qk,qj->fkj", cw, V, V)


def _facet_quadrature(space, q):
    if space.dim == 1:
        return simplex_quadrature(0, 0)
    return simplex_quadrature(space.dim - 1, q if q is not None else 2 * space.p)


def assemble_mass(space: LagrangeSpace, domain="full", coef=None, q=None) -> CsrMatrix:
    """Mass matrix over the whole domain, the boundary, or a subdomain.

    A subdomain is a predicate on cell centroids (``[N, D] -> bool [N]``); a
    cell contributes entirely iff its centroid satisfies it.
    """
    if isinstance(domain, str) and domain == "boundary":
        fq = _facet_quadrature(space, q)
        loc = _facet_mass_local(space, fq)
        return _scatter_matrix(space, loc, rows_map=space.facet2dof)
    quad = simplex_quadrature(space.dim, q if q is not None else 2 * space.p)
    meas = space.mesh.cell_measures()
    if callable(domain):
        mask = np.asarray(domain(space.mesh.centroids()), dtype=bool)
        if not mask.any():
            warnings.warn("subdomain contains no cell centroids; mass matrix is zero",
                          EmptySubdomainWarning, stacklevel=2)
        meas = meas * mask
    elif domain != "full":
        raise ValueError(f"unknown integration domain {domain!r}")
    V = space.basis.values(quad.points)
    cw = contract("n,q->nq", meas, quad.weights)
    c = _coef_at_quad(coef, space, quad, False)
    if c is not None:
        cw = cw * c
    loc = contract("nq,qk,qj->nkj", cw, V, V)
    return _scatter_matrix(space, loc)


def _scatter_vector(ndof, c2d, local):
    """local [B, N, K] -> [B, ndof]."""
    idx = c2d.ravel()
    return np.stack([np.bincount(idx, weights=pl.ravel(), minlength=ndof) for pl in local])


def assemble_load(space: LagrangeSpace, source, kind="volume", batched=False, q=None):
    """Load vectors ``(f_l, v_r)`` or ``<g_l, v_r>`` on the boundary.

    ``source`` is a callable of physical points (volume: ``f(x)`` with x of
    shape [N, Q, D]; neumann: ``g(x, n)`` with outward unit normals [F, D]),
    or nodal data: [ndof] / [L, ndof] for volume and a
    :class:`BoundaryChannelSet` or [L, n_bdof] array for neumann.  Returns
    [L, ndof] for batched or channel-set input, otherwise [ndof].
    """
    if kind == "volume":
        quad = simplex_quadrature(space.dim, q if q is not None else 2 * space.p)
        V = space.basis.values(quad.points)
        if callable(source):
            f = np.asarray(source(space.mesh.bc_to_points(quad.points)), dtype=np.float64)
        else:
            nodal = np.asarray(source, dtype=np.float64)
            if nodal.shape[-1] != space.ndof:
                raise ValueError("nodal source does not match the space")
            f = contract("qk,...nk->...nq", V, nodal[..., space.cell2dof])
        cw = contract("n,q->nq", space.mesh.cell_measures(), quad.weights)
        stacked = f.ndim == 3
        if batched and not stacked:
            raise ValueError("batched source must carry a leading batch axis")
        f3 = f if stacked else f[None]
        local = contract("bnq,nq,qk->bnk", f3, cw, V)
        out = _scatter_vector(space.ndof, space.cell2dof, local)
        return out if stacked else out[0]
    if kind != "neumann":
        raise ValueError(f"unknown load kind {kind!r}")
    fq = _facet_quadrature(space, q)
    b = space._boundary
    fbasis = ReferenceBasis(space.dim - 1, space.p) if space.dim > 1 else None
    V = fbasis.values(fq.points) if fbasis is not None else np.ones((1, 1))
    cw = contract("f,q->fq", b["measures"], fq.weights)
    if callable(source):
        pts = space.facet_quadrature_points(fq) if space.dim > 1 else \
            space.mesh.nodes[b["vertices"][:, 0]][:, None, :]
        g = np.asarray(source(pts, b["normals"]), dtype=np.float64)
        stacked = g.ndim == 3
        if batched and not stacked:
            raise ValueError("batched source must carry a leading batch axis")
        g3 = g if stacked else g[None]
    else:
        data = source.values if isinstance(source, BoundaryChannelSet) else source
        if isinstance(source, BoundaryChannelSet) and source.space is not space:
            raise ValueError("channel set belongs to a different space")
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[1] != space.n_bdof:
            raise ValueError(f"boundary data has {data.shape[1]} entries, "
                             f"space has {space.n_bdof} boundary DoFs")
        full = np.zeros((data.shape[0], space.ndof))
        full[:, space.boundary_dofs] = data
        g3 = contract("qk,bfk->bfq", V, full[:, space.facet2dof])
        stacked = True
    local = contract("bfq,fq,qk->bfk", g3, cw, V)
    out = _scatter_vector(space.ndof, space.facet2dof, local)
    return out if stacked else out[0]


# ---------------------------------------------------------------------------
# mean-zero Neumann solves
# ---------------------------------------------------------------------------

def boundary_weights(space: LagrangeSpace) -> np.ndarray:
    """Row sums of the boundary mass: ``w @ u`` is the boundary integral of u."""
    return assemble_mass(space, "boundary").row_sums()


def project_compatible(loads, w, warn=True, rtol=1e-8):
    """Remove the constant-mode component of loads along ``w`` (so 1^T b = 0)."""
    b = np.atleast_2d(np.asarray(loads, dtype=np.float64))
    shift = b.sum(axis=1) / w.sum()
    corr = shift[:, None] * w[None, :]
    if warn:
        cn = np.linalg.norm(corr, axis=1)
        bn = np.linalg.norm(b, axis=1)
        bad = cn > rtol * np.maximum(bn, 1e-300)
        if np.any(bad & (bn > 0)):
            warnings.warn(f"incompatible Neumann load in channels {np.flatnonzero(bad).tolist()}: "
                          f"relative projection {float((cn / np.maximum(bn, 1e-300)).max()):.3e}",
                          DataQualityWarning, stacklevel=3)
    return b - corr


class ConstrainedSolver:
    """Solves ``K phi = b`` subject to ``w^T phi = 0`` for compatible ``b``.

    The constraint is imposed through the symmetric positive definite
    operator ``K + s w w^T``; for loads with ``1^T b = 0`` its solution is
    exactly the Lagrange-multiplier solution (the multiplier vanishes).
    ``method`` is ``"cholesky"`` (dense factor, built once), ``"cg"``, or
    ``"auto"`` (dense below ``DENSE_LIMIT`` DoFs).
    """

    def __init__(self, K: CsrMatrix, w, method="auto", tol=1e-10, maxit=None):
        if K.batched:
            raise ValueError("pass one matrix plane")
        self.K = K
        self.w = np.asarray(w, dtype=np.float64)
        n = K.nrows
        dK = K.diagonal()
        self.s = float(np.abs(dK).max() / max(np.abs(self.w).max(), 1e-300) ** 2)
        self.method = ("cholesky" if n <= DENSE_LIMIT else "cg") if method == "auto" else method
        self.tol = tol
        self.maxit = maxit
        self.factorizations = 0
        self.solves = 0
        self._factor = None
        self._precond = 1.0 / (dK + self.s * self.w ** 2)

    @property
    def n(self):
        return self.K.nrows

    def factor(self):
        if self._factor is None:
            A = self.K.toarray() + self.s * np.outer(self.w, self.w)
            self._factor = dense_cholesky_factor(A)
            self.factorizations += 1
        return self._factor

    def matvec(self, X):
        # row-wise reductions keep each column independent of the batch size
        X2 = np.atleast_2d(X)
        Y = self.K.matvec(X2) + self.s * (X2 * self.w).sum(axis=1)[:, None] * self.w
        return Y if X.ndim == 2 else Y[0]

    def solve(self, loads, project=True, warn=True):
        b = np.asarray(loads, dtype=np.float64)
        single = b.ndim == 1
        B = project_compatible(b, self.w, warn=warn) if project else np.atleast_2d(b)
        self.solves += B.shape[0]
        if self.method == "cholesky":
            X = dense_cholesky_solve(self.factor(), B)
        else:
            X, info = cg_solve((self.n, self.matvec), B, tol=self.tol, maxit=self.maxit,
                               precond=self._precond, check_symmetry=False)
            if not info.all_converged:
                raise CGNotConverged(info)
        if project:
            X = X - ((X * self.w).sum(axis=1) / self.w.sum())[:, None]
        return X[0] if single else X


def solve_neumann_meanzero(K: CsrMatrix, loads, w, method="auto", tol=1e-10):
    """Pure-Neumann solve with the boundary-mean constraint ``w^T phi = 0``.

    ``loads`` is [ndof] or [L, ndof]; incompatible loads are projected (with
    a :class:`DataQualityWarning` when the correction is not negligible).
    A batched ``K`` with B planes expects loads [B, L, ndof] (or [B, ndof]).
    """
    if K.batched:
        loads = np.asarray(loads, dtype=np.float64)
        return np.stack([ConstrainedSolver(Kb, w, method, tol).solve(loads[b])
                         for b, Kb in enumerate(K.planes())])
    return ConstrainedSolver(K, w, method, tol).solve(loads)


# ---------------------------------------------------------------------------
# background Dirichlet-to-Neumann map
# ---------------------------------------------------------------------------

class SPDSolver:
    """Dense Cholesky for small systems, Jacobi-CG otherwise."""

    def __init__(self, A: CsrMatrix, method="auto", tol=1e-12):
        self.A = A
        self.method = ("cholesky" if A.nrows <= DENSE_LIMIT else "cg") if method == "auto" else method
        self.tol = tol
        self._factor = None

    def solve(self, B):
        B = np.asarray(B, dtype=np.float64)
        if self.A.nrows == 0:
            return np.zeros_like(B)
        if self.method == "cholesky":
            if self._factor is None:
                self._factor = dense_cholesky_factor(self.A.toarray())
            return dense_cholesky_solve(self._factor, B)
        X, info = cg_solve(self.A, B, tol=self.tol, precond=1.0 / self.A.diagonal(),
                           check_symmetry=False)
        if not info.all_converged:
            raise CGNotConverged(info)
        return X


class DtNMap:
    """Background (sigma = 1) Dirichlet-to-Neumann map on the boundary DoFs.

    ``apply(g)`` extends ``g`` harmonically, forms the residual
    ``a(w, v_r)`` on boundary test functions and returns the nodal flux ``t``
    with ``M_b t = residual`` (the variationally consistent normal derivative).
    """

    def __init__(self, space: LagrangeSpace, K: CsrMatrix | None = None):
        self.space = space
        self.K = assemble_stiffness(space) if K is None else K
        bd = space.boundary_dofs
        inner = np.setdiff1d(np.arange(space.ndof), bd)
        self.inner = inner
        self.K_II = SPDSolver(self.K.submatrix(inner, inner))
        self.K_IB = self.K.submatrix(inner, bd)
        self.K_BI = self.K.submatrix(bd, inner)
        self.K_BB = self.K.submatrix(bd, bd)
        self.M_b = assemble_mass(space, "boundary").submatrix(bd, bd)
        self._mass_solver = SPDSolver(self.M_b)

    def harmonic_extension(self, g):
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        wI = -self.K_II.solve(self.K_IB.matvec(g)) if self.inner.size else np.zeros((g.shape[0], 0))
        return g, wI

    def residual(self, g):
        g, wI = self.harmonic_extension(g)
        return self.K_BB.matvec(g) + (self.K_BI.matvec(wI) if self.inner.size else 0.0)

    def apply(self, g):
        g = np.asarray(g, dtype=np.float64)
        t = self._mass_solver.solve(self.residual(g))
        return t[0] if g.ndim == 1 else t


def dtn_background(space: LagrangeSpace, g_D):
    return DtNMap(space).apply(g_D)


# ---------------------------------------------------------------------------
# error norms (manufactured-solution studies)
# ---------------------------------------------------------------------------

def l2_error(space: LagrangeSpace, u_h, exact, q=None):
    quad = simplex_quadrature(space.dim, q if q is not None else 2 * space.p + 2)
    V = space.basis.values(quad.points)
    uq = contract("qk,nk->nq", V, np.asarray(u_h)[space.cell2dof])
    ex = exact(space.mesh.bc_to_points(quad.points))
    cw = contract("n,q->nq", space.mesh.cell_measures(), quad.weights)
    return float(np.sqrt(np.sum(cw * (uq - ex) ** 2)))


def h1_seminorm_error(space: LagrangeSpace, u_h, grad_exact, q=None):
    quad = simplex_quadrature(space.dim, q if q is not None else 2 * space.p + 2)
    phi = shape_gradients(space.mesh, space.basis, quad)
    gq = contract("nqkd,nk->nqd", phi, np.asarray(u_h)[space.cell2dof])
    ex = grad_exact(space.mesh.bc_to_points(quad.points))
    cw = contract("n,q->nq", space.mesh.cell_measures(), quad.weights)
    return float(np.sqrt(np.sum(cw[..., None] * (gq - ex) ** 2)))
