"""Simplicial meshes, quadrature and Lagrange reference bases in barycentric form."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .linalg import contract, load_tensor, save_tensor


class DegenerateCellError(ValueError):
    pass


class PointLocationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Mesh of D-simplices whose vertices live in ``nodes.shape[1]`` >= D dimensions.

    A 1D mesh embedded in the plane with ``closed=True`` represents a closed
    curve; every node then has exactly two incident cells.
    """

    nodes: np.ndarray   # [Nv, GD]
    cells: np.ndarray   # [N, D+1]
    closed: bool = False

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=np.float64))
        cells = np.ascontiguousarray(np.asarray(self.cells, dtype=np.int64))
        if nodes.ndim != 2 or cells.ndim != 2:
            raise ValueError("nodes and cells must be 2D arrays")
        if cells.shape[1] - 1 > nodes.shape[1]:
            raise ValueError("cell dimension exceeds embedding dimension")
        if cells.size and (cells.min() < 0 or cells.max() >= nodes.shape[0]):
            raise ValueError("cell vertex index out of range")
        nodes.setflags(write=False)
        cells.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "cells", cells)
        if self.closed:
            if self.dim != 1:
                raise ValueError("only 1D meshes can be closed curves")
            deg = np.bincount(cells.ravel(), minlength=nodes.shape[0])
            if not np.all(deg == 2):
                raise ValueError("closed curve: every node needs exactly two incident cells")

    @property
    def dim(self):
        return self.cells.shape[1] - 1

    @property
    def gdim(self):
        return self.nodes.shape[1]

    @property
    def number_of_nodes(self):
        return self.nodes.shape[0]

    @property
    def number_of_cells(self):
        return self.cells.shape[0]

    # -- geometry -----------------------------------------------------------

    @cached_property
    def _geometry(self):
        v = self.nodes[self.cells]                     # [N, D+1, GD]
        E = v[:, 1:, :] - v[:, :1, :]                  # [N, D, GD]
        G = contract("nag,nbg->nab", E, E)             # metric tensor
        det = np.linalg.det(G) if self.dim > 0 else np.ones(len(E))
        meas = np.sqrt(np.clip(det, 0.0, None)) / math.factorial(self.dim)
        if self.number_of_cells and np.any(meas <= 1e-14 * self._length_scale() ** self.dim):
            bad = np.flatnonzero(meas <= 1e-14 * self._length_scale() ** self.dim)
            raise DegenerateCellError(f"cells {bad[:10].tolist()} have zero measure")
        grad = np.linalg.solve(G, E)                   # rows: grad of lambda_1..lambda_D
        J = np.concatenate([-grad.sum(axis=1, keepdims=True), grad], axis=1)
        return meas, J

    def _length_scale(self):
        span = self.nodes.max(axis=0) - self.nodes.min(axis=0)
        return max(float(span.max()), 1e-300)

    def cell_measures(self) -> np.ndarray:
        return self._geometry[0]

    def barycentric_jacobians(self) -> np.ndarray:
        """``J[n, b, d] = d lambda_{nb} / d x_d``, shape [N, D+1, GD]."""
        return self._geometry[1]

    def centroids(self) -> np.ndarray:
        return self.nodes[self.cells].mean(axis=1)

    def bc_to_points(self, bary) -> np.ndarray:
        """Physical points of barycentric coordinates [Q, D+1]; returns [N, Q, GD]."""
        return contract("qb,nbg->nqg", np.asarray(bary), self.nodes[self.cells])

    # -- topology -----------------------------------------------------------

    @cached_property
    def _edges(self):
        pairs = list(itertools.combinations(range(self.dim + 1), 2))
        local = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        allp = np.sort(self.cells[:, local], axis=-1).reshape(-1, 2)
        edges, inv = np.unique(allp, axis=0, return_inverse=True)
        return edges, inv.reshape(self.number_of_cells, len(pairs))

    @property
    def edges(self):
        """Unique vertex pairs, sorted; shape [NE, 2]."""
        return self._edges[0]

    @property
    def cell_to_edge(self):
        """[N, C(D+1, 2)] global edge ids in local lexicographic pair order."""
        return self._edges[1]

    @cached_property
    def _facets(self):
        D = self.dim
        N = self.number_of_cells
        # local facet b is opposite vertex b
        loc = np.array([[i for i in range(D + 1) if i != b] for b in range(D + 1)])
        fv = self.cells[:, loc]                            # [N, D+1, D]
        key = np.sort(fv, axis=-1).reshape(N * (D + 1), D)
        uniq, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        neighbors = np.full(N * (D + 1), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        sinv = inv[order]
        same = np.flatnonzero(sinv[1:] == sinv[:-1])
        a, b = order[same], order[same + 1]
        neighbors[a] = b // (D + 1)
        neighbors[b] = a // (D + 1)
        return fv, inv.reshape(N, D + 1), cnt, neighbors.reshape(N, D + 1)

    @property
    def cell_neighbors(self):
        """[N, D+1]: neighbor across the facet opposite local vertex b, or -1."""
        return self._facets[3]

    def boundary_facets(self):
        """Facets with one incident cell.

        Returns ``(cell, local, vertices)``: owning cell, the local index of the
        opposite vertex, and facet vertices in the owning cell's local order.
        """
        fv, inv, cnt, _ = self._facets
        cell, local = np.nonzero(cnt[inv] == 1)
        return cell, local, fv[cell, local]

    def boundary_nodes(self):
        return np.unique(self.boundary_facets()[2])

    # -- point location -----------------------------------------------------

    def barycentric_of(self, cell, pts):
        """Barycentric coordinates of ``pts`` [P, GD] in cells ``cell`` [P]."""
        J = self.barycentric_jacobians()[cell]        # [P, D+1, GD]
        v0 = self.nodes[self.cells[cell, 0]]
        lam_rest = contract("pbg,pg->pb", J[:, 1:], pts - v0)
        return np.concatenate([1.0 - lam_rest.sum(axis=1, keepdims=True), lam_rest], axis=1)

    @cached_property
    def _node_tree(self):
        first_cell = np.full(self.number_of_nodes, -1, dtype=np.int64)
        flat = self.cells.ravel()
        idx = np.arange(flat.size)[::-1] // (self.dim + 1)
        first_cell[flat[::-1]] = idx   # lowest cell index touching each node
        return cKDTree(self.nodes), first_cell

    @cached_property
    def _node_cells(self):
        flat = self.cells.ravel()
        order = np.argsort(flat, kind="stable")
        offsets = np.searchsorted(flat[order], np.arange(self.number_of_nodes + 1))
        return order // (self.dim + 1), offsets

    def locate_points(self, pts, tol=1e-12):
        """Containing cell and barycentric coordinates of each point.

        The search walks from the cell touching the nearest vertex across the
        facet with the most negative coordinate.  Points on shared facets or
        vertices are assigned to the lowest-index cell containing them.
        """
        if self.dim != self.gdim:
            raise ValueError("point location needs a full-dimensional mesh")
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        tree, first_cell = self._node_tree
        _, near = tree.query(pts)
        cell = first_cell[near].copy()
        nbr = self.cell_neighbors
        active = np.ones(len(pts), dtype=bool)
        for _ in range(4 * self.number_of_cells + 10):
            idx = np.flatnonzero(active)
            if not idx.size:
                break
            lam = self.barycentric_of(cell[idx], pts[idx])
            worst = np.argmin(lam, axis=1)
            inside = lam[np.arange(len(idx)), worst] >= -tol
            active[idx[inside]] = False
            mv = idx[~inside]
            nxt = nbr[cell[mv], worst[~inside]]
            if np.any(nxt < 0):
                bad = mv[nxt < 0]
                raise PointLocationError(f"points outside the domain: {pts[bad][:5].tolist()}")
            cell[mv] = nxt
        if active.any():
            raise PointLocationError("cell walk did not terminate")
        lam = self.barycentric_of(cell, pts)
        # deterministic tie-break for points on cell boundaries
        edge = np.flatnonzero(lam.min(axis=1) <= tol)
        if edge.size:
            cells_of, off = self._node_cells
            for p in edge:
                cands = np.unique(np.concatenate(
                    [cells_of[off[v]:off[v + 1]] for v in self.cells[cell[p]]]))
                for c in cands:
                    if c >= cell[p]:
                        break
                    l = self.barycentric_of(np.array([c]), pts[p:p + 1])[0]
                    if l.min() >= -tol:
                        cell[p] = c
                        lam[p] = l
                        break
        return cell, lam

    # -- serialisation ------------------------------------------------------

    def save(self, path):
        """Write ``path`` (JSON header) plus ``.nodes.bin`` / ``.cells.bin`` siblings."""
        path = Path(path)
        header = {"dim": self.dim, "gdim": self.gdim, "closed": self.closed,
                  "counts": {"nodes": self.number_of_nodes, "cells": self.number_of_cells},
                  "order": "row-major",
                  "nodes": path.name + ".nodes.bin", "cells": path.name + ".cells.bin"}
        path.write_text(json.dumps(header, indent=1, sort_keys=True))
        save_tensor(path.with_name(header["nodes"]), self.nodes)
        save_tensor(path.with_name(header["cells"]), self.cells.astype(np.float64))

    @classmethod
    def load(cls, path):
        path = Path(path)
        header = json.loads(path.read_text())
        nodes = load_tensor(path.with_name(header["nodes"]))
        cells = load_tensor(path.with_name(header["cells"])).astype(np.int64)
        return cls(nodes, cells, closed=header.get("closed", False))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def uniform_mesh(dim, n, box=None) -> SimplicialMesh:
    """Structured simplicial mesh of a box with ``n`` divisions per axis.

    D=2 splits each square along its (+1,+1) diagonal; D=3 splits each cube
    into the six tetrahedra sharing its main diagonal.
    """
    if n < 1:
        raise ValueError("need at least one division per axis")
    if box is None:
        box = [(0.0, 1.0)] * dim
    box = np.asarray(box, dtype=np.float64).reshape(dim, 2)
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValueError(f"degenerate bounding box {box.tolist()}")
    axes = [np.linspace(lo, hi, n + 1) for lo, hi in box]
    grid = np.meshgrid(*axes, indexing="ij")
    # node id: x fastest
    nodes = np.stack([g.transpose(tuple(range(dim))[::-1]).ravel() for g in grid], axis=1)

    def nid(*ijk):
        out = np.zeros_like(ijk[0])
        for d in range(dim - 1, -1, -1):
            out = out * (n + 1) + ijk[d]
        return out

    idx = np.meshgrid(*[np.arange(n)] * dim, indexing="ij")
    idx = [a.transpose(tuple(range(dim))[::-1]).ravel() for a in idx]
    if dim == 1:
        cells = np.stack([idx[0], idx[0] + 1], axis=1)
    elif dim == 2:
        i, j = idx
        a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
        cells = np.stack([np.stack([a, b, c], 1), np.stack([a, c, d], 1)], axis=1).reshape(-1, 3)
    elif dim == 3:
        tets = []
        for perm in itertools.permutations(range(3)):
            off = np.zeros(3, dtype=np.int64)
            verts = [nid(*idx)]
            for ax in perm:
                off[ax] += 1
                verts.append(nid(*(idx[k] + off[k] for k in range(3))))
            t = np.stack(verts, axis=1)
            if _perm_parity(perm):
                t = t[:, [0, 2, 1, 3]]
            tets.append(t)
        cells = np.stack(tets, axis=1).reshape(-1, 4)
    else:
        raise ValueError("dim must be 1, 2 or 3")
    return SimplicialMesh(nodes, cells)


def _perm_parity(perm):
    p = list(perm)
    odd = False
    for i in range(len(p)):
        for j in range(i + 1, len(p)):
            odd ^= p[i] > p[j]
    return odd


def uniform_refine(mesh: SimplicialMesh, times=1) -> SimplicialMesh:
    """Bisect segments / split triangles into four; parent nodes keep their ids."""
    if times < 0:
        raise ValueError("times must be nonnegative")
    for _ in range(times):
        D = mesh.dim
        Nv = mesh.number_of_nodes
        if D == 1:
            mid = Nv + np.arange(mesh.number_of_cells)
            c = mesh.cells
            nodes = np.vstack([mesh.nodes, mesh.nodes[c].mean(axis=1)])
            cells = np.stack([np.stack([c[:, 0], mid], 1), np.stack([mid, c[:, 1]], 1)],
                             axis=1).reshape(-1, 2)
        elif D == 2:
            e = mesh.edges
            nodes = np.vstack([mesh.nodes, mesh.nodes[e].mean(axis=1)])
            m = Nv + mesh.cell_to_edge        # local pairs (0,1), (0,2), (1,2)
            v = mesh.cells
            m01, m02, m12 = m[:, 0], m[:, 1], m[:, 2]
            cells = np.stack([
                np.stack([v[:, 0], m01, m02], 1),
                np.stack([m01, v[:, 1], m12], 1),
                np.stack([m02, m12, v[:, 2]], 1),
                np.stack([m01, m12, m02], 1)], axis=1).reshape(-1, 3)
        else:
            raise NotImplementedError("uniform refinement is implemented for D=1 and D=2")
        mesh = SimplicialMesh(nodes, cells, closed=mesh.closed)
    return mesh


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    """Closed boundary curve of a 2D mesh, counterclockwise."""

    mesh: SimplicialMesh     # closed 1D mesh, nodes in 2D
    node_map: np.ndarray     # trace node -> parent node
    arclength: np.ndarray    # cumulative length at each node, starting at 0
    theta: np.ndarray        # polar angle atan2(y, x)

    @property
    def perimeter(self):
        return float(self.mesh.cell_measures().sum())

    @property
    def number_of_nodes(self):
        return self.mesh.number_of_nodes


def boundary_trace_mesh(mesh2d: SimplicialMesh) -> BoundaryTrace:
    if mesh2d.dim != 2 or mesh2d.gdim != 2:
        raise ValueError("boundary trace needs a planar triangle mesh")
    _, _, fv = mesh2d.boundary_facets()
    nb = np.unique(fv)
    adj = {int(v): [] for v in nb}
    for a, b in fv:
        adj[int(a)].append(int(b))
        adj[int(b)].append(int(a))
    if any(len(v) != 2 for v in adj.values()):
        raise ValueError("boundary is not a simple closed polygon")
    xy = mesh2d.nodes
    start = int(nb[np.lexsort((xy[nb, 0], xy[nb, 0] + xy[nb, 1]))[0]])
    loop = [start]
    prev, cur = start, adj[start][0]
    while cur != start:
        loop.append(cur)
        nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
        prev, cur = cur, nxt
    if len(loop) != len(nb):
        raise ValueError("boundary has more than one component (multiply-connected domain)")
    loop = np.array(loop, dtype=np.int64)
    p = xy[loop]
    area = 0.5 * np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
    if area < 0:
        loop = np.concatenate([loop[:1], loop[1:][::-1]])
        p = xy[loop]
    m = len(loop)
    cells = np.stack([np.arange(m), (np.arange(m) + 1) % m], axis=1)
    seg = np.linalg.norm(p[cells[:, 1]] - p[cells[:, 0]], axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    return BoundaryTrace(SimplicialMesh(p, cells, closed=True), loop, s,
                         np.arctan2(p[:, 1], p[:, 0]))


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Points in barycentric coordinates; weights sum to one."""

    points: np.ndarray   # [Q, D+1]
    weights: np.ndarray  # [Q]
    degree: int

    @property
    def number_of_points(self):
        return self.weights.shape[0]


def _sym_rule(dim, orbits):
    pts, wts = [], []
    for bary, w in orbits:
        for p in sorted(set(itertools.permutations(bary))):
            pts.append(p)
            wts.append(w)
    return np.array(pts, dtype=np.float64), np.array(wts, dtype=np.float64)


_TABLES = {
    (2, 1): [((1 / 3, 1 / 3, 1 / 3), 1.0)],
    (2, 2): [((2 / 3, 1 / 6, 1 / 6), 1 / 3)],
    (2, 4): [((0.108103018168070, 0.445948490915965, 0.445948490915965), 0.223381589678011),
             ((0.816847572980459, 0.091576213509771, 0.091576213509771), 0.109951743655322)],
    (3, 1): [((0.25, 0.25, 0.25, 0.25), 1.0)],
    (3, 2): [((0.5854101966249685, 0.1381966011250105, 0.1381966011250105,
               0.1381966011250105), 0.25)],
}


def _collapsed_rule(dim, degree):
    """Conical-product Gauss rule mapped from the cube; positive weights."""
    n = max(1, math.ceil((degree + dim) / 2))
    g, w = np.polynomial.legendre.leggauss(n)
    g, w = 0.5 * (g + 1.0), 0.5 * w
    grids = np.meshgrid(*[g] * dim, indexing="ij")
    wgrid = np.meshgrid(*[w] * dim, indexing="ij")
    u = [a.ravel() for a in grids]
    wt = np.prod([a.ravel() for a in wgrid], axis=0)
    x = np.zeros((u[0].size, dim))
    scale = np.ones(u[0].size)
    for d in range(dim):
        x[:, d] = u[d] * scale
        if d < dim - 1:
            wt = wt * (1.0 - u[d]) ** (dim - 1 - d)
        scale = scale * (1.0 - u[d])
    bary = np.concatenate([1.0 - x.sum(axis=1, keepdims=True), x], axis=1)
    return np.clip(bary, 0.0, 1.0), wt / wt.sum()


def simplex_quadrature(dim, degree) -> QuadratureRule:
    """Rule on the reference ``dim``-simplex exact for polynomials of total degree ``degree``."""
    degree = max(int(degree), 0)
    if dim == 0:
        return QuadratureRule(np.ones((1, 1)), np.ones(1), degree)
    if dim == 1:
        n = max(1, math.ceil((degree + 1) / 2))
        g, w = np.polynomial.legendre.leggauss(n)
        t = 0.5 * (g + 1.0)
        return QuadratureRule(np.stack([1.0 - t, t], axis=1), 0.5 * w, degree)
    for d in range(max(degree, 1), degree + 3):
        if (dim, d) in _TABLES:
            p, w = _sym_rule(dim, _TABLES[(dim, d)])
            return QuadratureRule(p, w / w.sum(), degree)
    p, w = _collapsed_rule(dim, degree)
    return QuadratureRule(p, w, degree)


# ---------------------------------------------------------------------------
# reference Lagrange basis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceBasis:
    """Lagrange shape functions f_k(lambda) of order p on a D-simplex.

    Local ordering: the D+1 vertex functions, then (p=2) one function per
    edge in lexicographic vertex-pair order.
    """

    dim: int
    order: int
    multi_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("supported orders are 1 and 2")
        if self.dim == 3 and self.order != 1:
            raise ValueError("only P1 is supported in 3D")
        D, p = self.dim, self.order
        idx = [p * np.eye(D + 1, dtype=np.int64)[b] for b in range(D + 1)]
        if p == 2:
            for i, j in itertools.combinations(range(D + 1), 2):
                a = np.zeros(D + 1, dtype=np.int64)
                a[i] = a[j] = 1
                idx.append(a)
        object.__setattr__(self, "multi_index", np.array(idx))

    @property
    def ndof(self):
        return self.multi_index.shape[0]

    def lagrange_nodes(self):
        """Barycentric coordinates of the interpolation nodes, [K, D+1]."""
        return self.multi_index / self.order

    def _factors(self, bary):
        # factor[q, b, j] = (p lambda_b - j) / (j + 1), j < p
        p = self.order
        j = np.arange(p)
        lam = np.asarray(bary, dtype=np.float64)[..., None]
        return (p * lam - j) / (j + 1.0)

    def values(self, bary) -> np.ndarray:
        """f_k at barycentric points [Q, D+1]; returns [Q, K]."""
        bary = np.atleast_2d(bary)
        fac = self._factors(bary)                          # [Q, D+1, p]
        cum = np.concatenate([np.ones(fac.shape[:2] + (1,)), np.cumprod(fac, axis=-1)], -1)
        out = np.ones((bary.shape[0], self.ndof))
        for k, a in enumerate(self.multi_index):
            out[:, k] = np.prod(cum[:, np.arange(self.dim + 1), a], axis=1)
        return out

    def grad_lambda(self, bary) -> np.ndarray:
        """df_k / dlambda_b at barycentric points; returns [Q, K, D+1]."""
        bary = np.atleast_2d(bary)
        p = self.order
        fac = self._factors(bary)
        Q, B = bary.shape
        cum = np.concatenate([np.ones((Q, B, 1)), np.cumprod(fac, axis=-1)], -1)
        # derivative of prod_{j<a} fac_j with respect to lambda: sum over j of p/(j+1) * prod_{i != j}
        dcum = np.zeros((Q, B, p + 1))
        for a in range(1, p + 1):
            s = np.zeros((Q, B))
            for j in range(a):
                others = np.ones((Q, B))
                for i in range(a):
                    if i != j:
                        others = others * fac[:, :, i]
                s += p / (j + 1.0) * others
            dcum[:, :, a] = s
        out = np.zeros((Q, self.ndof, B))
        cols = np.arange(B)
        for k, a in enumerate(self.multi_index):
            vals = cum[:, cols, a]                        # [Q, B]
            ders = dcum[:, cols, a]
            for b in range(B):
                others = np.prod(np.delete(vals, b, axis=1), axis=1)
                out[:, k, b] = ders[:, b] * others
        return out


def shape_gradients(mesh: SimplicialMesh, basis: ReferenceBasis, quad: QuadratureRule):
    """Physical gradients Phi[n, q, k, d] = sum_b F[q, k, b] J[n, b, d]."""
    F = basis.grad_lambda(quad.points)
    return contract("qkb,nbd->nqkd", F, mesh.barycentric_jacobians())
