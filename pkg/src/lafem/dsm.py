"""Direct sampling: data feature phi, dipole probes eta_{x,d}, index images.

Dipole load.  For ``-Delta eta = -d . grad(delta_x)`` the weak right-hand
side against a test function v is ``<-d . grad delta_x, v> = d . grad v(x)``
(integrate the distribution by parts once), so the load vector has entries
``d . grad v_r(x)`` on the DoFs of the cell containing x.  Its entries sum to
zero (partition of unity), so the pure-Neumann problem is compatible.

Probe caching.  eta is linear in d, so two solves per grid point (d = e_1,
e_2) give every probe: ``eta_{x,d} = d_1 eta_1 + d_2 eta_2``.  With the
spectral coefficients a_1, a_2 of the two traces the H^gamma seminorm is
``sqrt(d^T G d)``, ``G_ij = sum_k lam_k^{2 gamma} a_ik a_jk``.  The probes
depend on mesh and grid only, so one cache serves every data set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diff import FeatureOperator
from .eit import pixel_centers
from .fem import BoundaryChannelSet, ConstrainedSolver, LagrangeSpace, assemble_mass, \
    assemble_stiffness, boundary_weights
from .flb import SpectralBasis

GRID_N = 64
PROBE_CHUNK = 1024
GRAD_FLOOR = 1e-14


def data_feature(space: LagrangeSpace, basis: SpectralBasis, xi, gamma, solver=None):
    """phi solving the Neumann problem with data ``L^gamma xi``; one channel or [L, ndof]."""
    xi = np.asarray(xi.values if isinstance(xi, BoundaryChannelSet) else xi, dtype=np.float64)
    op = FeatureOperator(space, basis, np.atleast_2d(xi), solver=solver)
    phi = op.forward(gamma)
    return phi[0] if xi.ndim == 1 else phi


def dipole_load(space: LagrangeSpace, x, d) -> np.ndarray:
    """Load vector with entries ``d . grad v_r(x)``."""
    d = np.asarray(d, dtype=np.float64)
    if not np.linalg.norm(d) > 0:
        raise ValueError("probing direction must be nonzero")
    dofs, grads = space.basis_gradients_at_point(np.asarray(x, dtype=np.float64))
    b = np.zeros(space.ndof)
    np.add.at(b, dofs, grads @ d)
    return b


class ProbeCache:
    """Constrained factor, spectral basis and the probe traces for a grid."""

    def __init__(self, space: LagrangeSpace, basis: SpectralBasis, grid=GRID_N, solver=None):
        self.space = space
        self.basis = basis
        if solver is None:
            solver = ConstrainedSolver(assemble_stiffness(space), boundary_weights(space),
                                       method="cholesky")
        self.solver = solver
        pts = pixel_centers(grid) if np.isscalar(grid) else np.asarray(grid, dtype=np.float64)
        self.grid_n = int(grid) if np.isscalar(grid) else None
        self.points = pts
        self.dofs, self.grads = space.basis_gradients_at_points(pts)    # [P, K], [P, K, 2]
        bd = space.boundary_dofs
        self.M_b = assemble_mass(space, "boundary").submatrix(bd, bd)
        self._coeffs = None
        self.probe_solves = 0

    @property
    def factorizations(self):
        return self.solver.factorizations

    def _loads(self, idx, axis):
        b = np.zeros((len(idx), self.space.ndof))
        np.add.at(b, (np.arange(len(idx))[:, None], self.dofs[idx]), self.grads[idx, :, axis])
        return b

    def eta(self, x, d):
        """Probe function for one point and direction (fresh load, cached factor)."""
        self.probe_solves += 1
        return self.solver.solve(dipole_load(self.space, x, d), warn=False)

    def probe_coefficients(self):
        """Spectral coefficients of the e_1 and e_2 probe traces, [2, P, K0]."""
        if self._coeffs is None:
            P = self.points.shape[0]
            bd = self.space.boundary_dofs
            out = np.empty((2, P, self.basis.K0))
            for axis in range(2):
                for s in range(0, P, PROBE_CHUNK):
                    idx = np.arange(s, min(s + PROBE_CHUNK, P))
                    X = self.solver.solve(self._loads(idx, axis), warn=False)
                    self.probe_solves += len(idx)
                    out[axis, idx] = self.basis.expand(X[:, bd])
            self._coeffs = out
        return self._coeffs

    def gram(self, gamma):
        """[P, 2, 2] Gram matrices of the H^gamma seminorm over probe directions."""
        a = self.probe_coefficients() * self.basis.eigenvalues ** gamma
        return np.einsum("ipk,jpk->pij", a, a)

    def grad(self, phi):
        """grad phi at the grid points, [P, 2] (or [L, P, 2])."""
        phi = np.asarray(phi)
        return np.einsum("pkd,...pk->...pd", self.grads, phi[..., self.dofs])

    def boundary_l2(self, g):
        g = np.atleast_2d(g)
        return np.sqrt(np.einsum("li,li->l", g, self.M_b.matvec(g)))


def probe_eta(cache: ProbeCache, x, d):
    return cache.eta(x, d)


def probe_seminorm(cache: ProbeCache, x, d, gamma):
    """|trace eta_{x,d}|_{H^gamma} through a fresh probe solve."""
    eta = cache.eta(x, d)
    return float(cache.basis.seminorm(eta[cache.space.boundary_dofs], gamma))


@dataclass
class IndexImage:
    values: np.ndarray             # [n, n] (or [P] for scattered grids)
    gamma: float
    labels: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def vmax(self):
        return float(self.values.max())

    @property
    def vmin(self):
        return float(self.values.min())


def index_image(cache: ProbeCache, xi, gamma, labels=()) -> IndexImage | list:
    """Index I(x) = |grad phi|^2 / (||xi||_{L2} |eta_{x, grad phi}|_{H^gamma}) per grid point.

    ``xi`` with several rows gives one image per channel.
    """
    xi_v = np.asarray(xi.values if isinstance(xi, BoundaryChannelSet) else xi, dtype=np.float64)
    single = xi_v.ndim == 1
    xi_v = np.atleast_2d(xi_v)
    nrm = cache.boundary_l2(xi_v)
    if np.any(nrm == 0):
        raise ValueError("zero xi channel")
    labels = tuple(getattr(xi, "labels", ())) or labels or tuple(range(1, xi_v.shape[0] + 1))
    phi = data_feature(cache.space, cache.basis, xi_v, gamma, solver=cache.solver)
    G = cache.gram(gamma)
    images = []
    for l in range(xi_v.shape[0]):
        d = cache.grad(phi[l])                                # [P, 2]
        num = np.sum(d * d, axis=1)
        semi = np.sqrt(np.maximum(np.einsum("pi,pij,pj->p", d, G, d), 0.0))
        ok = (np.sqrt(num) > GRAD_FLOOR) & (semi > 0)
        val = np.zeros_like(num)
        val[ok] = num[ok] / (nrm[l] * semi[ok])
        if cache.grid_n is not None:
            val = val.reshape(cache.grid_n, cache.grid_n)
        images.append(IndexImage(val, float(gamma), (labels[l],),
                                 {"xi_l2": float(nrm[l])}))
    return images[0] if single else images


def fuse(images) -> IndexImage:
    """Max-normalize each channel image to [0, 1], then average."""
    vals = []
    for im in images:
        m = im.values.max()
        vals.append(im.values / m if m > 0 else im.values)
    labels = tuple(l for im in images for l in im.labels)
    return IndexImage(np.mean(vals, axis=0), images[0].gamma, labels,
                      {"fusion": "max-normalized mean",
                       "channel_max": [im.vmax for im in images]})


def export_image(img: IndexImage, path, fmt=None):
    """Writes CSV (raw, row-major) or 16-bit PGM (min-max scaled) plus a JSON sidecar."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    v = np.atleast_2d(img.values)
    if fmt == "csv":
        path.write_text("\n".join(",".join(repr(float(x)) for x in row) for row in v) + "\n")
    elif fmt == "pgm":
        lo, hi = float(v.min()), float(v.max())
        q = np.zeros(v.shape, dtype=">u2") if hi == lo else \
            np.round((v - lo) / (hi - lo) * 65535).astype(">u2")
        with open(path, "wb") as fh:
            fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n65535\n".encode("ascii"))
            fh.write(q.tobytes())
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    side = {"gamma": img.gamma, "channels": list(img.labels), "min": img.vmin,
            "max": img.vmax, "shape": list(v.shape), "format": fmt, **img.meta}
    path.with_name(path.name + ".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return path


def read_csv_image(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w)
