"""Fractional powers of the boundary Laplace-Beltrami operator.

The operator is represented spectrally: eigenpairs of ``A f = lam M f`` on a
(refined) P1 discretisation of the closed boundary curve, with the constant
mode dropped.  Boundary functions live on the coarse trace nodes; they are
prolonged by linear interpolation to the refined curve, and results are
restricted back by node injection (coarse nodes are a prefix of the fine
node list).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fem import LagrangeSpace, assemble_mass, assemble_stiffness
from .linalg import (CooMatrix, CsrMatrix, coo_to_csr, load_tensor, save_tensor,
                     sym_gen_eig)
from .mesh import BoundaryTrace, SimplicialMesh, uniform_refine

DEFAULT_K0 = 32
DEFAULT_REFINE = 2


def _prolongation(coarse: SimplicialMesh, times: int) -> CsrMatrix:
    """Linear interpolation from coarse curve nodes to the ``times``-refined curve."""
    n0 = coarse.number_of_nodes
    P = np.eye(n0)
    mesh = coarse
    for _ in range(times):
        mid = 0.5 * (P[mesh.cells[:, 0]] + P[mesh.cells[:, 1]])
        P = np.vstack([P, mid])
        mesh = uniform_refine(mesh, 1)
    return CsrMatrix.from_dense(P)


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    eigenvalues: np.ndarray   # [K0], ascending, > 0
    eigenvectors: np.ndarray  # [n_fine, K0], M-orthonormal
    mass: CsrMatrix           # fine boundary mass
    prolongation: CsrMatrix   # [n_fine, n_coarse]
    refine_level: int
    coarse_mesh: SimplicialMesh

    @property
    def K0(self):
        return self.eigenvalues.shape[0]

    @property
    def n_coarse(self):
        return self.prolongation.ncols

    @property
    def n_fine(self):
        return self.prolongation.nrows

    # -- transfer -----------------------------------------------------------

    def prolong(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] == self.n_fine:
            return u
        if u.shape[-1] != self.n_coarse:
            raise ValueError(f"boundary vector of length {u.shape[-1]}; expected "
                             f"{self.n_coarse} (coarse) or {self.n_fine} (fine)")
        return self.prolongation.matvec(u)

    def restrict(self, uf):
        return np.asarray(uf)[..., :self.n_coarse]

    # -- spectral calculus --------------------------------------------------

    def expand(self, u) -> np.ndarray:
        """Coefficients alpha_k = <u, psi_k>_M; u is [..., n]."""
        uf = self.prolong(u)
        Mu = self.mass.matvec(uf)
        return Mu @ self.eigenvectors

    def synthesize(self, alpha, fine=False):
        uf = np.asarray(alpha) @ self.eigenvectors.T
        return uf if fine else self.restrict(uf)

    def _powers(self, gamma, alpha):
        g = np.asarray(gamma, dtype=np.float64)
        if g.ndim == 1 and alpha.ndim == 2:
            g = g[:, None]
        return self.eigenvalues ** g

    def apply(self, u, gamma, fine=False):
        """Truncated fractional power sum_k alpha_k lam_k^gamma psi_k.

        ``gamma`` may be a scalar or one value per row of ``u``.  With
        ``gamma = 0`` this is the projection onto the retained modes.
        """
        alpha = self.expand(u)
        return self.synthesize(alpha * self._powers(gamma, alpha), fine)

    def gamma_derivative(self, u, gamma, fine=False):
        """d/dgamma of :meth:`apply`: sum_k alpha_k lam_k^gamma ln(lam_k) psi_k."""
        alpha = self.expand(u)
        return self.synthesize(alpha * self._powers(gamma, alpha) * np.log(self.eigenvalues), fine)

    def seminorm(self, u, gamma):
        """Spectral H^gamma seminorm over the retained nonzero modes."""
        alpha = self.expand(u)
        return np.sqrt(np.sum(self._powers(gamma, alpha) ** 2 * alpha ** 2, axis=-1))

    def spectrum(self, u):
        """Mode energies E_k = alpha_k^2."""
        return self.expand(u) ** 2

    def save(self, path):
        path = Path(path)
        stem = path.name
        header = {"K0": self.K0, "refine_level": self.refine_level,
                  "boundary_nodes": self.n_coarse, "fine_nodes": self.n_fine,
                  "files": {"eigenvalues": stem + ".lambda.bin",
                            "eigenvectors": stem + ".psi.bin",
                            "mass": stem + ".mass.bin",
                            "coarse_nodes": stem + ".nodes.bin"}}
        path.write_text(json.dumps(header, indent=1, sort_keys=True))
        f = header["files"]
        save_tensor(path.with_name(f["eigenvalues"]), self.eigenvalues)
        save_tensor(path.with_name(f["eigenvectors"]), self.eigenvectors)
        m = self.mass
        rows = np.repeat(np.arange(m.nrows), np.diff(m.row_offsets))
        save_tensor(path.with_name(f["mass"]), np.stack([rows, m.col_indices, m.values], axis=1))
        save_tensor(path.with_name(f["coarse_nodes"]), self.coarse_mesh.nodes)

    @classmethod
    def load(cls, path):
        path = Path(path)
        header = json.loads(path.read_text())
        f = header["files"]
        lam = load_tensor(path.with_name(f["eigenvalues"]))
        psi = load_tensor(path.with_name(f["eigenvectors"]))
        trip = load_tensor(path.with_name(f["mass"]))
        nodes = load_tensor(path.with_name(f["coarse_nodes"]))
        n = nodes.shape[0]
        coarse = SimplicialMesh(nodes, np.stack([np.arange(n), (np.arange(n) + 1) % n], 1),
                                closed=True)
        nf = header["fine_nodes"]
        mass = coo_to_csr(CooMatrix(nf, nf, trip[:, 0].astype(np.int64),
                                    trip[:, 1].astype(np.int64), trip[:, 2]))
        return cls(lam, psi, mass, _prolongation(coarse, header["refine_level"]),
                   header["refine_level"], coarse)


def build_spectral_basis(boundary, K0=DEFAULT_K0, refine_level=DEFAULT_REFINE) -> SpectralBasis:
    """Eigenbasis of the Laplace-Beltrami operator on a closed boundary curve.

    ``boundary`` is a :class:`BoundaryTrace` or a closed 1D mesh.
    """
    coarse = boundary.mesh if isinstance(boundary, BoundaryTrace) else boundary
    if not coarse.closed:
        raise ValueError("spectral basis needs a closed curve")
    fine = uniform_refine(coarse, refine_level)
    if not (1 <= K0 < fine.number_of_nodes):
        raise ValueError(f"K0={K0} must be below the fine boundary DoF count "
                         f"{fine.number_of_nodes}")
    V = LagrangeSpace(fine, 1)
    A = assemble_stiffness(V)
    M = assemble_mass(V)
    eig = sym_gen_eig(A, M, K0, skip_null=True)
    return SpectralBasis(eig.eigenvalues, eig.eigenvectors, M,
                         _prolongation(coarse, refine_level), refine_level, coarse)


def expand(basis, u):
    return basis.expand(u)


def apply_flb(basis, u, gamma):
    return basis.apply(u, gamma)


def flb_gamma_derivative(basis, u, gamma):
    return basis.gamma_derivative(u, gamma)


def h_gamma_seminorm(basis, u, gamma):
    return basis.seminorm(u, gamma)


def spectrum(basis, u):
    return basis.spectrum(u)


def smooth_field(basis, v, order=-0.75):
    """Fractional smoothing used for low-frequency noise (order -0.75 by default)."""
    return basis.apply(v, order)


def high_frequency_share(energy, split=None):
    """Fraction of the energy held by modes with index above ``split`` (default K0/2)."""
    energy = np.asarray(energy)
    split = energy.shape[-1] // 2 if split is None else split
    return energy[..., split:].sum(axis=-1) / energy.sum(axis=-1)
