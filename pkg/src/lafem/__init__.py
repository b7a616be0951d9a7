"""Batched finite elements, fractional boundary operators and direct sampling for EIT."""
from .fem import (BoundaryChannelSet, ConstrainedSolver, DataQualityWarning, DtNMap,
                  EmptySubdomainWarning, LagrangeSpace, assemble_load, assemble_mass,
                  assemble_stiffness, solve_neumann_meanzero)
from .flb import SpectralBasis, apply_flb, build_spectral_basis
from .linalg import CooMatrix, CsrMatrix, cg_solve, contract, coo_to_csr
from .mesh import SimplicialMesh, uniform_mesh, uniform_refine

__version__ = "0.1.0"
