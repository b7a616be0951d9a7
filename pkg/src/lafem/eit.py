"""Synthetic EIT data: circular inclusions, forward Neumann solves, noise, xi.

Data are simulated on a mesh ``refine`` times finer than the reconstruction
mesh (to avoid the inverse crime) and restricted to the reconstruction
boundary by node injection; refined meshes keep the parent node ids.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import (BoundaryChannelSet, ConstrainedSolver, DtNMap, LagrangeSpace,
                  assemble_mass, assemble_stiffness, boundary_weights)
from .flb import SpectralBasis, smooth_field
from .linalg import load_tensor, save_tensor
from .mesh import SimplicialMesh, uniform_mesh, uniform_refine
from .parallel import thread_map

DEFAULT_CHANNELS = (1, 2, 3, 4, 5, 6, 8, 16)
SIGMA_INCLUSION = 10.0
SIGMA_BACKGROUND = 1.0
BOX = ((-1.0, 1.0), (-1.0, 1.0))


def reconstruction_space(n=64) -> LagrangeSpace:
    """P1 space on the n x n triangulation of [-1, 1]^2."""
    return LagrangeSpace(uniform_mesh(2, n, box=BOX), 1)


@dataclass(frozen=True)
class InclusionSet:
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        r = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if c.shape[0] != r.shape[0]:
            raise ValueError("one radius per center")
        if np.any(r <= 0):
            raise ValueError("radii must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    def __len__(self):
        return self.radii.shape[0]

    def contains(self, pts):
        """Membership of points [..., 2] in the union of the closed discs."""
        pts = np.asarray(pts, dtype=np.float64)
        if len(self) == 0:
            return np.zeros(pts.shape[:-1], dtype=bool)
        d2 = np.sum((pts[..., None, :] - self.centers) ** 2, axis=-1)
        return np.any(d2 <= self.radii ** 2, axis=-1)

    def to_json(self):
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist()}


def sample_inclusions(N_c=3, seed=0) -> InclusionSet:
    """Centers uniform on (-0.8, 0.8)^2, radii uniform on (0.1, b_i).

    ``b_i = min(0.9 - |c_x|, 0.9 - |c_y|)`` keeps every disc inside
    [-0.9, 0.9]^2.  ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if N_c < 1:
        raise ValueError("need at least one circle")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centers = rng.uniform(-0.8, 0.8, size=(N_c, 2))
    b = np.min(0.9 - np.abs(centers), axis=1)
    assert np.all(b >= 0.1)
    radii = rng.uniform(0.1, b)
    return InclusionSet(centers, radii)


@dataclass(frozen=True, eq=False)
class ConductivityField:
    mesh: SimplicialMesh
    values: np.ndarray            # [N] per cell
    sigma1: float = SIGMA_INCLUSION
    sigma0: float = SIGMA_BACKGROUND
    inclusions: InclusionSet | None = None

    def on(self, mesh: SimplicialMesh) -> np.ndarray:
        """Per-cell values on another mesh covering the same domain."""
        if mesh is self.mesh:
            return self.values
        if self.inclusions is not None:
            inside = self.inclusions.contains(mesh.centroids())
            return np.where(inside, self.sigma1, self.sigma0)
        cell, _ = self.mesh.locate_points(mesh.centroids())
        return self.values[cell]


def conductivity_from_inclusions(mesh, incl: InclusionSet, sigma1=SIGMA_INCLUSION,
                                 sigma0=SIGMA_BACKGROUND) -> ConductivityField:
    """Centroid rule: a cell gets ``sigma1`` iff its centroid lies in a disc."""
    if sigma1 <= 0 or sigma0 <= 0:
        raise ValueError("conductivities must be positive")
    inside = incl.contains(mesh.centroids())
    return ConductivityField(mesh, np.where(inside, float(sigma1), float(sigma0)),
                             float(sigma1), float(sigma0), incl)


def _cos_currents(theta, l_list):
    return np.cos(np.outer(np.asarray(l_list, dtype=np.float64), theta))


def mean_zero(space, values, w=None):
    """Shift boundary channels so their boundary integrals vanish."""
    if w is None:
        w = boundary_weights(space)[space.boundary_dofs]
    values = np.atleast_2d(values)
    return values - (values @ w / w.sum())[:, None]


def standard_currents(space: LagrangeSpace, l_list=DEFAULT_CHANNELS) -> BoundaryChannelSet:
    """g_{N,l} = cos(l theta) at the boundary nodes, boundary-mean-zero."""
    theta = space.trace.theta
    vals = mean_zero(space, _cos_currents(theta, l_list))
    return BoundaryChannelSet(space, vals, tuple(int(l) for l in l_list))


@dataclass(frozen=True)
class CauchyData:
    space: LagrangeSpace
    labels: tuple
    g_N: np.ndarray          # [L, n_bdof]
    g_D: np.ndarray          # [L, n_bdof]
    noise: dict = field(default_factory=lambda: {"kind": "none", "delta": 0.0, "seed": None})

    @property
    def L(self):
        return self.g_N.shape[0]


def forward_eit(space: LagrangeSpace, fields, l_list=DEFAULT_CHANNELS, refine=1,
                method="auto", tol=1e-10):
    """Cauchy data for one field or a list of fields (batched assembly).

    The Neumann data ``cos(l theta)`` are evaluated on the boundary of the
    data mesh, solved with the boundary-mean constraint, and the Dirichlet
    traces restricted to ``space``'s boundary nodes.  ``g_N`` is reported on
    ``space`` as in :func:`standard_currents`.
    """
    single = isinstance(fields, ConductivityField)
    fields = [fields] if single else list(fields)
    data_space = space if refine == 0 else LagrangeSpace(uniform_refine(space.mesh, refine), 1)
    coarse_bd = space.boundary_dofs       # parent ids survive refinement
    sig = np.stack([f.on(data_space.mesh) for f in fields])
    K = assemble_stiffness(data_space, sig, batched=True)
    Mb = assemble_mass(data_space, "boundary")
    w = Mb.row_sums()
    bd = data_space.boundary_dofs
    gN_fine = mean_zero(data_space, _cos_currents(data_space.trace.theta, l_list), w[bd])
    loads = np.zeros((len(l_list), data_space.ndof))
    loads[:, bd] = Mb.submatrix(bd, bd).matvec(gN_fine)
    g_N = standard_currents(space, l_list).values

    def one(b):
        u = ConstrainedSolver(K.plane(b), w, method=method, tol=tol).solve(loads, warn=False)
        return u[:, coarse_bd]

    traces = thread_map(one, range(len(fields)))
    labels = tuple(int(l) for l in l_list)
    out = [CauchyData(space, labels, g_N.copy(), mean_zero(space, g)) for g in traces]
    return out[0] if single else out


def add_noise(data: CauchyData, delta, kind="lowfreq", seed=0, basis: SpectralBasis | None = None):
    """Perturb g_D: ``g + delta G g`` (gaussian) or ``g + delta S(G g)`` (lowfreq).

    ``S`` is the fractional smoothing of order -0.75 through ``basis``; ``G`` is
    i.i.d. standard normal per boundary node and channel.
    """
    if delta < 0:
        raise ValueError("noise level must be nonnegative")
    if kind not in ("gaussian", "lowfreq"):
        raise ValueError(f"unknown noise kind {kind!r}")
    desc = {"kind": kind, "delta": float(delta), "seed": seed}
    if delta == 0:
        return CauchyData(data.space, data.labels, data.g_N, data.g_D, desc)
    G = np.random.default_rng(seed).standard_normal(data.g_D.shape)
    pert = G * data.g_D
    if kind == "lowfreq":
        if basis is None:
            raise ValueError("lowfreq noise needs a spectral basis")
        pert = smooth_field(basis, pert)
    g_D = mean_zero(data.space, data.g_D + delta * pert)
    return CauchyData(data.space, data.labels, data.g_N, g_D, desc)


def compute_xi(data: CauchyData, dtn: DtNMap | None = None) -> BoundaryChannelSet:
    """xi_l = g_{N,l} - Lambda_1 g_{D,l}, boundary-mean-zero."""
    dtn = DtNMap(data.space) if dtn is None else dtn
    xi = data.g_N - dtn.apply(data.g_D)
    return BoundaryChannelSet(data.space, mean_zero(data.space, xi), data.labels)


def characteristic_image(incl: InclusionSet, n=64, box=BOX) -> np.ndarray:
    """n x n image of the union indicator at pixel centers; row i is the i-th y value."""
    return incl.contains(pixel_centers(n, box)).reshape(n, n).astype(np.uint8)


def pixel_centers(n=64, box=BOX) -> np.ndarray:
    """[n*n, 2] cell-center grid, x fastest."""
    (x0, x1), (y0, y1) = box
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X.ravel(), Y.ravel()], axis=1)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def generate_dataset(out_dir, n_samples, seed=0, n=64, N_c=3, l_list=DEFAULT_CHANNELS,
                     delta=0.0, kind="lowfreq", refine=1, sigma1=SIGMA_INCLUSION,
                     sigma0=SIGMA_BACKGROUND, basis=None, image_n=64):
    """Writes ``manifest.json`` and per-sample binary containers.

    Sample ``i`` draws from ``SeedSequence(seed).spawn`` stream ``i`` (one
    child for the geometry, one for the noise), so results do not depend on
    the worker count.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    space = reconstruction_space(n)
    if basis is None and delta > 0 and kind == "lowfreq":
        from .flb import build_spectral_basis
        basis = build_spectral_basis(space.trace)
    dtn = DtNMap(space)
    streams = np.random.SeedSequence(seed).spawn(n_samples)
    samples = []
    for i, ss in enumerate(streams):
        geo, noise = ss.spawn(2)
        incl = sample_inclusions(N_c, np.random.default_rng(geo))
        field_ = conductivity_from_inclusions(space.mesh, incl, sigma1, sigma0)
        data = forward_eit(space, field_, l_list, refine)
        noise_seed = int(np.random.default_rng(noise).integers(2 ** 32))
        data = add_noise(data, delta, kind, noise_seed, basis)
        xi = compute_xi(data, dtn)
        stem = f"sample_{i:05d}"
        for name, arr in (("g_N", data.g_N), ("g_D", data.g_D), ("xi", xi.values),
                          ("sigma", field_.values),
                          ("truth", characteristic_image(incl, image_n).astype(np.float64))):
            save_tensor(out / f"{stem}.{name}.bin", arr)
        samples.append({"id": stem, "inclusions": incl.to_json(), "noise_seed": noise_seed})
    manifest = {"seed": seed, "n_samples": n_samples, "mesh_n": n, "data_refine": refine,
                "N_c": N_c, "channels": list(map(int, l_list)), "delta": delta,
                "noise_kind": kind, "sigma1": sigma1, "sigma0": sigma0,
                "image_n": image_n, "samples": samples}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_sample(out_dir, i):
    out = Path(out_dir)
    stem = f"sample_{i:05d}"
    return {name: load_tensor(out / f"{stem}.{name}.bin")
            for name in ("g_N", "g_D", "xi", "sigma", "truth")}
