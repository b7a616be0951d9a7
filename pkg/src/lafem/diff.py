"""Differentiable feature operator Gamma -> Phi and gamma recovery.

Gradient derivation
-------------------
For channel l the feature is ``phi_l = S b_l(gamma_l)`` where ``S`` is the
mean-zero constrained Neumann solve (a symmetric linear map on compatible
loads, independent of gamma) and ``b_l`` is the boundary load of the
compatibility-projected Neumann datum ``L^{gamma_l} xi_l``.  For

    loss = r^T M_d r,   r = sum_l phi_l - phi_D,

the chain rule gives ``d loss / d gamma_l = 2 r^T M_d S db_l``.  Since ``S``
is symmetric, one adjoint solve ``p = S (2 M_d r)`` serves every channel:
``d loss / d gamma_l = p^T db_l``, and ``db_l`` is the boundary load of
``sum_k alpha_k lam_k^gamma ln(lam_k) psi_k``.  With a single shared gamma the
channel components are summed.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .fem import (BoundaryChannelSet, ConstrainedSolver, LagrangeSpace, assemble_mass,
                  assemble_stiffness, boundary_weights, project_compatible)
from .flb import SpectralBasis


class DivergenceError(RuntimeError):
    def __init__(self, msg, trajectory):
        super().__init__(msg)
        self.trajectory = trajectory


class FeatureOperator:
    """Maps fractional orders to data features by batched Neumann solves.

    ``xi`` is either one boundary function shared by all channels (the
    number of channels then follows ``len(gamma)``) or one row per channel.
    """

    def __init__(self, space: LagrangeSpace, basis: SpectralBasis, xi, solver=None,
                 method="auto"):
        self.space = space
        self.basis = basis
        if isinstance(xi, BoundaryChannelSet):
            xi = xi.values
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape[-1] != space.n_bdof:
            raise ValueError("xi does not live on the boundary DoFs of the space")
        if not np.all(np.isfinite(xi)):
            raise ValueError("xi must be finite")
        self.shared = xi.ndim == 1
        self.xi = xi
        if solver is None:
            K = assemble_stiffness(space)
            solver = ConstrainedSolver(K, boundary_weights(space), method=method)
        self.solver = solver
        bd = space.boundary_dofs
        self.M_b = assemble_mass(space, "boundary").submatrix(bd, bd)

    @property
    def K(self):
        return self.solver.K

    def channels(self, gamma):
        g = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
        if not np.all(np.isfinite(g)):
            raise ValueError("gamma must be finite")
        if self.shared:
            return np.broadcast_to(self.xi, (g.size, self.xi.size)), g
        L = self.xi.shape[0]
        if g.size not in (1, L):
            raise ValueError(f"gamma has {g.size} entries for {L} channels")
        return self.xi, np.broadcast_to(g, (L,))

    def boundary_load(self, g):
        """Full-length load vectors for nodal boundary data ``g`` [L, n_bdof], projected."""
        g = np.atleast_2d(g)
        out = np.zeros((g.shape[0], self.space.ndof))
        out[:, self.space.boundary_dofs] = self.M_b.matvec(g)
        return project_compatible(out, self.solver.w, warn=False)

    def neumann_data(self, gamma):
        xi, g = self.channels(gamma)
        return self.basis.apply(xi, g)

    def forward(self, gamma) -> np.ndarray:
        """Features Phi, one row per channel: [L, ndof]."""
        loads = self.boundary_load(self.neumann_data(gamma))
        return self.solver.solve(loads, project=True, warn=False)

    def load_derivative(self, gamma):
        xi, g = self.channels(gamma)
        return self.boundary_load(self.basis.gamma_derivative(xi, g))


# one boundary harmonic per symmetry class of the square (E, B1, B2, A1, A2)
SYMMETRY_HARMONICS = (("cos", 1), ("cos", 2), ("sin", 2), ("cos", 4), ("sin", 4),
                      ("cos", 3), ("sin", 3), ("cos", 5), ("sin", 5), ("cos", 6))


def symmetry_channels(space: LagrangeSpace, L: int) -> np.ndarray:
    """Per-channel data xi_l for multi-gamma recovery, boundary-mean-zero [L, n_bdof].

    A single shared xi makes the loss invariant under permuting Gamma, so the
    channels cannot be told apart.  The first five harmonics lie in distinct
    symmetry classes of the square; on a symmetric subdomain their features
    are (nearly) orthogonal and the fit decouples channel by channel.
    """
    if not 1 <= L <= len(SYMMETRY_HARMONICS):
        raise ValueError(f"at most {len(SYMMETRY_HARMONICS)} symmetry channels")
    theta = space.trace.theta
    xi = np.stack([getattr(np, f)(l * theta) for f, l in SYMMETRY_HARMONICS[:L]])
    w = boundary_weights(space)[space.boundary_dofs]
    return xi - (xi @ w / w.sum())[:, None]


def forward(op: FeatureOperator, gamma):
    return op.forward(gamma)


@dataclass
class RecoveryConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iter: int = 500
    tol: float = 1e-12
    patience: int = 50


@dataclass
class GammaRecoveryProblem:
    op: FeatureOperator
    phi_D: np.ndarray
    M_d: object
    config: RecoveryConfig = field(default_factory=RecoveryConfig)
    gamma_true: np.ndarray | None = None

    def __post_init__(self):
        if self.M_d.shape != (self.op.space.ndof, self.op.space.ndof):
            raise ValueError("subdomain mass does not match the feature space")
        if np.asarray(self.phi_D).shape != (self.op.space.ndof,):
            raise ValueError("target must be one FE function on the space")

    def loss(self, gamma):
        r = self.op.forward(gamma).sum(axis=0) - self.phi_D
        return float(r @ self.M_d.matvec(r))

    def loss_and_grad(self, gamma):
        gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
        phi = self.op.forward(gamma)
        r = phi.sum(axis=0) - self.phi_D
        Mr = self.M_d.matvec(r)
        loss = float(r @ Mr)
        p = self.op.solver.solve(2.0 * Mr, project=True, warn=False)
        per_channel = self.op.load_derivative(gamma) @ p
        if gamma.size == 1 and per_channel.size > 1:
            return loss, np.array([per_channel.sum()])
        return loss, per_channel


def loss_and_grad(problem: GammaRecoveryProblem, gamma):
    return problem.loss_and_grad(gamma)


def box_subdomain(lo=-0.5, hi=0.5):
    def inside(x):
        return np.all((x >= lo) & (x <= hi), axis=-1)
    return inside


def make_recovery_problem(op: FeatureOperator, gamma_true, subdomain=None, noise=0.0,
                          seed=0, config=None) -> GammaRecoveryProblem:
    """Self-generated target ``phi_D = sum_l phi_l(gamma_true)``.

    ``noise`` applies pointwise multiplicative Gaussian noise
    ``phi_D (1 + noise G)`` with a seeded generator.
    """
    gamma_true = np.atleast_1d(np.asarray(gamma_true, dtype=np.float64))
    subdomain = box_subdomain() if subdomain is None else subdomain
    M_d = assemble_mass(op.space, subdomain)
    phi_D = op.forward(gamma_true).sum(axis=0)
    if noise:
        G = np.random.default_rng(seed).standard_normal(phi_D.shape)
        phi_D = phi_D * (1.0 + noise * G)
    return GammaRecoveryProblem(op, phi_D, M_d, config or RecoveryConfig(), gamma_true)


@dataclass
class Trajectory:
    iterations: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    elapsed: float = 0.0

    def append(self, it, gamma, loss, gnorm):
        self.iterations.append(it)
        self.gammas.append(np.array(gamma, dtype=np.float64))
        self.losses.append(float(loss))
        self.grad_norms.append(float(gnorm))

    @property
    def final_gamma(self):
        return self.gammas[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        L = self.gammas[0].size if self.gammas else 0
        w.writerow(["iter"] + [f"gamma_{i}" for i in range(L)] + ["loss"])
        for it, g, loss in zip(self.iterations, self.gammas, self.losses):
            w.writerow([it] + [repr(float(x)) for x in g] + [repr(loss)])
        return buf.getvalue()


def recover_gamma(problem: GammaRecoveryProblem, gamma0) -> Trajectory:
    """Adam iterations on the fractional orders; records every iterate.

    Stops when ``max|grad| <= tol`` or after ``max_iter`` steps.  Raises
    :class:`DivergenceError` if the loss increases ``patience`` times in a row.
    """
    cfg = problem.config
    gamma = np.atleast_1d(np.array(gamma0, dtype=np.float64))
    if not np.all(np.isfinite(gamma)):
        raise ValueError("initial gamma must be finite")
    m = np.zeros_like(gamma)
    v = np.zeros_like(gamma)
    traj = Trajectory()
    t0 = time.perf_counter()
    rising = 0
    prev = np.inf
    for it in range(cfg.max_iter + 1):
        loss, grad = problem.loss_and_grad(gamma)
        gnorm = float(np.abs(grad).max())
        traj.append(it, gamma, loss, gnorm)
        if not np.isfinite(loss):
            raise DivergenceError("loss became non-finite", traj)
        rising = rising + 1 if loss > prev else 0
        if rising >= cfg.patience:
            raise DivergenceError(f"loss increased {rising} consecutive iterations", traj)
        prev = loss
        if gnorm <= cfg.tol or it == cfg.max_iter:
            break
        k = it + 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1 - cfg.beta2) * grad ** 2
        mhat = m / (1 - cfg.beta1 ** k)
        vhat = v / (1 - cfg.beta2 ** k)
        gamma = gamma - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    traj.elapsed = time.perf_counter() - t0
    return traj


@dataclass
class GradientCheck:
    adjoint: np.ndarray
    finite_difference: np.ndarray
    relative_errors: np.ndarray

    @property
    def max_relative_error(self):
        return float(self.relative_errors.max())


def fd_gradient_check(problem, gamma, step=1e-5) -> GradientCheck:
    """Central differences per component against the adjoint gradient.

    ``problem`` is a :class:`GammaRecoveryProblem` or any callable returning
    ``(loss, grad)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    fun = problem.loss_and_grad if hasattr(problem, "loss_and_grad") else problem
    gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    _, g = fun(gamma)
    g = np.atleast_1d(g)
    fd = np.zeros_like(g)
    for i in range(gamma.size):
        e = np.zeros_like(gamma)
        e[i] = step
        fd[i] = (fun(gamma + e)[0] - fun(gamma - e)[0]) / (2 * step)
    scale = np.maximum(np.abs(fd), np.abs(g))
    rel = np.abs(g - fd) / np.where(scale > 0, scale, 1.0)
    return GradientCheck(g, fd, rel)
