# %% [markdown]
# # Manufactured Neumann problem on [-1, 1]^2
#
# u = cos(pi x) cos(pi y) has zero normal derivative on the square, so it solves
# -Delta u = 2 pi^2 u with homogeneous Neumann data.  We solve with the mean-zero
# constraint, shift the exact solution the same way and watch the L2 error shrink.

# %%
import numpy as np

from lafem import fem
from lafem.cli import _laplace_problem


def exact(x):
    return np.cos(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1])


# %%
for p in (1, 2):
    errs = []
    for n in (8, 16, 32, 64):
        space, src = _laplace_problem(n, p)
        w = fem.boundary_weights(space)
        K = fem.assemble_stiffness(space)
        u = fem.ConstrainedSolver(K, w).solve(fem.assemble_load(space, src), warn=False)
        shift = w @ space.interpolate(exact) / w.sum()
        errs.append(fem.l2_error(space, u, lambda x: exact(x) - shift))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    print(f"P{p}: errors {np.array(errs)}  observed orders {np.round(rates, 3)}")

# %% [markdown]
# Expect orders close to 2 for P1 and 3 for P2.
