# %% [markdown]
# # Recovering the fractional order from an interior feature
#
# The feature phi solves a Neumann problem whose data is L^gamma xi.  Given a
# target phi_D on the subdomain [-0.5, 0.5]^2 we fit gamma with Adam, using the
# adjoint gradient (one extra solve per iteration, regardless of channel count).

# %%
import numpy as np

from lafem import diff, eit, flb

space = eit.reconstruction_space(32)
basis = flb.build_spectral_basis(space.trace)
xi = eit.mean_zero(space, np.cos(space.trace.theta))[0]
op = diff.FeatureOperator(space, basis, xi)

# %%
prob = diff.make_recovery_problem(op, [0.75])
print("gradient check:", diff.fd_gradient_check(prob, [0.3]).max_relative_error)
traj = diff.recover_gamma(prob, [0.0])
print(f"recovered gamma {traj.final_gamma[0]:.6f} after {traj.iterations[-1]} iterations "
      f"({traj.elapsed:.1f}s)")

# %% [markdown]
# Five orders at once.  A single shared xi would make the loss symmetric under
# permuting the orders, so each channel gets a harmonic from a different symmetry
# class of the square.

# %%
target = np.linspace(0.2, 0.9, 5)
op5 = diff.FeatureOperator(space, basis, diff.symmetry_channels(space, 5))
traj5 = diff.recover_gamma(diff.make_recovery_problem(op5, target), np.zeros(5))
print("target   :", target)
print("recovered:", np.round(traj5.final_gamma, 5))

# %% [markdown]
# With 20% multiplicative noise on the target the estimate stays within a few percent.

# %%
noisy = diff.make_recovery_problem(op, [0.75], noise=0.2, seed=1)
print("noisy estimate:", diff.recover_gamma(noisy, [0.0]).final_gamma[0])
