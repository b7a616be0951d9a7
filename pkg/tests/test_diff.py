import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lafem import diff
from lafem.diff import (DivergenceError, FeatureOperator, GammaRecoveryProblem, RecoveryConfig,
                        Trajectory, fd_gradient_check, make_recovery_problem, recover_gamma,
                        symmetry_channels)
from lafem.eit import standard_currents
from lafem.fem import assemble_mass


@pytest.fixture(scope="module")
def xi8(space16):
    return standard_currents(space16, [1, 2, 3, 4, 5, 6, 8, 16]).values


@pytest.fixture(scope="module")
def op8(space16, basis16, xi8):
    return FeatureOperator(space16, basis16, xi8)


@pytest.fixture(scope="module")
def shared_op(space16, basis16, xi8):
    return FeatureOperator(space16, basis16, xi8[0])


def test_zero_data_gives_zero_features(space16, basis16):
    op = FeatureOperator(space16, basis16, np.zeros((2, space16.n_bdof)))
    assert np.all(op.forward([0.3, 0.7]) == 0)


def test_features_linear_in_data(space16, basis16, xi8):
    a, b = 0.7, -2.5
    ops = [FeatureOperator(space16, basis16, x) for x in (xi8[1], xi8[4], a * xi8[1] + b * xi8[4])]
    f = [o.forward(0.6)[0] for o in ops]
    np.testing.assert_allclose(f[2], a * f[0] + b * f[1], atol=1e-12 * np.abs(f[2]).max())


def test_features_satisfy_mean_zero_constraint(op8):
    phi = op8.forward(np.linspace(0, 1, 8))
    w = op8.solver.w
    assert np.abs(phi @ w).max() <= 1e-12 * np.abs(phi).max()


def test_batched_channels_equal_loop(space16, basis16, xi8, op8):
    g = np.linspace(-0.5, 1.0, 8)
    batched = op8.forward(g)
    for l in range(8):
        single = FeatureOperator(space16, basis16, xi8[l:l + 1], solver=op8.solver).forward(g[l])
        np.testing.assert_allclose(batched[l], single[0], rtol=0, atol=1e-13 * np.abs(single).max())


def test_features_solve_the_neumann_problem(op8):
    # K phi equals the compatible load, i.e. the weak Neumann equations hold
    g = np.full(8, 0.75)
    phi = op8.forward(g)
    loads = op8.boundary_load(op8.neumann_data(g))
    np.testing.assert_allclose(op8.K.matvec(phi), loads, atol=1e-10 * np.abs(loads).max())


def test_channel_count_validation(op8, space16, basis16):
    with pytest.raises(ValueError):
        op8.forward([0.1, 0.2])
    with pytest.raises(ValueError):
        op8.forward([np.nan] * 8)
    with pytest.raises(ValueError):
        FeatureOperator(space16, basis16, np.ones(space16.n_bdof + 1))


def test_loss_vanishes_at_truth(op8):
    prob = make_recovery_problem(op8, np.linspace(0.2, 0.9, 8))
    loss, grad = prob.loss_and_grad(prob.gamma_true)
    assert loss <= 1e-28 and np.abs(grad).max() <= 1e-12


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-0.5, 1.2), min_size=3, max_size=3), st.floats(-0.5, 1.2))
def test_adjoint_gradient_matches_finite_differences(space16, basis16, xi8, gamma, truth):
    op = FeatureOperator(space16, basis16, xi8[[0, 2, 5]])
    prob = make_recovery_problem(op, [truth] * 3)
    chk = fd_gradient_check(prob, gamma)
    scale = np.abs(chk.finite_difference).max()
    if scale < 1e-8:
        return
    err = np.abs(chk.adjoint - chk.finite_difference).max() / scale
    assert err <= 1e-6


def test_shared_gamma_gradient_is_channel_sum(op8):
    prob = make_recovery_problem(op8, [0.75])
    _, g_shared = prob.loss_and_grad(0.3)
    _, g_full = prob.loss_and_grad(np.full(8, 0.3))
    assert g_shared.shape == (1,)
    assert g_shared[0] == pytest.approx(g_full.sum(), rel=1e-12)


def test_adjoint_identity(op8, rng):
    # <a, S b> = <S a, b> for compatible loads a, b
    loads = op8.boundary_load(rng.standard_normal((2, op8.space.n_bdof)))
    x = op8.solver.solve(loads, project=True, warn=False)
    assert loads[0] @ x[1] == pytest.approx(loads[1] @ x[0], rel=1e-10)


def test_central_difference_error_quarters_when_step_halves(op8):
    prob = make_recovery_problem(op8, [0.75])
    _, g = prob.loss_and_grad(0.2)
    e = []
    for h in (4e-2, 2e-2):
        fd = (prob.loss(0.2 + h) - prob.loss(0.2 - h)) / (2 * h)
        e.append(abs(fd - g[0]))
    assert 3.0 <= e[0] / e[1] <= 5.0


def test_fd_check_with_callable_exact_on_quadratic():
    fun = lambda g: (float(((g - 1) ** 2).sum()), 2 * (g - 1))
    chk = fd_gradient_check(fun, np.array([0.3, -2.0]), step=1e-3)
    assert chk.max_relative_error <= 1e-10
    with pytest.raises(ValueError):
        fd_gradient_check(fun, np.zeros(2), step=0)


def test_single_gamma_recovery_converges(shared_op):
    prob = make_recovery_problem(shared_op, [0.75], config=RecoveryConfig(max_iter=500))
    traj = recover_gamma(prob, [0.0])
    assert abs(traj.final_gamma[0] - 0.75) <= 1e-3
    assert traj.losses[-1] < traj.losses[0]
    assert len(traj.iterations) == len(traj.gammas)


def test_noisy_target_is_seeded(op8):
    a = make_recovery_problem(op8, [0.75], noise=0.2, seed=3).phi_D
    b = make_recovery_problem(op8, [0.75], noise=0.2, seed=3).phi_D
    c = make_recovery_problem(op8, [0.75], noise=0.2, seed=4).phi_D
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0


def test_problem_validates_shapes(op8, space32):
    with pytest.raises(ValueError):
        GammaRecoveryProblem(op8, np.zeros(3), assemble_mass(op8.space, "full"))
    with pytest.raises(ValueError):
        GammaRecoveryProblem(op8, np.zeros(op8.space.ndof), assemble_mass(space32, "full"))


class _Rising:
    config = RecoveryConfig(patience=5, max_iter=100)

    def __init__(self, values):
        self.values = iter(values)

    def loss_and_grad(self, gamma):
        return next(self.values), np.ones_like(gamma)


def test_divergence_detection():
    with pytest.raises(DivergenceError) as exc:
        recover_gamma(_Rising(float(k) for k in range(1000)), [0.0])
    assert len(exc.value.trajectory.losses) == 6
    with pytest.raises(DivergenceError):
        recover_gamma(_Rising([1.0, np.nan]), [0.0])
    with pytest.raises(ValueError):
        recover_gamma(_Rising([1.0]), [np.inf])


def test_trajectory_csv():
    t = Trajectory()
    t.append(0, [0.1, 0.2], 3.0, 1.0)
    t.append(1, [0.15, 0.25], 2.0, 0.5)
    lines = t.to_csv().splitlines()
    assert lines[0] == "iter,gamma_0,gamma_1,loss"
    assert lines[2] == "1,0.15,0.25,2.0"


def test_symmetry_channels(space16):
    xi = symmetry_channels(space16, 5)
    w = diff.boundary_weights(space16)[space16.boundary_dofs]
    assert np.abs(xi @ w).max() <= 1e-14
    with pytest.raises(ValueError):
        symmetry_channels(space16, 0)
    with pytest.raises(ValueError):
        symmetry_channels(space16, 99)
