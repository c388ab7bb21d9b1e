"""Unit tests for the Lorenz-63 vector field, derivatives, and integrators."""

import numpy as np
import numpy.testing as npt
import pytest

from closurelab.dynamics import (
    LorenzParams,
    Trajectory,
    em_step,
    integrate_linearized,
    integrate_ode,
    lorenz_hessians,
    lorenz_jacobian,
    lorenz_rhs,
    simulate_linear_sde,
)
from closurelab.exceptions import NonFiniteStateError


def test_rhs_fixed_points():
    # C+ equilibrium at (sqrt(beta*(r-1)), sqrt(beta*(r-1)), r-1)
    c = np.sqrt(72.0)
    npt.assert_allclose(lorenz_rhs(np.array([c, c, 27.0])), 0.0, atol=1e-12)
    npt.assert_array_equal(lorenz_rhs(np.zeros(3)), np.zeros(3))


def test_rhs_hand_evaluation():
    out = lorenz_rhs(np.array([1.0, 1.0, 1.0]))
    npt.assert_allclose(out, [0.0, 26.0, 1.0 - 8.0 / 3.0], rtol=0, atol=1e-15)


def test_rhs_broadcasts_over_batches():
    rng = np.random.default_rng(0)
    batch = rng.uniform(-20, 20, size=(50, 3))
    out = lorenz_rhs(batch)
    assert out.shape == (50, 3)
    for i in range(50):
        npt.assert_array_equal(out[i], lorenz_rhs(batch[i]))


def test_jacobian_at_origin():
    jac = lorenz_jacobian(np.zeros(3))
    expect = np.array([[-10.0, 10.0, 0.0], [28.0, -1.0, 0.0], [0.0, 0.0, -8.0 / 3.0]])
    npt.assert_array_equal(jac, expect)


def test_jacobian_first_row_constant():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.uniform(-30, 30, size=3)
        npt.assert_array_equal(lorenz_jacobian(x)[0], [-10.0, 10.0, 0.0])


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-5
    for _ in range(100):
        x = rng.uniform(-30, 30, size=3)
        jac = lorenz_jacobian(x)
        fd = np.empty((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd[:, j] = (lorenz_rhs(x + e) - lorenz_rhs(x - e)) / (2 * h)
        denom = max(1.0, np.abs(jac).max())
        assert np.abs(jac - fd).max() / denom <= 1e-6


def test_hessians():
    hess = lorenz_hessians()
    npt.assert_array_equal(hess[0], np.zeros((3, 3)))
    assert hess[1][0, 2] == -1.0 and hess[1][2, 0] == -1.0
    assert hess[2][0, 1] == 1.0 and hess[2][1, 0] == 1.0
    xp = np.array([1.0, 1.0, 0.0])
    assert xp @ hess[2] @ xp == 2.0
    for i in range(3):
        npt.assert_array_equal(hess[i], hess[i].T)


def test_hessians_match_jacobian_differences():
    # the Jacobian is affine in x, so central differences are exact
    rng = np.random.default_rng(3)
    hess = lorenz_hessians()
    x = rng.uniform(-10, 10, size=3)
    h = 0.5
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        dj = (lorenz_jacobian(x + e) - lorenz_jacobian(x - e)) / (2 * h)
        for i in range(3):
            npt.assert_allclose(dj[i, :], hess[i][:, j], atol=1e-12)


def test_integrate_zero_field_is_constant():
    traj = integrate_ode(lambda x: np.zeros_like(x), np.array([1.0, 2.0, 3.0]), 0.1, 5)
    assert len(traj) == 6
    npt.assert_array_equal(traj.states, np.tile([1.0, 2.0, 3.0], (6, 1)))


def test_integrate_scalar_decay_rk4():
    traj = integrate_ode(lambda x: -x, np.array([1.0]), 0.01, 100, scheme="rk4")
    assert abs(traj.states[-1, 0] - np.exp(-1.0)) < 1e-8


def test_rk4_order():
    def err(dt):
        n = round(1.0 / dt)
        traj = integrate_ode(lambda x: -x, np.array([1.0]), dt, n, scheme="rk4")
        return abs(traj.states[-1, 0] - np.exp(-1.0))

    assert err(0.02) / err(0.01) >= 14.0


def test_rk2_order():
    def err(dt):
        n = round(1.0 / dt)
        traj = integrate_ode(lambda x: -x, np.array([1.0]), dt, n, scheme="rk2")
        return abs(traj.states[-1, 0] - np.exp(-1.0))

    ratio = err(0.02) / err(0.01)
    assert 3.5 <= ratio <= 4.5


def test_euler_order():
    def err(dt):
        n = round(1.0 / dt)
        traj = integrate_ode(lambda x: -x, np.array([1.0]), dt, n, scheme="euler")
        return abs(traj.states[-1, 0] - np.exp(-1.0))

    ratio = err(0.02) / err(0.01)
    assert 1.8 <= ratio <= 2.2


def test_lorenz_attractor_bounded():
    traj = integrate_ode(lorenz_rhs, np.array([1.0, 1.0, 1.0]), 0.001, 10_000)
    assert np.all(np.isfinite(traj.states))
    assert np.abs(traj.states).max() < 100.0
    npt.assert_allclose(traj.times[-1], 10.0)


def test_integrate_raises_on_blowup():
    with pytest.raises(NonFiniteStateError):
        integrate_ode(lambda x: x**3, np.array([2.0]), 1.0, 50)


def test_integrate_rejects_bad_args():
    with pytest.raises(ValueError):
        integrate_ode(lorenz_rhs, np.ones(3), -0.1, 10)
    with pytest.raises(ValueError):
        integrate_ode(lorenz_rhs, np.ones(3), 0.1, 0)
    with pytest.raises(ValueError):
        integrate_ode(lorenz_rhs, np.ones(3), 0.1, 10, scheme="heun")


def test_linearized_zero_stays_zero():
    nominal = integrate_ode(lorenz_rhs, np.array([1.0, 1.0, 1.0]), 0.01, 100)
    tangent = integrate_linearized(nominal, np.zeros(3))
    assert not tangent.blew_up
    npt.assert_array_equal(tangent.states, np.zeros((101, 3)))


def test_linearized_is_linear_in_ic():
    nominal = integrate_ode(lorenz_rhs, np.array([1.0, 1.0, 1.0]), 0.01, 200)
    xt0 = np.array([0.1, -0.2, 0.3])
    one = integrate_linearized(nominal, xt0)
    two = integrate_linearized(nominal, 2.0 * xt0)
    npt.assert_array_equal(two.states, 2.0 * one.states)


def test_linearized_blowup_on_attractor():
    # spin onto the attractor first, then propagate tangent dynamics to T=20
    warm = integrate_ode(lorenz_rhs, np.array([1.0, 1.0, 1.0]), 0.01, 1000)
    nominal = integrate_ode(lorenz_rhs, warm.states[-1], 0.01, 2000)
    tangent = integrate_linearized(nominal, np.array([0.1, 0.1, 0.1]))
    norms = np.linalg.norm(tangent.states, axis=1)
    assert norms.max() > 1e6


def test_em_step_zero_diffusion_is_forward_euler():
    x = np.array([1.0, -2.0, 0.5])
    drift = lorenz_rhs(x)
    stepped = em_step(x, drift, np.zeros(3), 0.01, np.ones(3))
    npt.assert_array_equal(stepped, x + drift * 0.01)


def test_em_step_noise_scaling():
    x = np.zeros(3)
    out = em_step(x, np.zeros(3), np.ones(3), 0.04, np.ones(3))
    npt.assert_allclose(out, 0.2, rtol=0, atol=1e-15)
    npt.assert_array_equal(em_step(x, np.zeros(3), np.ones(3), 0.04, np.zeros(3)), x)


def test_linear_sde_ode_limit():
    path = simulate_linear_sde(-1.0, 0.0, 1.0, 1e-3, 1000, seed=0)
    assert abs(path[-1] - np.exp(-1.0)) < 1e-3
    path = simulate_linear_sde(1.0, 0.0, 1.0, 1e-3, 1000, seed=0)
    assert np.exp(0.99) < path[-1] < np.exp(1.01)


def test_linear_sde_noise_stabilizes_unstable_drift():
    # lambda - mu^2/2 = -1, so log|x(T)| concentrates at -T + log|x0|
    T, dt = 1.0, 1e-3
    n = round(T / dt)
    ends = np.array(
        [simulate_linear_sde(1.0, 2.0, 1.0, dt, n, seed=100 + k)[-1] for k in range(200)]
    )
    logs = np.log(np.abs(ends))
    se = logs.std(ddof=1) / np.sqrt(len(logs))
    assert abs(logs.mean() - (-T)) <= 3.0 * se


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(dt=0.0, t0=0.0, states=np.zeros((4, 3)))
    with pytest.raises(ValueError):
        Trajectory(dt=0.1, t0=0.0, states=np.zeros((0, 3)))
    with pytest.raises(ValueError):
        LorenzParams(sigma=np.inf)
    one_d = Trajectory(dt=0.1, t0=0.0, states=np.arange(5.0))
    assert one_d.states.shape == (5, 1)
