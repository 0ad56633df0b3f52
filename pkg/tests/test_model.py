"""Problem representation: dynamics beliefs, linearization, benchmarks."""

import numpy as np
import pytest
from scipy.linalg import expm

from drtrajopt import (
    ContractError,
    Gaussian,
    ParameterBelief,
    integrate,
    linear_system,
    linearize,
    marginal_dynamics,
    mass_spring_damper,
    mass_spring_damper_problem,
    nominal_belief,
    robot_car,
    robot_car_problem,
    state_action,
    unvec_params,
    vec_params,
)


def test_state_action_layout():
    tau = state_action(np.array([1.0, 2.0]), np.array([3.0]))
    assert np.array_equal(tau, [1.0, 2.0, 3.0, 1.0])
    assert tau[-1] == 1.0


def test_vec_params_column_stacking():
    theta = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(vec_params(theta), [1.0, 3.0, 2.0, 4.0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = int(rng.integers(1, 4))
        m = int(rng.integers(1, 3))
        mat = rng.standard_normal((d, d + m + 1))
        assert np.array_equal(unvec_params(vec_params(mat), d), mat)
    with pytest.raises(ContractError):
        unvec_params(np.zeros(5), 2)


def test_marginal_dynamics_scalar_oracle():
    # x' = theta * x with theta ~ N(a, s): mean a*x, variance noise + s*x^2.
    a, s, noise, x = 0.7, 0.09, 0.04, 1.3
    belief = ParameterBelief(
        Gaussian([a, 0.0, 0.0], np.diag([s, 0.0, 0.0])), np.array([[noise]])
    )
    out = marginal_dynamics(belief, np.array([x, 0.0, 1.0]))
    assert out.mean == pytest.approx(a * x, rel=1e-12)
    assert out.cov[0, 0] == pytest.approx(noise + s * x**2, rel=1e-12)


def test_marginal_dynamics_offset_selector():
    # tau = [0;0;1] picks exactly the offset block of the belief.
    mean = np.array([0.5, -0.2, 1.5])
    cov = np.diag([0.1, 0.2, 0.3])
    belief = ParameterBelief(Gaussian(mean, cov), np.array([[0.01]]))
    out = marginal_dynamics(belief, np.array([0.0, 0.0, 1.0]))
    assert out.mean == pytest.approx(1.5)
    assert out.cov[0, 0] == pytest.approx(0.01 + 0.3, rel=1e-12)


def test_marginal_dynamics_degenerate_belief():
    theta = np.array([[0.9, 0.1, 0.05], [0.0, 1.0, -0.3]])
    belief = ParameterBelief(
        Gaussian(vec_params(theta), np.zeros((6, 6))), 0.02 * np.eye(2)
    )
    tau = np.array([1.0, -1.0, 1.0])
    out = marginal_dynamics(belief, tau)
    assert np.allclose(out.mean, theta @ tau, atol=1e-14)
    assert np.allclose(out.cov, 0.02 * np.eye(2), atol=1e-14)
    with pytest.raises(ContractError):
        marginal_dynamics(belief, np.zeros(4))


def test_marginal_dynamics_monte_carlo():
    rng = np.random.default_rng(42)
    d, m = 2, 1
    p = d * (d + m + 1)
    a = rng.standard_normal((p, p))
    belief = ParameterBelief(
        Gaussian(rng.standard_normal(p), 0.05 * (a @ a.T + p * np.eye(p))),
        0.1 * np.eye(d),
    )
    tau = np.array([0.8, -0.5, 0.3, 1.0])
    out = marginal_dynamics(belief, tau)

    n = 100_000
    thetas = rng.multivariate_normal(belief.dist.mean, belief.dist.cov, size=n)
    mats = thetas.reshape(n, d + m + 1, d).transpose(0, 2, 1)  # un-vec per draw
    noise = rng.multivariate_normal(np.zeros(d), belief.noise_cov, size=n)
    samples = mats @ tau + noise
    se_mean = np.sqrt(np.diag(out.cov) / n)
    assert np.all(np.abs(samples.mean(axis=0) - out.mean) < 3 * se_mean)
    sample_cov = np.cov(samples.T)
    se_cov = np.sqrt(2.0 / n) * np.outer(
        np.sqrt(np.diag(out.cov)), np.sqrt(np.diag(out.cov))
    )
    assert np.all(np.abs(sample_cov - out.cov) < 3 * se_cov + 3e-3)


def test_integrate_zero_drift():
    system = linear_system(np.zeros((2, 2)), np.zeros((2, 1)), 0.1, 0.0)
    x = np.array([1.0, -2.0])
    assert np.array_equal(integrate(system, x, np.zeros(1)), x)


def test_integrate_matches_matrix_exponential():
    system = mass_spring_damper()
    f_mat = np.array([[0.0, 1.0], [-0.01, -0.1]])
    g_mat = np.array([[0.0], [1.0]])
    x = np.array([1.0, 0.0])
    exact = expm(f_mat * system.dt) @ x
    assert np.allclose(integrate(system, x, np.zeros(1)), exact, atol=1e-8)
    # held input via the augmented-matrix exponential
    u = np.array([0.5])
    aug = np.zeros((3, 3))
    aug[:2, :2] = f_mat
    aug[:2, 2:] = g_mat
    exact_u = (expm(aug * system.dt) @ np.concatenate([x, u]))[:2]
    assert np.allclose(integrate(system, x, u), exact_u, atol=1e-8)


def test_car_drift_hand_values():
    system = robot_car()
    # v = 1 pointing along +y: y advances by ~v*dt, x stays ~0
    x = np.array([0.0, 0.0, 0.0, 1.0])
    nxt = integrate(system, x, np.zeros(2))
    assert nxt[1] == pytest.approx(system.dt, rel=1e-6)
    assert abs(nxt[0]) < 1e-12
    fx, _ = system.jacobians(x, np.zeros(2))
    assert np.allclose(fx[:, 3], [0.0, 1.0, 0.0, 0.0])


def test_car_jacobians_match_finite_differences():
    system = robot_car()
    rng = np.random.default_rng(17)
    h = 1e-6
    for _ in range(25):
        x = rng.standard_normal(4)
        u = np.array([rng.standard_normal(), 0.4 * rng.standard_normal()])
        fx, fu = system.jacobians(x, u)
        for i in range(4):
            dx = np.zeros(4)
            dx[i] = h
            col = (system.drift(x + dx, u) - system.drift(x - dx, u)) / (2 * h)
            assert np.allclose(col, fx[:, i], rtol=1e-5, atol=1e-5)
        for j in range(2):
            du = np.zeros(2)
            du[j] = h
            col = (system.drift(x, u + du) - system.drift(x, u - du)) / (2 * h)
            assert np.allclose(col, fu[:, j], rtol=1e-5, atol=1e-5)


def test_linearize_affine_is_reference_independent():
    system = mass_spring_damper()
    rng = np.random.default_rng(2)
    steps_a = linearize(system, rng.standard_normal((6, 2)), rng.standard_normal((5, 1)))
    steps_b = linearize(system, rng.standard_normal((6, 2)), rng.standard_normal((5, 1)))
    for sa, sb in zip(steps_a, steps_b):
        assert np.allclose(sa.theta_matrix, sb.theta_matrix, atol=1e-10)
    a_mat, b_mat, c = steps_a[0].split()
    assert np.allclose(c, 0.0, atol=1e-10)
    assert np.allclose(a_mat, expm(np.array([[0.0, 1.0], [-0.01, -0.1]]) * system.dt), atol=1e-8)
    assert b_mat.shape == (2, 1)


def test_linearize_offset_recovers_one_step_prediction():
    system = robot_car()
    rng = np.random.default_rng(4)
    states = rng.standard_normal((5, 4))
    actions = 0.3 * rng.standard_normal((4, 2))
    steps = linearize(system, states, actions)
    for t, step in enumerate(steps):
        a_mat, b_mat, c = step.split()
        pred = a_mat @ states[t] + b_mat @ actions[t] + c
        assert np.allclose(pred, integrate(system, states[t], actions[t]), atol=1e-12)


def test_nominal_belief_round_trip():
    system = mass_spring_damper()
    steps = linearize(system, np.zeros((4, 2)), np.zeros((3, 1)))
    beliefs = nominal_belief(steps, 1e-4)
    assert len(beliefs) == 3
    for step, belief in zip(steps, beliefs):
        assert np.array_equal(
            unvec_params(belief.dist.mean, 2), step.theta_matrix
        )
        assert np.allclose(belief.dist.cov, 1e-8 * np.eye(8))
        assert np.array_equal(belief.noise_cov, step.noise_cov)
    # single step broadcast across a horizon
    broadcast = nominal_belief(steps[0], 1e-3, count=7)
    assert len(broadcast) == 7
    assert np.array_equal(broadcast[0].dist.mean, broadcast[6].dist.mean)


def test_problem_factories():
    linear = mass_spring_damper_problem()
    assert linear.horizon == 75 and len(linear.nominal) == 74
    assert linear.initial_belief.dim == 2
    assert np.allclose(linear.cost.goal, [1.0, 0.0])
    assert linear.nominal[0].dist.dim == 8

    car = robot_car_problem()
    assert car.horizon == 100 and len(car.nominal) == 99
    assert car.initial_belief.dim == 4
    assert car.system is not None
    assert car.nominal[0].dist.dim == 28
    assert np.allclose(np.diag(car.cost.state_weight), [10.0, 10.0, 1.0, 1.0])
