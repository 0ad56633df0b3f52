"""Belief propagation: augmented joints, cubature rule, forward rollouts."""

import numpy as np
import pytest

from drtrajopt import (
    ContractError,
    Gaussian,
    ParameterBelief,
    PolicyStep,
    augment,
    cubature_points,
    cubature_step,
    forward_pass,
    mass_spring_damper_problem,
    stationary_policy,
    vec_params,
)


def make_belief(A, B, c, param_cov=None, noise=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    d = A.shape[0]
    mean = vec_params(np.hstack([A, B, c[:, None]]))
    if param_cov is None:
        param_cov = np.zeros((mean.size, mean.size))
    if noise is None:
        noise = np.zeros((d, d))
    return ParameterBelief(Gaussian(mean, param_cov), np.asarray(noise, dtype=float))


def test_augment_hand_blocks():
    # m = 1, Sigma_x = 1, K = 2, k = 0, Sigma_u = 0.5.
    mu = Gaussian([1.0], [[1.0]])
    step = PolicyStep(gain=[[2.0]], offset=[0.0], cov=[[0.5]])
    joint = augment(mu, step)
    assert joint.mean == pytest.approx([1.0, 2.0, 0.0])
    expected = np.array([[1.0, 2.0, 0.0], [2.0, 4.5, 0.0], [0.0, 0.0, 1.0]])
    assert joint.cov == pytest.approx(expected)


def test_augment_no_feedback_decouples():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = int(rng.integers(1, 4))
        m = int(rng.integers(1, 3))
        root = rng.standard_normal((d, d))
        mu = Gaussian(rng.standard_normal(d), root @ root.T + 0.5 * np.eye(d))
        su = np.diag(rng.uniform(0.1, 1.0, m))
        step = PolicyStep(np.zeros((m, d)), rng.standard_normal(m), su)
        joint = augment(mu, step)
        assert np.allclose(joint.cov[:d, d : d + m], 0.0)
        assert joint.cov[d : d + m, d : d + m] == pytest.approx(su)
        assert joint.mean[d : d + m] == pytest.approx(step.offset)
        assert joint.cov[d + m :, d + m :] == pytest.approx(np.eye(d))
        assert np.allclose(joint.cov[d + m :, : d + m], 0.0)


def test_augment_marginalizes_back():
    rng = np.random.default_rng(4)
    for _ in range(20):
        d = int(rng.integers(1, 4))
        m = int(rng.integers(1, 3))
        root = rng.standard_normal((d, d + 1))
        mu = Gaussian(rng.standard_normal(d), root @ root.T)
        step = PolicyStep(
            rng.standard_normal((m, d)),
            rng.standard_normal(m),
            np.diag(rng.uniform(0.1, 1.0, m)),
        )
        joint = augment(mu, step)
        assert np.array_equal(joint.mean[:d], mu.mean)
        assert np.array_equal(joint.cov[:d, :d], mu.cov)


def test_augment_rejects_mismatched_gain():
    mu = Gaussian(np.zeros(2), np.eye(2))
    with pytest.raises(ContractError):
        augment(mu, PolicyStep(np.zeros((1, 3)), np.zeros(1), np.eye(1)))


def test_cubature_points_reproduce_moments():
    rng = np.random.default_rng(5)
    for _ in range(25):
        n = int(rng.integers(1, 7))
        root = rng.standard_normal((n, n))
        g = Gaussian(rng.standard_normal(n), root @ root.T + 0.1 * np.eye(n))
        points, weights = cubature_points(g)
        assert points.shape == (2 * n, n)
        assert weights.sum() == pytest.approx(1.0, rel=1e-12)
        mean = weights @ points
        assert mean == pytest.approx(g.mean, abs=1e-9 * (1 + np.abs(g.mean).max()))
        centered = points - g.mean
        scatter = (centered * weights[:, None]).T @ centered
        assert scatter == pytest.approx(g.cov, rel=1e-9, abs=1e-9)


def test_cubature_step_exact_for_affine_map():
    # With no parameter uncertainty the map is affine in [x; u; xi], so the
    # rule must reproduce the closed-form Gaussian update.
    rng = np.random.default_rng(6)
    for _ in range(20):
        d = int(rng.integers(1, 4))
        m = int(rng.integers(1, 3))
        A = rng.standard_normal((d, d)) * 0.6
        B = rng.standard_normal((d, m))
        c = rng.standard_normal(d) * 0.3
        noise = np.diag(rng.uniform(0.05, 0.3, d))
        belief = make_belief(A, B, c, noise=noise)
        root = rng.standard_normal((d, d))
        mu = Gaussian(rng.standard_normal(d), root @ root.T + 0.3 * np.eye(d))
        K = rng.standard_normal((m, d)) * 0.5
        k = rng.standard_normal(m)
        su = np.diag(rng.uniform(0.1, 0.5, m))
        out = cubature_step(mu, PolicyStep(K, k, su), belief)

        gain = A + B @ K
        mean = A @ mu.mean + B @ (K @ mu.mean + k) + c
        cov = gain @ mu.cov @ gain.T + B @ su @ B.T + noise
        assert out.mean == pytest.approx(mean, rel=1e-9, abs=1e-9)
        assert out.cov == pytest.approx(cov, rel=1e-9, abs=1e-9)


def test_cubature_step_deterministic_mean():
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    c = np.array([0.05, -0.02])
    belief = make_belief(A, B, c)
    mu = Gaussian(np.array([1.0, -1.0]), np.zeros((2, 2)))
    step = PolicyStep(np.zeros((1, 2)), np.array([0.3]), np.zeros((1, 1)))
    out = cubature_step(mu, step, belief)
    assert out.mean == pytest.approx(A @ mu.mean + B @ [0.3] + c, abs=1e-8)
    assert np.abs(out.cov).max() < 1e-6


def test_cubature_step_multiplicative_vs_monte_carlo():
    # x' = theta * x with theta ~ N(1, 0.01), x ~ N(2, 0.04).
    belief = ParameterBelief(
        Gaussian([1.0, 0.0, 0.0], np.diag([0.01, 0.0, 0.0])), [[0.0]]
    )
    mu = Gaussian([2.0], [[0.04]])
    step = PolicyStep([[0.0]], [0.0], [[1.0]])
    out = cubature_step(mu, step, belief)

    rng = np.random.default_rng(11)
    n = 1_000_000
    draws = rng.normal(1.0, 0.1, n) * rng.normal(2.0, 0.2, n)
    assert out.mean[0] == pytest.approx(draws.mean(), rel=0.02)
    assert out.cov[0, 0] == pytest.approx(draws.var(), rel=0.02)
    # Closed form: E = 2, var = 0.01*0.04 + 0.01*4 + 1*0.04.
    assert out.mean[0] == pytest.approx(2.0, rel=1e-6)
    assert out.cov[0, 0] == pytest.approx(0.0804, rel=0.02)


def test_forward_pass_empty_horizon():
    mu = Gaussian([0.5], [[0.2]])
    traj = forward_pass(mu, [], [])
    assert len(traj) == 1
    assert traj[0] is mu


def test_forward_pass_geometric_halving():
    belief = make_belief([[0.5]], [[0.0]], [0.0])
    policy = stationary_policy(1, 1, 8, 1e-9)
    traj = forward_pass(Gaussian([1.0], [[0.0]]), policy, [belief] * 8)
    means = np.array([g.mean[0] for g in traj])
    assert means == pytest.approx(0.5 ** np.arange(9), abs=1e-9)


def test_forward_pass_length_mismatch():
    belief = make_belief([[1.0]], [[0.0]], [0.0])
    policy = stationary_policy(1, 1, 3, 1.0)
    with pytest.raises(ContractError):
        forward_pass(Gaussian([0.0], [[1.0]]), policy, [belief] * 2)


def test_forward_pass_linear_benchmark_stays_finite():
    problem = mass_spring_damper_problem()
    policy = stationary_policy(
        problem.state_dim, problem.action_dim, problem.horizon - 1, 10.0
    )
    traj = forward_pass(problem.initial_belief, policy, problem.nominal)
    assert len(traj) == problem.horizon
    for g in traj:
        assert np.all(np.isfinite(g.mean))
        assert np.all(np.linalg.eigvalsh(g.cov) > 0.0)
