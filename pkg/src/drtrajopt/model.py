"""Problem data: parameterized dynamics, beliefs over them, costs, systems.

The dynamics model is affine in an augmented regressor ``tau = [x; u; 1]``:
``x' = Theta @ tau + w`` with ``Theta = [A, B, c]`` and ``w ~ N(0, noise_cov)``.
Uncertainty over ``Theta`` is a Gaussian over its column-stacked entries, so
``Theta @ tau`` equals ``kron(tau, I) .T @ vec(Theta)`` and all second-moment
algebra reduces to block sums over the parameter covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError
from .gauss import Gaussian, symmetrize

PSD_TOL = 1e-9


def state_action(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Stack the regressor [x; u; 1] the dynamics parameters act on."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return np.concatenate([x, u, [1.0]])


def vec_params(theta_matrix: np.ndarray) -> np.ndarray:
    """Column-stack a parameter matrix [A, B, c] into a vector."""
    return np.asarray(theta_matrix, dtype=float).flatten(order="F")


def unvec_params(theta: np.ndarray, state_dim: int) -> np.ndarray:
    """Invert vec_params: rebuild the d x (d+m+1) matrix from its vector."""
    theta = np.asarray(theta, dtype=float)
    if theta.size % state_dim != 0:
        raise ContractError(
            f"parameter vector of size {theta.size} is not a multiple of "
            f"state dimension {state_dim}"
        )
    return theta.reshape((state_dim, -1), order="F")


def _check_symmetric(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1]:
        raise ContractError(f"{name} must be square, got shape {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat))))
    if float(np.max(np.abs(mat - mat.T))) > PSD_TOL * scale:
        raise ContractError(f"{name} is not symmetric")
    return symmetrize(mat)


@dataclass(frozen=True, eq=False)
class LinearParamStep:
    """One step of affine dynamics x' = A x + B u + c + w.

    ``theta_matrix`` is the d x (d+m+1) stack [A, B, c]; ``noise_cov`` is the
    covariance of the additive process noise w.
    """

    theta_matrix: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        theta = np.atleast_2d(np.asarray(self.theta_matrix, dtype=float))
        noise = _check_symmetric(self.noise_cov, "noise_cov")
        d = theta.shape[0]
        if noise.shape != (d, d):
            raise ContractError(
                f"noise_cov shape {noise.shape} does not match state dim {d}"
            )
        if theta.shape[1] < d + 1:
            raise ContractError(
                f"theta_matrix with {theta.shape[1]} columns cannot hold [A, B, c]"
            )
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(noise))):
            raise ContractError("dynamics parameters must be finite")
        object.__setattr__(self, "theta_matrix", theta)
        object.__setattr__(self, "noise_cov", noise)

    @property
    def state_dim(self) -> int:
        return self.theta_matrix.shape[0]

    @property
    def action_dim(self) -> int:
        return self.theta_matrix.shape[1] - self.state_dim - 1

    def split(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return the (A, B, c) blocks."""
        d, m = self.state_dim, self.action_dim
        theta = self.theta_matrix
        return theta[:, :d], theta[:, d : d + m], theta[:, d + m]


@dataclass(frozen=True, eq=False)
class ParameterBelief:
    """Gaussian over the column-stacked dynamics parameters, plus noise.

    ``dist`` has dimension d * (d+m+1); ``noise_cov`` is the process noise of
    the step this belief parameterizes (it is not uncertain).
    """

    dist: Gaussian
    noise_cov: np.ndarray

    def __post_init__(self):
        noise = _check_symmetric(self.noise_cov, "noise_cov")
        d = noise.shape[0]
        if self.dist.dim % d != 0 or self.dist.dim < d * (d + 1):
            raise ContractError(
                f"belief dimension {self.dist.dim} does not factor as "
                f"d * (d+m+1) for state dimension {d}"
            )
        object.__setattr__(self, "noise_cov", noise)

    @property
    def state_dim(self) -> int:
        return self.noise_cov.shape[0]

    @property
    def regressor_dim(self) -> int:
        return self.dist.dim // self.state_dim

    @property
    def action_dim(self) -> int:
        return self.regressor_dim - self.state_dim - 1

    def mean_matrix(self) -> np.ndarray:
        """Mean parameters as the d x (d+m+1) matrix [A, B, c]."""
        return unvec_params(self.dist.mean, self.state_dim)

    def cov_blocks(self) -> np.ndarray:
        """Parameter covariance as a (p, d, p, d) block tensor.

        Entry [i, r, j, s] is the covariance between Theta[r, i] and
        Theta[s, j]; contractions against the regressor happen on the first
        and third axes.
        """
        p, d = self.regressor_dim, self.state_dim
        return self.dist.cov.reshape(p, d, p, d)

    def with_dist(self, dist: Gaussian) -> "ParameterBelief":
        """Same noise model carrying a replacement parameter distribution.

        Skips re-validating the unchanged noise covariance, so tilting loops
        do not pay the construction checks at every step.
        """
        if dist.dim != self.dist.dim:
            raise ContractError(
                f"replacement dimension {dist.dim} does not match {self.dist.dim}"
            )
        out = object.__new__(ParameterBelief)
        object.__setattr__(out, "dist", dist)
        object.__setattr__(out, "noise_cov", self.noise_cov)
        return out


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """Time-invariant tracking cost around a goal state.

    Stage cost (x - goal)' Cx (x - goal) + u' Cu u, terminal cost
    (x - goal)' Ct (x - goal). Cx and Ct must be PSD, Cu strictly PD.
    """

    state_weight: np.ndarray
    action_weight: np.ndarray
    terminal_weight: np.ndarray
    goal: np.ndarray

    def __post_init__(self):
        cx = _check_symmetric(self.state_weight, "state_weight")
        cu = _check_symmetric(self.action_weight, "action_weight")
        ct = _check_symmetric(self.terminal_weight, "terminal_weight")
        goal = np.atleast_1d(np.asarray(self.goal, dtype=float))
        if cx.shape[0] != goal.shape[0] or ct.shape != cx.shape:
            raise ContractError("state weights and goal dimensions disagree")
        for name, mat in (("state_weight", cx), ("terminal_weight", ct)):
            if float(np.linalg.eigvalsh(mat).min()) < -PSD_TOL:
                raise ContractError(f"{name} must be positive semidefinite")
        try:
            np.linalg.cholesky(cu)
        except np.linalg.LinAlgError as exc:
            raise ContractError("action_weight must be positive definite") from exc
        object.__setattr__(self, "state_weight", cx)
        object.__setattr__(self, "action_weight", cu)
        object.__setattr__(self, "terminal_weight", ct)
        object.__setattr__(self, "goal", goal)

    @property
    def state_dim(self) -> int:
        return self.goal.shape[0]

    @property
    def action_dim(self) -> int:
        return self.action_weight.shape[0]


@dataclass(frozen=True, eq=False)
class NonlinearSystem:
    """Continuous-time system x_dot = drift(x, u), discretized by RK4 steps.

    ``jacobians(x, u)`` must return (d drift / d x, d drift / d u) evaluated
    at the argument; agreement with finite differences is asserted in tests.
    ``process_noise_cov`` is the discrete-time noise added after each step.
    """

    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobians: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    dt: float
    process_noise_cov: np.ndarray
    state_dim: int
    action_dim: int

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ContractError(f"dt must be positive, got {self.dt}")
        noise = _check_symmetric(self.process_noise_cov, "process_noise_cov")
        if noise.shape[0] != self.state_dim:
            raise ContractError("process noise dimension does not match state")
        object.__setattr__(self, "process_noise_cov", noise)


@dataclass(frozen=True, eq=False)
class Problem:
    """A finite-horizon instance: initial state belief, cost, nominal model.

    ``horizon`` counts states x_1 .. x_T, so there are T-1 dynamics steps and
    ``nominal`` must have length T-1. ``system`` is optional and only needed
    when the solver re-linearizes.
    """

    horizon: int
    initial_belief: Gaussian
    cost: QuadraticCost
    nominal: tuple[ParameterBelief, ...]
    system: NonlinearSystem | None = None

    def __post_init__(self):
        if self.horizon < 2:
            raise ContractError(f"horizon must be at least 2, got {self.horizon}")
        nominal = tuple(self.nominal)
        if len(nominal) != self.horizon - 1:
            raise ContractError(
                f"expected {self.horizon - 1} nominal steps, got {len(nominal)}"
            )
        d = self.initial_belief.dim
        if self.cost.state_dim != d:
            raise ContractError("cost and initial belief dimensions disagree")
        for belief in nominal:
            if belief.state_dim != d or belief.action_dim != self.cost.action_dim:
                raise ContractError("nominal belief dimensions disagree with cost")
        object.__setattr__(self, "nominal", nominal)

    @property
    def state_dim(self) -> int:
        return self.initial_belief.dim

    @property
    def action_dim(self) -> int:
        return self.cost.action_dim


def marginal_dynamics(belief: ParameterBelief, tau: np.ndarray) -> Gaussian:
    """Next-state distribution at a fixed regressor, parameters integrated out.

    x' | tau is Gaussian with mean ``M @ tau`` and covariance
    ``noise_cov + sum_ij tau_i tau_j Cov(Theta[:, i], Theta[:, j])``.
    """
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (belief.regressor_dim,):
        raise ContractError(
            f"regressor shape {tau.shape} does not match belief ({belief.regressor_dim},)"
        )
    mean = belief.mean_matrix() @ tau
    blocks = belief.cov_blocks()
    spread = np.einsum("i,j,irjs->rs", tau, tau, blocks)
    return Gaussian(mean, belief.noise_cov + symmetrize(spread))


def integrate(system: NonlinearSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One classic RK4 step of the drift under a zero-order-hold action."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    dt = system.dt
    k1 = system.drift(x, u)
    k2 = system.drift(x + 0.5 * dt * k1, u)
    k3 = system.drift(x + 0.5 * dt * k2, u)
    k4 = system.drift(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_jacobians(
    system: NonlinearSystem, x: np.ndarray, u: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    # Chain rule through the four RK4 stages: exact jacobian of the discrete
    # map, assuming the supplied continuous-time jacobians.
    dt = system.dt
    d = system.state_dim
    eye = np.eye(d)

    k1 = system.drift(x, u)
    x2 = x + 0.5 * dt * k1
    k2 = system.drift(x2, u)
    x3 = x + 0.5 * dt * k2
    k3 = system.drift(x3, u)
    x4 = x + dt * k3

    fx1, fu1 = system.jacobians(x, u)
    fx2, fu2 = system.jacobians(x2, u)
    fx3, fu3 = system.jacobians(x3, u)
    fx4, fu4 = system.jacobians(x4, u)

    dk1x = fx1
    dk2x = fx2 @ (eye + 0.5 * dt * dk1x)
    dk3x = fx3 @ (eye + 0.5 * dt * dk2x)
    dk4x = fx4 @ (eye + dt * dk3x)

    dk1u = fu1
    dk2u = fu2 + fx2 @ (0.5 * dt * dk1u)
    dk3u = fu3 + fx3 @ (0.5 * dt * dk2u)
    dk4u = fu4 + fx4 @ (dt * dk3u)

    a = eye + (dt / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    b = (dt / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return a, b


def linearize(
    system: NonlinearSystem,
    states: np.ndarray,
    actions: np.ndarray,
) -> list[LinearParamStep]:
    """Affine Taylor expansion of the RK4 step along a reference trajectory.

    ``states`` is (T, d) and ``actions`` is (T-1, m); step t expands about
    (states[t], actions[t]) with offset chosen so the affine model reproduces
    the integrated step exactly at the reference point.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if states.shape[0] != actions.shape[0] + 1:
        raise ContractError(
            f"need one more state than action, got {states.shape[0]} states "
            f"and {actions.shape[0]} actions"
        )
    steps = []
    for t in range(actions.shape[0]):
        x, u = states[t], actions[t]
        a, b = _step_jacobians(system, x, u)
        nxt = integrate(system, x, u)
        c = nxt - a @ x - b @ u
        theta = np.hstack([a, b, c[:, None]])
        if not np.all(np.isfinite(theta)):
            raise NumericalError("linearization produced non-finite parameters", t)
        steps.append(LinearParamStep(theta, system.process_noise_cov))
    return steps


def nominal_belief(
    steps: LinearParamStep | Sequence[LinearParamStep],
    sigma_theta: float,
    count: int | None = None,
) -> list[ParameterBelief]:
    """Isotropic Gaussian beliefs centered on linearized steps.

    A single step is broadcast ``count`` times (time-invariant model); a
    sequence yields one belief per step.
    """
    if sigma_theta <= 0.0:
        raise ContractError(f"sigma_theta must be positive, got {sigma_theta}")
    if isinstance(steps, LinearParamStep):
        if count is None or count < 1:
            raise ContractError("broadcasting a single step requires a count >= 1")
        steps = [steps] * count
    elif count is not None and count != len(steps):
        raise ContractError(f"count {count} disagrees with {len(steps)} steps")
    beliefs = []
    for step in steps:
        mean = vec_params(step.theta_matrix)
        cov = sigma_theta**2 * np.eye(mean.shape[0])
        beliefs.append(ParameterBelief(Gaussian(mean, cov), step.noise_cov))
    return beliefs


# Shipped experiment systems.


def mass_spring_damper(
    dt: float = 0.01,
    mass: float = 1.0,
    stiffness: float = 0.01,
    damping: float = 0.1,
    noise_std: float = 0.01,
) -> NonlinearSystem:
    """Forced mass-spring-damper: state (position, velocity), action force."""
    drift_matrix = np.array([[0.0, 1.0], [-stiffness / mass, -damping / mass]])
    input_matrix = np.array([[0.0], [1.0 / mass]])
    return linear_system(drift_matrix, input_matrix, dt, noise_std)


def linear_system(
    drift_matrix: np.ndarray,
    input_matrix: np.ndarray,
    dt: float,
    noise_std: float,
) -> NonlinearSystem:
    """Wrap continuous-time x_dot = F x + G u as a NonlinearSystem."""
    f_mat = np.atleast_2d(np.asarray(drift_matrix, dtype=float))
    g_mat = np.atleast_2d(np.asarray(input_matrix, dtype=float))
    if f_mat.shape[0] != f_mat.shape[1] or g_mat.shape[0] != f_mat.shape[0]:
        raise ContractError("drift and input matrices have inconsistent shapes")
    d, m = g_mat.shape

    def drift(x, u):
        return f_mat @ x + g_mat @ u

    def jacobians(x, u):
        return f_mat, g_mat

    return NonlinearSystem(
        drift=drift,
        jacobians=jacobians,
        dt=dt,
        process_noise_cov=noise_std**2 * np.eye(d),
        state_dim=d,
        action_dim=m,
    )


def robot_car(
    dt: float = 0.025,
    axle_length: float = 0.1,
    noise_std: float = 1e-4,
) -> NonlinearSystem:
    """Kinematic car: state (x, y, heading, speed), action (accel, steer)."""

    def drift(state, action):
        _, _, heading, speed = state
        accel, steer = action
        return np.array(
            [
                speed * np.sin(heading),
                speed * np.cos(heading),
                speed * np.tan(steer) / axle_length,
                accel,
            ]
        )

    def jacobians(state, action):
        _, _, heading, speed = state
        _, steer = action
        fx = np.zeros((4, 4))
        fx[0, 2] = speed * np.cos(heading)
        fx[0, 3] = np.sin(heading)
        fx[1, 2] = -speed * np.sin(heading)
        fx[1, 3] = np.cos(heading)
        fx[2, 3] = np.tan(steer) / axle_length
        fu = np.zeros((4, 2))
        fu[2, 1] = speed / (axle_length * np.cos(steer) ** 2)
        fu[3, 0] = 1.0
        return fx, fu

    return NonlinearSystem(
        drift=drift,
        jacobians=jacobians,
        dt=dt,
        process_noise_cov=noise_std**2 * np.eye(4),
        state_dim=4,
        action_dim=2,
    )


def _hold_reference(x0: np.ndarray, horizon: int, action_dim: int):
    states = np.tile(np.asarray(x0, dtype=float), (horizon, 1))
    actions = np.zeros((horizon - 1, action_dim))
    return states, actions


def mass_spring_damper_problem(
    horizon: int = 75,
    dt: float = 0.01,
    initial_mean: Sequence[float] = (0.0, 0.0),
    initial_std: float = 0.1,
    goal: Sequence[float] = (1.0, 0.0),
    state_diag: Sequence[float] = (100.0, 0.0),
    action_diag: Sequence[float] = (0.001,),
    noise_std: float = 0.01,
    sigma_theta: float = 1e-4,
) -> Problem:
    """Regulation of the mass-spring-damper to a set point."""
    system = mass_spring_damper(dt=dt, noise_std=noise_std)
    states, actions = _hold_reference(initial_mean, horizon, system.action_dim)
    steps = linearize(system, states, actions)
    cost = QuadraticCost(
        state_weight=np.diag(state_diag),
        action_weight=np.diag(action_diag),
        terminal_weight=np.diag(state_diag),
        goal=np.asarray(goal, dtype=float),
    )
    initial = Gaussian(np.asarray(initial_mean, dtype=float), initial_std**2 * np.eye(2))
    return Problem(
        horizon=horizon,
        initial_belief=initial,
        cost=cost,
        nominal=tuple(nominal_belief(steps, sigma_theta)),
        system=system,
    )


def robot_car_problem(
    horizon: int = 100,
    dt: float = 0.025,
    initial_mean: Sequence[float] = (5.0, 5.0, 0.0, 0.0),
    initial_std: float = 1e-2,
    goal: Sequence[float] = (0.0, 0.0, 0.0, 0.0),
    state_diag: Sequence[float] = (10.0, 10.0, 1.0, 1.0),
    action_diag: Sequence[float] = (0.1, 0.1),
    noise_std: float = 1e-4,
    sigma_theta: float = 1e-3,
) -> Problem:
    """Parking the kinematic car at the origin."""
    system = robot_car(dt=dt, noise_std=noise_std)
    states, actions = _hold_reference(initial_mean, horizon, system.action_dim)
    steps = linearize(system, states, actions)
    cost = QuadraticCost(
        state_weight=np.diag(state_diag),
        action_weight=np.diag(action_diag),
        terminal_weight=np.diag(state_diag),
        goal=np.asarray(goal, dtype=float),
    )
    initial = Gaussian(
        np.asarray(initial_mean, dtype=float), initial_std**2 * np.eye(4)
    )
    return Problem(
        horizon=horizon,
        initial_belief=initial,
        cost=cost,
        nominal=tuple(nominal_belief(steps, sigma_theta)),
        system=system,
    )
