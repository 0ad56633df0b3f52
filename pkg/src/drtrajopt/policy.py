"""Policy iteration under a KL trust region.

One improvement step multiplies the previous linear-Gaussian policy by
``exp(-Q_t / alpha)`` and renormalizes, which stays linear-Gaussian because
``Q_t`` is quadratic. The resulting soft state value is
``V_t(x) = -alpha * log(integral of prev_policy * exp(-Q_t / alpha) du)``,
also quadratic. The temperature ``alpha`` is the dual variable of the summed
KL constraint and is found by bracketing and bisection on the constraint
residual, which is monotone in ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve

from .errors import BackwardPassError, ContractError, TrustRegionError
from .gauss import Gaussian, spd_inverse, symmetrize
from .model import ParameterBelief, QuadraticCost
from .propagate import StateBeliefTrajectory, forward_pass

KL_MATCH_TOL = 0.05  # default relative tolerance on the trust-region residual
ALPHA_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class PolicyStep:
    """One step of a linear-Gaussian policy u ~ N(gain @ x + offset, cov)."""

    gain: np.ndarray
    offset: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        m = gain.shape[0]
        if offset.shape != (m,) or cov.shape != (m, m):
            raise ContractError("policy step dimensions disagree")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if float(np.max(np.abs(cov - cov.T))) > 1e-9 * scale:
            raise ContractError("policy covariance is not symmetric")
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "cov", symmetrize(cov))

    @property
    def action_dim(self) -> int:
        return self.gain.shape[0]

    @property
    def state_dim(self) -> int:
        return self.gain.shape[1]

    def mean_action(self, x: np.ndarray) -> np.ndarray:
        return self.gain @ x + self.offset


# A policy is the list of its steps, one per dynamics step.
LinearGaussianPolicy = list[PolicyStep]


def stationary_policy(
    state_dim: int, action_dim: int, steps: int, noise_std: float
) -> LinearGaussianPolicy:
    """Zero-gain, zero-offset policy with isotropic exploration noise."""
    if noise_std <= 0.0:
        raise ContractError(f"noise_std must be positive, got {noise_std}")
    step = PolicyStep(
        gain=np.zeros((action_dim, state_dim)),
        offset=np.zeros(action_dim),
        cov=noise_std**2 * np.eye(action_dim),
    )
    return [step] * steps


@dataclass(frozen=True, eq=False)
class QuadraticValue:
    """Quadratic function value(x) = x' quad x + lin . x + const."""

    quad: np.ndarray
    lin: np.ndarray
    const: float

    def __post_init__(self):
        quad = np.atleast_2d(np.asarray(self.quad, dtype=float))
        lin = np.atleast_1d(np.asarray(self.lin, dtype=float))
        if quad.shape != (lin.shape[0], lin.shape[0]):
            raise ContractError("quadratic value dimensions disagree")
        object.__setattr__(self, "quad", symmetrize(quad))
        object.__setattr__(self, "lin", lin)
        object.__setattr__(self, "const", float(self.const))

    def __call__(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.quad @ x + self.lin @ x + self.const)

    def expect(self, g: Gaussian) -> float:
        """Expectation under a Gaussian: mean term plus trace term."""
        return float(
            g.mean @ self.quad @ g.mean
            + np.trace(self.quad @ g.cov)
            + self.lin @ g.mean
            + self.const
        )


@dataclass(frozen=True, eq=False)
class QuadraticQ:
    """State-action quadratic

    Q(x, u) = x' qxx x + u' quu u + 2 x' qxu u + qx . x + qu . u + q0.
    """

    qxx: np.ndarray
    quu: np.ndarray
    qxu: np.ndarray
    qx: np.ndarray
    qu: np.ndarray
    q0: float

    def __post_init__(self):
        qxx = np.atleast_2d(np.asarray(self.qxx, dtype=float))
        quu = np.atleast_2d(np.asarray(self.quu, dtype=float))
        qxu = np.atleast_2d(np.asarray(self.qxu, dtype=float))
        qx = np.atleast_1d(np.asarray(self.qx, dtype=float))
        qu = np.atleast_1d(np.asarray(self.qu, dtype=float))
        d, m = qxu.shape
        if qxx.shape != (d, d) or quu.shape != (m, m):
            raise ContractError("Q blocks have inconsistent shapes")
        if qx.shape != (d,) or qu.shape != (m,):
            raise ContractError("Q linear terms have inconsistent shapes")
        object.__setattr__(self, "qxx", symmetrize(qxx))
        object.__setattr__(self, "quu", symmetrize(quu))
        object.__setattr__(self, "qxu", qxu)
        object.__setattr__(self, "qx", qx)
        object.__setattr__(self, "qu", qu)
        object.__setattr__(self, "q0", float(self.q0))

    def __call__(self, x: np.ndarray, u: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(
            x @ self.qxx @ x
            + u @ self.quu @ u
            + 2.0 * x @ self.qxu @ u
            + self.qx @ x
            + self.qu @ u
            + self.q0
        )


def terminal_value(cost: QuadraticCost) -> QuadraticValue:
    """Terminal cost expanded about the origin: (x - goal)' Ct (x - goal)."""
    ct, goal = cost.terminal_weight, cost.goal
    return QuadraticValue(ct, -2.0 * ct @ goal, float(goal @ ct @ goal))


def q_function(
    cost: QuadraticCost, value_next: QuadraticValue, belief: ParameterBelief
) -> QuadraticQ:
    """Stage cost plus expected continuation under an uncertain step.

    The continuation E[value_next(x') | x, u] is exact for quadratic values:
    the mean map contributes M' V M, parameter uncertainty adds the block
    trace sum tr(V Cov(Theta[:, i], Theta[:, j])) per regressor pair, and the
    process noise only shifts the constant.
    """
    d, m = cost.state_dim, cost.action_dim
    if belief.state_dim != d or belief.action_dim != m:
        raise ContractError("belief dimensions disagree with cost")
    vq, vl = value_next.quad, value_next.lin
    mean_map = belief.mean_matrix()
    blocks = belief.cov_blocks()
    hess = mean_map.T @ vq @ mean_map + np.einsum("rs,irjs->ij", vq, blocks)
    hess = symmetrize(hess)
    lin = mean_map.T @ vl
    const = value_next.const + float(np.trace(vq @ belief.noise_cov))

    cx, cu, goal = cost.state_weight, cost.action_weight, cost.goal
    return QuadraticQ(
        qxx=cx + hess[:d, :d],
        quu=cu + hess[d : d + m, d : d + m],
        qxu=hess[:d, d : d + m],
        qx=2.0 * hess[:d, -1] + lin[:d] - 2.0 * cx @ goal,
        qu=2.0 * hess[d : d + m, -1] + lin[d : d + m],
        q0=float(hess[-1, -1] + lin[-1] + const + goal @ cx @ goal),
    )


def expected_q_under_policy(q: QuadraticQ, step: PolicyStep) -> QuadraticValue:
    """Marginalize the action out of Q under the policy step.

    E_{u ~ N(Kx + k, S)} Q(x, u) is quadratic in x with a trace penalty for
    the policy noise.
    """
    gain, offset, cov = step.gain, step.offset, step.cov
    quad = q.qxx + gain.T @ q.quu @ gain + q.qxu @ gain + gain.T @ q.qxu.T
    lin = (
        q.qx
        + gain.T @ q.qu
        + 2.0 * gain.T @ (q.quu @ offset)
        + 2.0 * q.qxu @ offset
    )
    const = q.q0 + float(
        offset @ q.quu @ offset + q.qu @ offset + np.trace(q.quu @ cov)
    )
    return QuadraticValue(symmetrize(quad), lin, const)


def policy_step(
    prev: PolicyStep, q: QuadraticQ, alpha: float, t: int | None = None
) -> tuple[PolicyStep, QuadraticValue]:
    """Tilt one policy step by exp(-Q/alpha) and return it with its soft value.

    The new precision is prev_precision + (2/alpha) quu; if that matrix is not
    positive definite the temperature is inadmissible at this step and a
    BackwardPassError carrying the offending eigenvalue is raised. No jitter
    repair is attempted: the failure is meaningful.
    """
    if alpha <= 0.0:
        raise ContractError(f"temperature must be positive, got {alpha}")
    lam_prev = spd_inverse(prev.cov)
    precision = symmetrize(lam_prev + (2.0 / alpha) * q.quu)
    try:
        factor = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        min_eig = float(np.linalg.eigvalsh(precision).min())
        raise BackwardPassError(t, min_eig, alpha) from None

    # Natural parameters of the tilted conditional.
    gain_nat = lam_prev @ prev.gain - (2.0 / alpha) * q.qxu.T
    offset_nat = lam_prev @ prev.offset - (1.0 / alpha) * q.qu
    gain_new = cho_solve((factor, True), gain_nat)
    offset_new = cho_solve((factor, True), offset_nat)
    cov_new = symmetrize(cho_solve((factor, True), np.eye(prev.action_dim)))

    # Soft value V(x) = -alpha log Z(x): quadratic because Z is a Gaussian
    # integral of a quadratic exponent.
    half = alpha / 2.0
    vquad = q.qxx + half * (
        prev.gain.T @ lam_prev @ prev.gain - gain_nat.T @ gain_new
    )
    vlin = q.qx + alpha * (
        prev.gain.T @ (lam_prev @ prev.offset) - gain_nat.T @ offset_new
    )
    logdet_prev = 2.0 * float(np.sum(np.log(np.diag(_chol(lam_prev)))))
    logdet_new = 2.0 * float(np.sum(np.log(np.diag(factor))))
    vconst = (
        q.q0
        + half * float(prev.offset @ lam_prev @ prev.offset - offset_nat @ offset_new)
        - half * (logdet_prev - logdet_new)
    )
    new_step = PolicyStep(gain_new, offset_new, cov_new)
    return new_step, QuadraticValue(symmetrize(vquad), vlin, vconst)


def _chol(mat: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(mat)


def policy_backward(
    prev: Sequence[PolicyStep],
    beliefs: Sequence[ParameterBelief],
    cost: QuadraticCost,
    alpha: float,
) -> tuple[LinearGaussianPolicy, list[QuadraticValue]]:
    """Backward sweep of tilted updates; returns new policy and values.

    values[t] is the soft cost-to-go from state x at time t under the new
    policy; values[-1] is the terminal cost expansion.
    """
    if len(prev) != len(beliefs):
        raise ContractError(
            f"policy has {len(prev)} steps but beliefs has {len(beliefs)}"
        )
    horizon = len(prev) + 1
    values: list[QuadraticValue | None] = [None] * horizon
    values[-1] = terminal_value(cost)
    new_policy: list[PolicyStep | None] = [None] * len(prev)
    for t in reversed(range(len(prev))):
        q = q_function(cost, values[t + 1], beliefs[t])
        new_policy[t], values[t] = policy_step(prev[t], q, alpha, t)
    return list(new_policy), list(values)


def expected_policy_kl(
    new: PolicyStep, prev: PolicyStep, state: Gaussian
) -> float:
    """E_x KL(new(.|x) || prev(.|x)) under a Gaussian state marginal."""
    if new.action_dim != prev.action_dim or new.state_dim != prev.state_dim:
        raise ContractError("policy steps have mismatched dimensions")
    lam_prev = spd_inverse(prev.cov)
    dgain = new.gain - prev.gain
    doffset = new.offset - prev.offset
    shift = dgain @ state.mean + doffset
    logdet_prev = 2.0 * float(np.sum(np.log(np.diag(_chol(prev.cov)))))
    logdet_new = 2.0 * float(np.sum(np.log(np.diag(_chol(new.cov)))))
    kl = 0.5 * (
        float(np.trace(lam_prev @ new.cov))
        - new.action_dim
        + logdet_prev
        - logdet_new
        + float(shift @ lam_prev @ shift)
        + float(np.trace(dgain.T @ lam_prev @ dgain @ state.cov))
    )
    return max(kl, 0.0)


def policy_dual_and_grad(
    new: Sequence[PolicyStep],
    prev: Sequence[PolicyStep],
    traj: StateBeliefTrajectory,
    value1: QuadraticValue,
    mu1: Gaussian,
    epsilon: float,
    alpha: float,
) -> tuple[float, float]:
    """Dual value and gradient of the policy trust-region problem.

    The dual is E_{mu1}[V_1] - alpha * epsilon; its derivative in alpha is the
    summed expected KL (weighted by the new policy's state marginals) minus
    epsilon, by the envelope theorem.
    """
    dual = value1.expect(mu1) - alpha * epsilon
    kl_sum = sum(
        expected_policy_kl(new[t], prev[t], traj[t]) for t in range(len(new))
    )
    return dual, kl_sum - epsilon


@dataclass
class PolicyDualReport:
    """Outcome of one trust-region dual search."""

    alpha: float
    kl_sum: float
    epsilon: float
    dual_value: float
    active: bool
    iterations: int
    probes: list[tuple[float, float]] = field(default_factory=list)
    kl_per_step: np.ndarray | None = None


def optimize_policy(
    prev: Sequence[PolicyStep],
    beliefs: Sequence[ParameterBelief],
    mu1: Gaussian,
    cost: QuadraticCost,
    epsilon: float,
    *,
    alpha0: float = 100.0,
    tol: float = KL_MATCH_TOL,
    max_iters: int = 60,
    alpha_min: float = ALPHA_FLOOR,
    walk: float = 10.0,
) -> tuple[LinearGaussianPolicy, StateBeliefTrajectory, PolicyDualReport]:
    """Largest admissible policy update inside the KL trust region.

    Bracket and bisect the temperature on the monotone residual
    sum KL - epsilon. Returns the last feasible iterate, i.e. one with
    sum KL <= (1 + tol) * epsilon, preferring the most aggressive (smallest
    alpha) among those probed. When even the floor temperature stays inside
    the trust region the constraint is reported inactive.

    ``walk`` is the initial bracketing step factor; each miss squares it, so
    a warm ``alpha0`` can pass a small factor and keep the bracket tight
    without stalling when the guess is far off.
    """
    if epsilon <= 0.0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    if alpha0 <= 0.0 or alpha_min <= 0.0:
        raise ContractError("temperatures must be positive")
    if walk <= 1.0:
        raise ContractError(f"walk factor must exceed 1, got {walk}")

    probes: list[tuple[float, float]] = []
    best: tuple[float, LinearGaussianPolicy, StateBeliefTrajectory, list[QuadraticValue], list[float]] | None = None

    def evaluate(alpha: float):
        nonlocal best
        try:
            new, values = policy_backward(prev, beliefs, cost, alpha)
        except BackwardPassError:
            return None
        traj = forward_pass(mu1, new, beliefs)
        kls = [
            expected_policy_kl(new[t], prev[t], traj[t]) for t in range(len(new))
        ]
        kl_sum = float(sum(kls))
        probes.append((alpha, kl_sum))
        if kl_sum <= (1.0 + tol) * epsilon and (best is None or alpha < best[0]):
            best = (alpha, new, traj, values, kls)
        return new, values, traj, kl_sum

    # Walk the temperature up until the backward pass is admissible.
    alpha = alpha0
    factor = walk
    result = evaluate(alpha)
    guard = 0
    while result is None:
        alpha *= factor
        factor = min(factor * factor, 1e6)
        guard += 1
        if guard > 60:
            raise TrustRegionError("no admissible temperature found")
        result = evaluate(alpha)

    kl_sum = result[3]
    inactive = False
    lo = hi = None  # lo: alpha with kl > target, hi: alpha with kl < target
    if kl_sum > (1.0 + tol) * epsilon:
        lo = alpha
        factor = walk
        while True:
            alpha *= factor
            factor = min(factor * factor, 1e6)
            guard += 1
            if guard > 120:
                raise TrustRegionError("trust region bracketing did not terminate")
            result = evaluate(alpha)
            if result is None:
                raise TrustRegionError(
                    "backward pass failed while relaxing the temperature"
                )
            kl_sum = result[3]
            if kl_sum <= (1.0 + tol) * epsilon:
                hi = alpha
                break
            lo = alpha
    elif kl_sum < (1.0 - tol) * epsilon:
        hi = alpha
        factor = walk
        while True:
            if alpha <= alpha_min:
                inactive = True
                break
            alpha = max(alpha / factor, alpha_min)
            factor = min(factor * factor, 1e6)
            guard += 1
            if guard > 120:
                raise TrustRegionError("trust region bracketing did not terminate")
            result = evaluate(alpha)
            if result is None or result[3] > (1.0 + tol) * epsilon:
                lo = alpha
                break
            kl_sum = result[3]
            hi = alpha
            if kl_sum >= (1.0 - tol) * epsilon:
                break

    if not inactive and lo is not None and hi is not None:
        # Log-space bisection between the too-hot (lo) and feasible (hi)
        # temperatures; stop once a probe lands inside the tolerance band or
        # the bracket collapses.
        for _ in range(max_iters):
            mid = float(np.sqrt(lo * hi))
            result = evaluate(mid)
            if result is None or result[3] > (1.0 + tol) * epsilon:
                lo = mid
            else:
                hi = mid
                if result[3] >= (1.0 - tol) * epsilon:
                    break
            if hi / lo < 1.0 + 1e-13:
                break
    iterations = len(probes)

    if best is None:
        raise TrustRegionError(
            f"no feasible policy update found for epsilon {epsilon:.6g}"
        )
    alpha_star, new, traj, values, kls = best
    dual, grad = policy_dual_and_grad(
        new, prev, traj, values[0], mu1, epsilon, alpha_star
    )
    report = PolicyDualReport(
        alpha=alpha_star,
        kl_sum=float(sum(kls)),
        epsilon=epsilon,
        dual_value=dual,
        active=not inactive,
        iterations=iterations,
        probes=probes,
        kl_per_step=np.asarray(kls),
    )
    return new, traj, report
