"""Evaluation utilities: closed-form costs, robustness sweeps, rollouts.

Expected costs of linear-Gaussian policies under Gaussian state marginals are
exact for quadratic costs, so the closed forms here are the reference that
the Monte Carlo rollout cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, SolverError
from .gauss import Gaussian, blend_precision, kl_gaussian, safe_cholesky
from .model import ParameterBelief, QuadraticCost
from .policy import PolicyStep
from .propagate import StateBeliefTrajectory, forward_pass


def expected_cost_of_trajectory(
    traj: StateBeliefTrajectory,
    policy: Sequence[PolicyStep],
    cost: QuadraticCost,
) -> float:
    """Expected quadratic cost of a policy given its state marginals."""
    if len(traj) != len(policy) + 1:
        raise ContractError(
            f"trajectory of {len(traj)} states does not match {len(policy)} steps"
        )
    cx, cu, ct, goal = (
        cost.state_weight,
        cost.action_weight,
        cost.terminal_weight,
        cost.goal,
    )
    total = 0.0
    for t, step in enumerate(policy):
        mu = traj[t]
        err = mu.mean - goal
        mean_action = step.mean_action(mu.mean)
        action_cov = step.cov + step.gain @ mu.cov @ step.gain.T
        total += float(
            err @ cx @ err
            + np.trace(cx @ mu.cov)
            + mean_action @ cu @ mean_action
            + np.trace(cu @ action_cov)
        )
    err = traj[-1].mean - goal
    total += float(err @ ct @ err + np.trace(ct @ traj[-1].cov))
    return total


def expected_cost(
    policy: Sequence[PolicyStep],
    beliefs: Sequence[ParameterBelief],
    mu1: Gaussian,
    cost: QuadraticCost,
) -> float:
    """Expected cost of a policy under given parameter beliefs."""
    traj = forward_pass(mu1, policy, beliefs)
    return expected_cost_of_trajectory(traj, policy, cost)


@dataclass(frozen=True)
class SweepRow:
    """One point of a robustness sweep.

    ``weight`` is the interpolation weight toward the worst-case beliefs
    (values above 1 extrapolate); ``distance`` is the summed KL of the
    interpolated beliefs to the nominal. Invalid rows (extrapolation left the
    positive definite cone, or the rollout failed) carry NaNs and
    ``valid=False``.
    """

    weight: float
    distance: float
    cost_stochastic: float
    cost_robust: float
    valid: bool


def adversary_sweep(
    policy_stochastic: Sequence[PolicyStep],
    policy_robust: Sequence[PolicyStep],
    nominal: Sequence[ParameterBelief],
    worst: Sequence[ParameterBelief],
    mu1: Gaussian,
    cost: QuadraticCost,
    weights: Sequence[float],
) -> list[SweepRow]:
    """Evaluate both policies along the nominal-to-worst belief path.

    Per weight, each belief is interpolated between its nominal and worst
    version in information form; weights beyond 1 extrapolate past the worst
    case until positive definiteness fails, and such rows are marked invalid
    rather than fabricated.
    """
    if len(nominal) != len(worst):
        raise ContractError("nominal and worst belief sequences differ in length")
    rows = []
    for weight in weights:
        try:
            blended = [
                ParameterBelief(
                    blend_precision(w.dist, n.dist, float(weight)), n.noise_cov
                )
                for w, n in zip(worst, nominal)
            ]
            distance = float(
                sum(kl_gaussian(b.dist, n.dist) for b, n in zip(blended, nominal))
            )
            cost_s = expected_cost(policy_stochastic, blended, mu1, cost)
            cost_r = expected_cost(policy_robust, blended, mu1, cost)
        except SolverError:
            rows.append(
                SweepRow(float(weight), np.nan, np.nan, np.nan, False)
            )
            continue
        rows.append(SweepRow(float(weight), distance, cost_s, cost_r, True))
    return rows


def kl_profile(
    worst: Sequence[ParameterBelief], nominal: Sequence[ParameterBelief]
) -> np.ndarray:
    """Per-step divergence of the worst-case beliefs from the nominal."""
    if len(worst) != len(nominal):
        raise ContractError("belief sequences differ in length")
    return np.array(
        [kl_gaussian(w.dist, n.dist) for w, n in zip(worst, nominal)]
    )


@dataclass
class McRollout:
    """Sampled-cost statistics of a policy under parameter beliefs."""

    mean: float
    std_error: float
    costs: np.ndarray
    trajectories: np.ndarray | None = None


def mc_rollout(
    policy: Sequence[PolicyStep],
    beliefs: Sequence[ParameterBelief],
    mu1: Gaussian,
    cost: QuadraticCost,
    n_samples: int,
    seed: int,
    keep_trajectories: bool = False,
) -> McRollout:
    """Monte Carlo estimate of the expected cost under the belief model.

    Per sample and per step: draw parameters from the step's belief, an
    action from the policy, and process noise, then advance the state. A
    dedicated generator seeded from the argument makes runs reproducible.
    """
    if n_samples < 2:
        raise ContractError(f"need at least 2 samples, got {n_samples}")
    if len(policy) != len(beliefs):
        raise ContractError("policy and belief lengths disagree")
    rng = np.random.default_rng(seed)
    d = mu1.dim
    steps = len(policy)

    init_factor, _ = safe_cholesky(mu1.cov)
    states = mu1.mean + rng.standard_normal((n_samples, d)) @ init_factor.T
    costs = np.zeros(n_samples)
    kept = np.empty((n_samples, steps + 1, d)) if keep_trajectories else None
    if kept is not None:
        kept[:, 0] = states

    cx, cu, ct, goal = (
        cost.state_weight,
        cost.action_weight,
        cost.terminal_weight,
        cost.goal,
    )
    for t, (step, belief) in enumerate(zip(policy, beliefs)):
        err = states - goal
        costs += np.einsum("ki,ij,kj->k", err, cx, err)

        action_factor, _ = safe_cholesky(step.cov)
        m = step.action_dim
        actions = (
            states @ step.gain.T
            + step.offset
            + rng.standard_normal((n_samples, m)) @ action_factor.T
        )
        costs += np.einsum("ki,ij,kj->k", actions, cu, actions)

        theta_factor, _ = safe_cholesky(belief.dist.cov)
        thetas = (
            belief.dist.mean
            + rng.standard_normal((n_samples, belief.dist.dim)) @ theta_factor.T
        )
        p = belief.regressor_dim
        # Column-stacked parameters: reshape to (sample, regressor, state).
        theta_blocks = thetas.reshape(n_samples, p, d)
        taus = np.hstack([states, actions, np.ones((n_samples, 1))])
        noise_factor, _ = safe_cholesky(belief.noise_cov)
        states = (
            np.einsum("kp,kpd->kd", taus, theta_blocks)
            + rng.standard_normal((n_samples, d)) @ noise_factor.T
        )
        if kept is not None:
            kept[:, t + 1] = states

    err = states - goal
    costs += np.einsum("ki,ij,kj->k", err, ct, err)

    mean = float(costs.mean())
    std_error = float(costs.std(ddof=1) / np.sqrt(n_samples))
    return McRollout(mean, std_error, costs, kept)
