"""Outer alternation between the adversary and the policy update.

Each outer iteration first lets the adversary spend its divergence budget
against the current policy, then improves the policy inside its own KL trust
region under the resulting worst-case beliefs. Both temperature searches are
deterministic, so a fixed configuration reproduces bitwise-identical reports.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adversary import AdversaryReport, optimize_worst_case
from .errors import ContractError
from .evaluate import expected_cost_of_trajectory
from .gauss import Gaussian
from .model import ParameterBelief, Problem, linearize, nominal_belief
from .policy import (
    LinearGaussianPolicy,
    PolicyStep,
    optimize_policy,
    stationary_policy,
)
from .propagate import StateBeliefTrajectory, forward_pass


@dataclass(frozen=True)
class SolveConfig:
    """Solver settings shared by the robust and baseline solvers.

    ``epsilon`` bounds the summed policy KL per iteration, ``delta`` the
    adversary's summed divergence budget. ``outer_iters`` caps the number of
    alternations; the loop stops early once both trust regions are active and
    the worst-case cost stalls (relative change below ``dual_tol``).
    """

    epsilon: float
    delta: float
    outer_iters: int = 30
    sigma_pi: float = 1.0
    smoothing: float = 0.25
    inner_tol: float = 1e-3
    dual_tol: float = 1e-4
    budget_tol: float = 0.05
    relinearize: bool = False
    sigma_theta: float | None = None
    seed: int = 0
    alpha0: float = 100.0
    beta0: float = -1e6
    alpha_min: float = 1e-8
    max_dual_iters: int = 60
    inner_max_iters: int = 200
    fallback_rounds: int = 16
    fallback_budget_frac: float = 0.25
    warm_start: bool = False

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.delta < 0.0:
            raise ContractError(f"delta must be nonnegative, got {self.delta}")
        if self.outer_iters < 1:
            raise ContractError(
                f"outer_iters must be at least 1, got {self.outer_iters}"
            )
        if not 0.0 < self.smoothing <= 1.0:
            raise ContractError(
                f"smoothing must lie in (0, 1], got {self.smoothing}"
            )
        if self.sigma_pi <= 0.0:
            raise ContractError(f"sigma_pi must be positive, got {self.sigma_pi}")
        for name in ("inner_tol", "dual_tol", "budget_tol"):
            if getattr(self, name) <= 0.0:
                raise ContractError(f"{name} must be positive")
        if self.beta0 >= 0.0:
            raise ContractError(f"beta0 must be negative, got {self.beta0}")
        if self.alpha0 <= 0.0:
            raise ContractError(f"alpha0 must be positive, got {self.alpha0}")
        if self.relinearize and self.sigma_theta is not None and self.sigma_theta <= 0:
            raise ContractError("sigma_theta must be positive when set")


@dataclass
class IterationRecord:
    """Diagnostics of one outer iteration."""

    iteration: int
    cost_nominal: float
    cost_worst: float
    adversary_kl: float
    policy_kl: float
    alpha: float
    beta: float
    adversary_active: bool
    policy_active: bool
    adversary_mode: str
    wall_time: float


@dataclass
class SolveReport:
    """Per-iteration history of a solve, plus the final model used."""

    iterations: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    total_time: float = 0.0
    final_nominal: list[ParameterBelief] = field(default_factory=list)

    @property
    def last(self) -> IterationRecord:
        return self.iterations[-1]


def _initial_policy(problem: Problem, config: SolveConfig) -> LinearGaussianPolicy:
    return stationary_policy(
        problem.state_dim,
        problem.action_dim,
        problem.horizon - 1,
        config.sigma_pi,
    )


def _relinearized_nominal(
    problem: Problem,
    config: SolveConfig,
    policy: Sequence[PolicyStep],
    traj: StateBeliefTrajectory,
) -> list[ParameterBelief]:
    if config.sigma_theta is None:
        raise ContractError("relinearize requires sigma_theta in the config")
    states = np.array([mu.mean for mu in traj])
    actions = np.array(
        [policy[t].mean_action(traj[t].mean) for t in range(len(policy))]
    )
    steps = linearize(problem.system, states, actions)
    return nominal_belief(steps, config.sigma_theta)


def solve_robust(
    problem: Problem, config: SolveConfig
) -> tuple[LinearGaussianPolicy, list[ParameterBelief], SolveReport]:
    """Alternate worst-case beliefs and trust-region policy updates.

    Returns the final policy, the last worst-case beliefs, and the report.
    The adversary is cold-started from the nominal at every iteration unless
    ``warm_start`` is set, in which case the previous worst-case trajectory
    seeds its inner fixed point (the beliefs themselves always restart from
    the nominal, keeping each iteration a fresh budget-constrained tilt).
    """
    start = time.perf_counter()
    mu1 = problem.initial_belief
    cost = problem.cost
    policy = _initial_policy(problem, config)
    nominal = list(problem.nominal)
    worst = nominal
    report = SolveReport()
    prev_cost_worst = None
    worst_traj = None
    prev_beta = None
    prev_mode = None
    prev_round_betas = None
    prev_round_qs = None
    prev_alpha = None

    for k in range(config.outer_iters):
        tick = time.perf_counter()
        if config.delta > 0.0:
            warm_beta = None
            if config.warm_start and prev_beta is not None and np.isfinite(prev_beta):
                warm_beta = prev_beta
            worst, worst_traj, adv = optimize_worst_case(
                nominal,
                policy,
                mu1,
                cost,
                config.delta,
                smoothing=config.smoothing,
                inner_tol=config.inner_tol,
                budget_tol=config.budget_tol,
                beta0=config.beta0,
                max_probes=config.max_dual_iters,
                inner_max=config.inner_max_iters,
                fallback_rounds=config.fallback_rounds,
                fallback_frac=config.fallback_budget_frac,
                q_init=worst_traj if config.warm_start else None,
                beta_init=warm_beta,
                mode_init=prev_mode if config.warm_start else None,
                round_betas_init=prev_round_betas if config.warm_start else None,
                round_qs_init=prev_round_qs if config.warm_start else None,
            )
            prev_beta = adv.beta
            prev_mode = adv.mode
            prev_round_betas = adv.round_betas or None
            prev_round_qs = adv.round_qs or None
        else:
            worst = nominal
            adv = AdversaryReport(
                beta=-np.inf,
                kl_sum=0.0,
                delta=0.0,
                dual_value=0.0,
                active=False,
                mode="inactive",
                iterations=0,
                kl_per_step=np.zeros(len(nominal)),
            )

        warm_alpha = config.warm_start and prev_alpha is not None
        policy, traj, pol = optimize_policy(
            policy,
            worst,
            mu1,
            cost,
            config.epsilon,
            alpha0=prev_alpha if warm_alpha else config.alpha0,
            tol=config.budget_tol,
            max_iters=config.max_dual_iters,
            alpha_min=config.alpha_min,
            walk=1.3 if warm_alpha else 10.0,
        )
        prev_alpha = pol.alpha if pol.active else None

        cost_worst = expected_cost_of_trajectory(traj, policy, cost)
        nominal_traj = forward_pass(mu1, policy, nominal)
        cost_nominal = expected_cost_of_trajectory(nominal_traj, policy, cost)
        report.iterations.append(
            IterationRecord(
                iteration=k + 1,
                cost_nominal=cost_nominal,
                cost_worst=cost_worst,
                adversary_kl=adv.kl_sum,
                policy_kl=pol.kl_sum,
                alpha=pol.alpha,
                beta=adv.beta,
                adversary_active=adv.active,
                policy_active=pol.active,
                adversary_mode=adv.mode,
                wall_time=time.perf_counter() - tick,
            )
        )

        stalled = (
            prev_cost_worst is not None
            and abs(cost_worst - prev_cost_worst)
            <= config.dual_tol * max(1.0, abs(prev_cost_worst))
        )
        if adv.active and pol.active and stalled:
            report.converged = True
        prev_cost_worst = cost_worst

        if report.converged:
            break
        if config.relinearize and problem.system is not None:
            nominal = _relinearized_nominal(problem, config, policy, nominal_traj)

    report.total_time = time.perf_counter() - start
    report.final_nominal = nominal
    return policy, worst, report


def solve_stochastic(
    problem: Problem, config: SolveConfig
) -> tuple[LinearGaussianPolicy, SolveReport]:
    """Trust-region policy iteration under the fixed nominal beliefs.

    Runs optimize_policy repeatedly until the expected cost improves by less
    than ``dual_tol`` (relative) between iterations or the iteration budget
    is exhausted.
    """
    start = time.perf_counter()
    mu1 = problem.initial_belief
    cost = problem.cost
    policy = _initial_policy(problem, config)
    nominal = list(problem.nominal)
    report = SolveReport()
    prev_cost = None
    prev_alpha = None

    for k in range(config.outer_iters):
        tick = time.perf_counter()
        warm_alpha = config.warm_start and prev_alpha is not None
        policy, traj, pol = optimize_policy(
            policy,
            nominal,
            mu1,
            cost,
            config.epsilon,
            alpha0=prev_alpha if warm_alpha else config.alpha0,
            tol=config.budget_tol,
            max_iters=config.max_dual_iters,
            alpha_min=config.alpha_min,
            walk=1.3 if warm_alpha else 10.0,
        )
        prev_alpha = pol.alpha if pol.active else None
        cost_now = expected_cost_of_trajectory(traj, policy, cost)
        report.iterations.append(
            IterationRecord(
                iteration=k + 1,
                cost_nominal=cost_now,
                cost_worst=cost_now,
                adversary_kl=0.0,
                policy_kl=pol.kl_sum,
                alpha=pol.alpha,
                beta=-np.inf,
                adversary_active=False,
                policy_active=pol.active,
                adversary_mode="none",
                wall_time=time.perf_counter() - tick,
            )
        )
        if (
            prev_cost is not None
            and abs(cost_now - prev_cost) <= config.dual_tol * max(1.0, abs(prev_cost))
        ):
            report.converged = True
            break
        prev_cost = cost_now
        if config.relinearize and problem.system is not None:
            nominal = _relinearized_nominal(problem, config, policy, traj)

    report.total_time = time.perf_counter() - start
    report.final_nominal = nominal
    return policy, report


def attack(
    policy: Sequence[PolicyStep],
    problem: Problem,
    config: SolveConfig,
    nominal: Sequence[ParameterBelief] | None = None,
    beta_init: float | None = None,
) -> tuple[list[ParameterBelief], StateBeliefTrajectory, AdversaryReport]:
    """One full worst-case optimization against a fixed policy.

    ``nominal`` defaults to the problem's nominal beliefs; pass a solve's
    final beliefs to attack within its re-linearized model. ``beta_init``
    optionally seeds the temperature search, e.g. with a related solve's
    converged temperature.
    """
    base = list(problem.nominal if nominal is None else nominal)
    return optimize_worst_case(
        base,
        policy,
        problem.initial_belief,
        problem.cost,
        config.delta,
        smoothing=config.smoothing,
        inner_tol=config.inner_tol,
        budget_tol=config.budget_tol,
        beta0=config.beta0,
        max_probes=config.max_dual_iters,
        inner_max=config.inner_max_iters,
        fallback_rounds=config.fallback_rounds,
        fallback_frac=config.fallback_budget_frac,
        beta_init=beta_init,
    )
