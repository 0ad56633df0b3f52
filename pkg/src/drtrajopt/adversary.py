"""Worst-case parameter distributions inside a summed KL budget.

Per step the adversary multiplies the nominal parameter belief by
``exp(-W_t(theta) / beta)`` with temperature ``beta < 0``, where ``W_t`` is
the expected continuation cost as a quadratic in the parameters under the
current state-action marginal. The tilted belief stays Gaussian only while
the tilted precision is positive definite; losing that is a semantic
existence failure, not a conditioning issue.

The temperature solves the dual of the budget constraint by bracketing and
bisection. Because ``W_t`` itself depends on the state marginals that the
tilted beliefs induce, each temperature probe runs a small fixed point:
backward tilt, forward rollout, then a damped information-form interpolation
of the rollout into the marginals used for weighting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve

from .errors import (
    AdversaryInfeasibleError,
    ContractError,
    ExistenceError,
)
from .gauss import (
    Gaussian,
    _unchecked,
    blend_precision_many,
    kl_gaussian,
    kl_gaussian_many,
    spd_inverse,
    symmetrize,
)
from .model import ParameterBelief, QuadraticCost
from .policy import (
    PolicyStep,
    QuadraticValue,
    expected_q_under_policy,
    q_function,
    terminal_value,
)
from .propagate import StateBeliefTrajectory, forward_pass

# W functions share the quadratic-value layout, just over parameters.
WFunction = QuadraticValue

BUDGET_TOL = 0.05
STALL_ROUNDS = 5


def w_function(
    value_next: QuadraticValue,
    mu: Gaussian,
    step: PolicyStep,
    noise_cov: np.ndarray,
) -> WFunction:
    """Expected continuation cost as a quadratic in the parameter vector.

    W(theta) = E_{x,u}[ value_next(Theta tau) ] + trace(V Sigma_noise), with
    the expectation over the joint state-action marginal induced by the
    policy step at mu. With column-stacked parameters the quadratic term is
    E[tau tau'] (x) V and the linear term is E[tau] (x) v.
    """
    d = mu.dim
    m = step.action_dim
    mean_action = step.mean_action(mu.mean)
    s_tau = np.concatenate([mu.mean, mean_action, [1.0]])
    cov_tau = np.zeros((d + m + 1, d + m + 1))
    cross = mu.cov @ step.gain.T
    cov_tau[:d, :d] = mu.cov
    cov_tau[:d, d : d + m] = cross
    cov_tau[d : d + m, :d] = cross.T
    cov_tau[d : d + m, d : d + m] = step.cov + step.gain @ cross
    second_moment = symmetrize(cov_tau + np.outer(s_tau, s_tau))

    # Kronecker products written as broadcast outer products; same layout,
    # far less overhead at these block sizes.
    v = value_next.quad
    n = second_moment.shape[0] * d
    quad = (second_moment[:, None, :, None] * v[None, :, None, :]).reshape(n, n)
    lin = (s_tau[:, None] * value_next.lin[None, :]).reshape(n)
    const = value_next.const + float(np.trace(value_next.quad @ noise_cov))
    return WFunction(symmetrize(quad), lin, const)


def worst_case_step(
    nominal: ParameterBelief,
    w: WFunction,
    beta: float,
    t: int | None = None,
    natural: tuple[np.ndarray, np.ndarray] | None = None,
) -> ParameterBelief:
    """Tilt one nominal parameter belief by exp(-W/beta).

    Completing the square gives precision Lambda + (2/beta) W_quad and
    precision-mean Lambda mu - (1/beta) W_lin. A non-positive-definite
    precision raises ExistenceError with the offending eigenvalue; no jitter
    repair is attempted because the failure means no Gaussian worst case
    exists at this temperature. ``natural`` optionally carries the nominal's
    precomputed (precision, precision @ mean) pair.
    """
    if beta >= 0.0:
        raise ContractError(f"adversary temperature must be negative, got {beta}")
    n = nominal.dist.dim
    if w.quad.shape != (n, n):
        raise ContractError(
            f"W dimension {w.quad.shape} does not match belief dimension {n}"
        )
    if not np.any(w.quad) and not np.any(w.lin):
        return nominal
    if natural is None:
        lam = spd_inverse(nominal.dist.cov)
        lam_mean = lam @ nominal.dist.mean
    else:
        lam, lam_mean = natural
    precision = symmetrize(lam + (2.0 / beta) * w.quad)
    try:
        factor = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        min_eig = float(np.linalg.eigvalsh(precision).min())
        raise ExistenceError(t, min_eig, beta) from None
    shift = lam_mean - (1.0 / beta) * w.lin
    mean = cho_solve((factor, True), shift)
    cov = symmetrize(cho_solve((factor, True), np.eye(n)))
    return nominal.with_dist(_unchecked(mean, cov))


def _natural_params(
    beliefs: Sequence[ParameterBelief],
) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for belief in beliefs:
        lam = spd_inverse(belief.dist.cov)
        out.append((lam, lam @ belief.dist.mean))
    return out


def param_backward(
    q_traj: StateBeliefTrajectory,
    policy: Sequence[PolicyStep],
    cost: QuadraticCost,
    nominal: Sequence[ParameterBelief],
    beta: float,
    natural: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
) -> tuple[list[ParameterBelief], list[QuadraticValue]]:
    """Backward sweep of worst-case tilts against fixed state marginals.

    Returns the tilted beliefs and the parameter-side values v[t], where v[t]
    is the expected cost-to-go from x at time t under the fixed policy and
    the tilted beliefs (policy evaluation, not improvement).
    """
    horizon = len(q_traj)
    if len(policy) != horizon - 1 or len(nominal) != horizon - 1:
        raise ContractError(
            f"got {len(policy)} policy steps and {len(nominal)} beliefs for "
            f"a trajectory of {horizon} states"
        )
    values: list[QuadraticValue | None] = [None] * horizon
    values[-1] = terminal_value(cost)
    worst: list[ParameterBelief | None] = [None] * (horizon - 1)
    for t in reversed(range(horizon - 1)):
        w = w_function(values[t + 1], q_traj[t], policy[t], nominal[t].noise_cov)
        worst[t] = worst_case_step(
            nominal[t], w, beta, t, natural[t] if natural is not None else None
        )
        q = q_function(cost, values[t + 1], worst[t])
        values[t] = expected_q_under_policy(q, policy[t])
    return list(worst), list(values)


def param_dual_and_grad(
    value1: QuadraticValue,
    mu1: Gaussian,
    worst: Sequence[ParameterBelief],
    nominal: Sequence[ParameterBelief],
    beta: float,
    delta: float,
) -> tuple[float, float]:
    """Dual value and gradient of the adversary's budget constraint.

    F = E_{mu1}[v_1] + beta * (sum KL - delta); dF/dbeta = sum KL - delta at
    a converged inner fixed point, by the envelope theorem.
    """
    kl_sum = sum(
        kl_gaussian(w.dist, n.dist) for w, n in zip(worst, nominal)
    )
    dual = value1.expect(mu1) + beta * (kl_sum - delta)
    return dual, float(kl_sum - delta)


@dataclass
class AdversaryState:
    """Converged inner state at one temperature."""

    beta: float
    worst: list[ParameterBelief]
    v_theta: list[QuadraticValue]
    q_traj: StateBeliefTrajectory
    kl_per_step: np.ndarray

    @property
    def kl_sum(self) -> float:
        return float(self.kl_per_step.sum())


@dataclass
class AdversaryReport:
    """Outcome of one worst-case optimization."""

    beta: float
    kl_sum: float
    delta: float
    dual_value: float
    active: bool
    mode: str  # "bisect", "fallback", or "inactive"
    iterations: int
    rounds: int = 0
    probes: list[tuple[float, float]] = field(default_factory=list)
    kl_per_step: np.ndarray | None = None
    round_betas: list[float] = field(default_factory=list)
    round_qs: list[StateBeliefTrajectory] = field(default_factory=list)


class _Oscillation(Exception):
    # Internal signal: the inner fixed point stopped contracting.
    pass


def _inner_fixed_point(
    beta: float,
    q_traj: StateBeliefTrajectory,
    policy: Sequence[PolicyStep],
    cost: QuadraticCost,
    prior: Sequence[ParameterBelief],
    mu1: Gaussian,
    smoothing: float,
    inner_tol: float,
    inner_max: int,
    natural: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
) -> AdversaryState:
    """Self-consistent tilt at a fixed temperature.

    Alternates backward tilts against the current marginals with forward
    rollouts under the tilted beliefs, interpolating the marginals toward the
    rollout in information form until the per-step KL gap closes. The blend
    weight ramps up while successive sweeps keep improving the residual and
    drops back to the base weight on any regression, so smoothly contracting
    instances finish in a few sweeps while oscillatory ones keep the damping.
    """
    q = list(q_traj)
    best_resid = np.inf
    stalls = 0
    # First improving sweep lands exactly on the base weight.
    weight = smoothing / 1.5
    cap = max(0.75, smoothing)
    for _ in range(inner_max):
        worst, values = param_backward(q, policy, cost, prior, beta, natural)
        mu = forward_pass(mu1, policy, worst)
        resid = float(kl_gaussian_many(q, mu).max())
        if resid <= inner_tol:
            kls = kl_gaussian_many(
                [w.dist for w in worst], [n.dist for n in prior]
            )
            return AdversaryState(beta, worst, values, mu, kls)
        # A round counts as a stall only when it fails to improve on the best
        # residual seen; transient wiggles on a converging path do not.
        if resid >= best_resid:
            stalls += 1
            if stalls >= STALL_ROUNDS:
                raise _Oscillation(f"inner residual stuck at {resid:.3g}")
            weight = smoothing
        else:
            best_resid = resid
            stalls = 0
            weight = min(cap, weight * 1.5)
        q = [mu1] + blend_precision_many(mu[1:], q[1:], weight)
    raise _Oscillation(f"inner fixed point did not converge below {inner_tol:.3g}")


def optimize_worst_case(
    nominal: Sequence[ParameterBelief],
    policy: Sequence[PolicyStep],
    mu1: Gaussian,
    cost: QuadraticCost,
    delta: float,
    *,
    smoothing: float = 0.25,
    inner_tol: float = 1e-3,
    budget_tol: float = BUDGET_TOL,
    beta0: float = -1e6,
    max_probes: int = 60,
    inner_max: int = 200,
    fallback_rounds: int = 16,
    fallback_frac: float = 0.25,
    q_init: StateBeliefTrajectory | None = None,
    beta_init: float | None = None,
    mode_init: str | None = None,
    round_betas_init: Sequence[float] | None = None,
    round_qs_init: Sequence[StateBeliefTrajectory] | None = None,
) -> tuple[list[ParameterBelief], StateBeliefTrajectory, AdversaryReport]:
    """Worst-case beliefs whose summed KL to the nominal meets the budget.

    Probes the temperature from beta0 (weak tilt) toward zero, bracketing the
    budget residual and bisecting in log magnitude. Any existence failure at
    a probed temperature, or an inner fixed point that stops contracting,
    switches to a sequential small-budget fallback that composes tilts around
    the running iterate until the cumulative divergence reaches the budget.
    ``q_init`` optionally seeds the inner fixed point's state marginals and
    ``beta_init`` the first temperature probe (warm starts); the tilts
    themselves always restart from the nominal. ``mode_init="fallback"``
    skips the single-tilt search outright, and ``round_betas_init`` /
    ``round_qs_init`` seed the fallback's per-round temperatures and
    marginals, for callers repeating structurally similar solves
    (warm-started outer loops).
    """
    nominal = list(nominal)
    if delta < 0.0:
        raise ContractError(f"delta must be nonnegative, got {delta}")
    if not 0.0 < smoothing <= 1.0:
        raise ContractError(f"smoothing must lie in (0, 1], got {smoothing}")
    if beta0 >= 0.0:
        raise ContractError(f"beta0 must be negative, got {beta0}")
    if beta_init is not None and beta_init >= 0.0:
        raise ContractError(f"beta_init must be negative, got {beta_init}")

    nominal_traj = forward_pass(mu1, policy, nominal)
    if delta == 0.0:
        report = AdversaryReport(
            beta=-np.inf,
            kl_sum=0.0,
            delta=0.0,
            dual_value=0.0,
            active=False,
            mode="inactive",
            iterations=0,
            kl_per_step=np.zeros(len(nominal)),
        )
        return nominal, nominal_traj, report

    probes: list[tuple[float, float]] = []
    best: AdversaryState | None = None
    upper = (1.0 + budget_tol) * delta
    lower = (1.0 - budget_tol) * delta

    q_warm = list(q_init) if q_init is not None else nominal_traj
    if len(q_warm) != len(nominal) + 1:
        raise ContractError("q_init length does not match the horizon")
    natural = _natural_params(nominal)
    last_ok = beta_init if beta_init is not None else beta0

    def evaluate(beta: float) -> AdversaryState:
        nonlocal best, q_warm, last_ok
        state = _inner_fixed_point(
            beta, q_warm, policy, cost, nominal, mu1, smoothing, inner_tol,
            inner_max, natural,
        )
        q_warm = state.q_traj
        last_ok = beta
        probes.append((beta, state.kl_sum))
        if state.kl_sum <= upper and (best is None or state.kl_sum > best.kl_sum):
            best = state
        return state

    try:
        if mode_init == "fallback":
            raise _Oscillation("caller-reported single-tilt failure")
        beta = beta_init if beta_init is not None else beta0
        state = evaluate(beta)
        lo = hi = None  # lo: weak side (kl < budget), hi: strong side (kl > budget)
        if state.kl_sum > upper:
            hi = beta
            while True:
                beta *= 10.0
                if len(probes) > max_probes:
                    raise AdversaryInfeasibleError(
                        "budget bracketing did not terminate"
                    )
                state = evaluate(beta)
                if state.kl_sum <= upper:
                    lo = beta
                    break
                hi = beta
        elif state.kl_sum < lower:
            lo = beta
            while True:
                beta /= 10.0
                if len(probes) > max_probes:
                    raise AdversaryInfeasibleError(
                        "budget bracketing did not terminate"
                    )
                state = evaluate(beta)
                if state.kl_sum > upper:
                    hi = beta
                    break
                lo = beta
                if state.kl_sum >= lower:
                    break

        if lo is not None and hi is not None and not lower <= state.kl_sum <= upper:
            while len(probes) < max_probes:
                mid = -float(np.sqrt(lo * hi))
                state = evaluate(mid)
                if state.kl_sum > upper:
                    hi = mid
                else:
                    lo = mid
                    if state.kl_sum >= lower:
                        break
                # A relatively tight bracket that still has not activated the
                # budget means no single tilt can: the feasible side is capped
                # by the existence boundary. Composition takes over.
                if abs(hi) / abs(lo) > 1.0 - 1e-3:
                    if best is None or best.kl_sum < lower:
                        raise _Oscillation(
                            "budget not attainable by a single tilt"
                        )
                    break
    except (ExistenceError, _Oscillation):
        return _fallback(
            nominal,
            policy,
            mu1,
            cost,
            delta,
            q_init=nominal_traj,
            smoothing=smoothing,
            inner_tol=inner_tol,
            budget_tol=budget_tol,
            beta0=beta0,
            beta_init=last_ok,
            max_probes=max_probes,
            inner_max=inner_max,
            rounds_max=fallback_rounds,
            round_frac=fallback_frac,
            probes=probes,
            round_betas_init=round_betas_init,
            round_qs_init=round_qs_init,
        )

    if best is None:
        raise AdversaryInfeasibleError(
            f"no admissible temperature found for budget {delta:.6g}"
        )
    dual, _ = param_dual_and_grad(
        best.v_theta[0], mu1, best.worst, nominal, best.beta, delta
    )
    report = AdversaryReport(
        beta=best.beta,
        kl_sum=best.kl_sum,
        delta=delta,
        dual_value=dual,
        active=best.kl_sum >= lower,
        mode="bisect",
        iterations=len(probes),
        probes=probes,
        kl_per_step=best.kl_per_step,
    )
    return best.worst, best.q_traj, report


def _fallback(
    nominal: list[ParameterBelief],
    policy: Sequence[PolicyStep],
    mu1: Gaussian,
    cost: QuadraticCost,
    delta: float,
    *,
    q_init: StateBeliefTrajectory,
    smoothing: float,
    inner_tol: float,
    budget_tol: float,
    beta0: float,
    beta_init: float | None,
    max_probes: int,
    inner_max: int,
    rounds_max: int,
    round_frac: float,
    probes: list[tuple[float, float]],
    round_betas_init: Sequence[float] | None = None,
    round_qs_init: Sequence[StateBeliefTrajectory] | None = None,
) -> tuple[list[ParameterBelief], StateBeliefTrajectory, AdversaryReport]:
    """Sequential small-budget tilts composed around the running iterate.

    Each round spends at most round_frac * delta of divergence relative to
    the current iterate, chosen so the cumulative divergence to the nominal
    never overshoots the budget. Existence failures inside a round are
    bracket information (the temperature was too close to zero), so the
    rounds themselves cannot fail that way.
    """
    upper = (1.0 + budget_tol) * delta
    lower = (1.0 - budget_tol) * delta
    round_budget = round_frac * delta

    current = list(nominal)
    q_traj = q_init
    cumulative = 0.0
    state: AdversaryState | None = None
    round_start = beta_init if beta_init is not None else beta0
    round_betas: list[float] = []
    round_qs: list[StateBeliefTrajectory] = []

    for round_index in range(rounds_max):
        natural = _natural_params(current)
        # The same round's converged marginals from a previous structurally
        # similar solve sit much closer to this round's fixed point than the
        # running trajectory does, so prefer them as the seed.
        if round_qs_init is not None and round_index < len(round_qs_init):
            q_probe = round_qs_init[round_index]
        else:
            q_probe = q_traj

        def evaluate_round(beta_probe: float):
            # Returns (state, round_kl, cumulative_kl) or None when the tilt
            # does not exist / does not settle at this temperature. Marginals
            # thread from the last settled probe in this round.
            nonlocal q_probe
            try:
                trial = _inner_fixed_point(
                    beta_probe,
                    q_probe,
                    policy,
                    cost,
                    current,
                    mu1,
                    smoothing,
                    inner_tol,
                    inner_max,
                    natural,
                )
            except (ExistenceError, _Oscillation):
                return None
            q_probe = trial.q_traj
            total = float(
                kl_gaussian_many(
                    [w.dist for w in trial.worst], [n.dist for n in nominal]
                ).sum()
            )
            probes.append((beta_probe, total))
            return trial, trial.kl_sum, total

        def gauge(round_kl: float, total_kl: float) -> float:
            return max(round_kl / round_budget, total_kl / delta)

        def settled(rkl: float, tkl: float) -> bool:
            # A round is good enough when it lands in the tight band, or
            # when it spends most of its allotment while the cumulative
            # target is still out of reach (a later round finishes).
            g = gauge(rkl, tkl)
            if (1.0 - budget_tol) <= g <= (1.0 + budget_tol):
                return True
            return g <= 1.0 + budget_tol and tkl < lower and rkl >= 0.7 * round_budget

        # Bracket the round's temperature, preferring the same round's
        # accepted value from a previous structurally similar solve, then the
        # previous round's (rounds spend similar budgets, so it is usually
        # within a decade), walking toward or away from zero as needed. A
        # hinted start is already near the target, so its walk accelerates
        # from a small factor instead of jumping whole decades.
        hinted = round_betas_init is not None and round_index < len(round_betas_init)
        if hinted:
            beta = float(round_betas_init[round_index])
        else:
            beta = round_start
        factor = 1.6 if hinted else 10.0
        result = evaluate_round(beta)
        guard = 0
        while result is None:
            beta *= factor
            factor = min(factor * factor, 10.0)
            guard += 1
            if guard > 60:
                raise AdversaryInfeasibleError(
                    "fallback could not find an admissible temperature"
                )
            result = evaluate_round(beta)

        lo = hi = None
        g_lo = g_hi = None
        trial, round_kl, total_kl = result
        factor = 1.6 if hinted else 10.0
        if settled(round_kl, total_kl):
            pass
        elif gauge(round_kl, total_kl) > 1.0 + budget_tol:
            hi, g_hi = beta, gauge(round_kl, total_kl)
            while True:
                beta *= factor
                factor = min(factor * factor, 10.0)
                guard += 1
                if guard > 120:
                    raise AdversaryInfeasibleError("fallback bracketing stalled")
                result = evaluate_round(beta)
                if result is None:
                    raise AdversaryInfeasibleError(
                        "fallback lost existence while weakening the tilt"
                    )
                trial, round_kl, total_kl = result
                if gauge(round_kl, total_kl) <= 1.0 + budget_tol:
                    lo, g_lo = beta, gauge(round_kl, total_kl)
                    break
                hi, g_hi = beta, gauge(round_kl, total_kl)
        else:
            lo, g_lo = beta, gauge(round_kl, total_kl)
            while True:
                beta /= factor
                factor = min(factor * factor, 10.0)
                guard += 1
                if guard > 120:
                    raise AdversaryInfeasibleError("fallback bracketing stalled")
                result = evaluate_round(beta)
                if result is None or gauge(result[1], result[2]) > 1.0 + budget_tol:
                    hi = beta
                    g_hi = None if result is None else gauge(result[1], result[2])
                    break
                trial, round_kl, total_kl = result
                lo, g_lo = beta, gauge(round_kl, total_kl)
                if settled(round_kl, total_kl):
                    break

        if lo is not None and hi is not None:
            iters = 0
            while not settled(round_kl, total_kl):
                iters += 1
                if iters > max_probes:
                    break
                # Secant on log-temperature against log-gauge homes in much
                # faster than halving when both bracket ends were evaluated;
                # existence failures leave the strong end gauge-less, where
                # only the geometric midpoint is safe.
                mid = None
                if g_lo is not None and g_hi is not None and 0.0 < g_lo < g_hi:
                    x_lo, x_hi = np.log(-lo), np.log(-hi)
                    f_lo, f_hi = np.log(g_lo), np.log(g_hi)
                    if f_hi > f_lo:
                        x = x_lo - f_lo * (x_hi - x_lo) / (f_hi - f_lo)
                        margin = 0.05 * (x_lo - x_hi)
                        x = min(max(x, x_hi + margin), x_lo - margin)
                        mid = -float(np.exp(x))
                if mid is None:
                    mid = -float(np.sqrt(lo * hi))
                result = evaluate_round(mid)
                if result is None or gauge(result[1], result[2]) > 1.0 + budget_tol:
                    hi = mid
                    g_hi = None if result is None else gauge(result[1], result[2])
                else:
                    trial, round_kl, total_kl = result
                    lo, g_lo = mid, gauge(round_kl, total_kl)
                # Stop refining once the bracket is relatively tight: the
                # existence boundary caps what this round can spend, and the
                # remaining gap rolls over to the next round.
                if abs(hi) / abs(lo) > 1.0 - 1e-3:
                    break

        if trial is None or round_kl <= 1e-12 * max(delta, 1.0):
            raise AdversaryInfeasibleError(
                f"fallback round {round_index + 1} could not make progress"
            )

        current = trial.worst
        q_traj = trial.q_traj
        state = trial
        cumulative = total_kl
        round_start = trial.beta
        round_betas.append(trial.beta)
        round_qs.append(trial.q_traj)
        if cumulative >= lower:
            break

    if state is None or cumulative < lower or cumulative > upper:
        raise AdversaryInfeasibleError(
            f"fallback ended at divergence {cumulative:.6g} outside "
            f"[{lower:.6g}, {upper:.6g}]"
        )

    kls = kl_gaussian_many([w.dist for w in current], [n.dist for n in nominal])
    dual, _ = param_dual_and_grad(
        state.v_theta[0], mu1, current, nominal, state.beta, delta
    )
    report = AdversaryReport(
        beta=state.beta,
        kl_sum=cumulative,
        delta=delta,
        dual_value=dual,
        active=True,
        mode="fallback",
        iterations=len(probes),
        rounds=round_index + 1,
        probes=probes,
        kl_per_step=kls,
        round_betas=round_betas,
        round_qs=round_qs,
    )
    return current, state.q_traj, report
