"""Belief-space rollout of a linear-Gaussian policy under model uncertainty.

The state belief is pushed through one step by a spherical-radial cubature
rule on the augmented vector [x; u; xi], where xi is a standard normal noise
channel of state dimension. Each cubature point is mapped through the mean
dynamics and scaled by the Cholesky factor of its own regressor-dependent
noise covariance, then the propagated points are moment-matched.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ContractError, NumericalError
from .gauss import Gaussian, _unchecked, safe_cholesky, symmetrize
from .model import ParameterBelief

if TYPE_CHECKING:  # pragma: no cover
    from .policy import PolicyStep

# A state-belief trajectory is the list [mu_1, ..., mu_T].
StateBeliefTrajectory = list[Gaussian]


def augment(mu: Gaussian, step: "PolicyStep") -> Gaussian:
    """Joint Gaussian over [x; u; xi] under the policy step at belief mu.

    The action block is the policy pushed through the state marginal; the
    noise channel xi is standard normal and independent of both.
    """
    d = mu.dim
    m = step.gain.shape[0]
    if step.gain.shape[1] != d:
        raise ContractError(
            f"policy gain shape {step.gain.shape} does not match state dim {d}"
        )
    mean = np.concatenate([mu.mean, step.gain @ mu.mean + step.offset, np.zeros(d)])
    cov = np.zeros((d + m + d, d + m + d))
    cross = mu.cov @ step.gain.T
    cov[:d, :d] = mu.cov
    cov[:d, d : d + m] = cross
    cov[d : d + m, :d] = cross.T
    cov[d : d + m, d : d + m] = step.cov + step.gain @ cross
    cov[d + m :, d + m :] = np.eye(d)
    return _unchecked(mean, symmetrize(cov))


def cubature_points(g: Gaussian) -> tuple[np.ndarray, np.ndarray]:
    """Spherical-radial cubature points and weights for a Gaussian.

    2n points at mean +- sqrt(n) * L[:, i] with equal weights; they reproduce
    the mean exactly and the covariance up to the factorization jitter.
    """
    n = g.dim
    try:
        factor = np.linalg.cholesky(g.cov)
    except np.linalg.LinAlgError:
        factor, _ = safe_cholesky(g.cov)
    spread = np.sqrt(float(n)) * factor.T  # row i is sqrt(n) * L[:, i]
    points = np.vstack([g.mean + spread, g.mean - spread])
    weights = np.full(2 * n, 0.5 / n)
    return points, weights


def cubature_step(
    mu: Gaussian,
    step: "PolicyStep",
    belief: ParameterBelief,
    t: int | None = None,
) -> Gaussian:
    """Propagate a state belief through one uncertain dynamics step.

    The regressor-dependent noise scale sqrt(noise_cov + spread(tau)) is
    recomputed at every cubature point before it multiplies that point's xi
    block.
    """
    d = mu.dim
    m = step.gain.shape[0]
    p = belief.regressor_dim
    if belief.state_dim != d or p != d + m + 1:
        raise ContractError(
            f"belief regressor dimension {p} does not match state/action ({d}, {m})"
        )

    joint = augment(mu, step)
    points, weights = cubature_points(joint)
    taus = np.hstack(
        [points[:, : d + m], np.ones((points.shape[0], 1))]
    )  # [x; u; 1] per point
    xis = points[:, d + m :]

    mean_map = belief.mean_matrix()
    centers = taus @ mean_map.T
    blocks = belief.cov_blocks()
    # Contraction spread[k] = sum_ij tau_i tau_j blocks[i,:,j,:] arranged as
    # one matrix product over flattened index pairs.
    kernel = blocks.transpose(0, 2, 1, 3).reshape(p * p, d * d)
    tt = (taus[:, :, None] * taus[:, None, :]).reshape(-1, p * p)
    spread = (tt @ kernel).reshape(-1, d, d)
    covs = belief.noise_cov + 0.5 * (spread + spread.transpose(0, 2, 1))
    try:
        factors = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        # Some point-wise covariance is degenerate; repair each through the
        # jitter ladder instead of failing outright.
        factors = np.empty_like(covs)
        for k in range(covs.shape[0]):
            factors[k], _ = safe_cholesky(covs[k])

    samples = centers + np.einsum("krs,ks->kr", factors, xis)
    if not np.all(np.isfinite(samples)):
        raise NumericalError("cubature points became non-finite", t)
    mean = weights @ samples
    centered = samples - mean
    cov = (centered * weights[:, None]).T @ centered
    return _unchecked(mean, symmetrize(cov))


def forward_pass(
    mu1: Gaussian,
    policy: Sequence["PolicyStep"],
    beliefs: Sequence[ParameterBelief],
) -> StateBeliefTrajectory:
    """Roll the initial state belief forward under policy and beliefs.

    Returns [mu_1, ..., mu_T] with T = len(policy) + 1; the first element is
    the initial belief itself.
    """
    if len(policy) != len(beliefs):
        raise ContractError(
            f"policy has {len(policy)} steps but beliefs has {len(beliefs)}"
        )
    traj = [mu1]
    for t, (step, belief) in enumerate(zip(policy, beliefs)):
        traj.append(cubature_step(traj[-1], step, belief, t))
    return traj
