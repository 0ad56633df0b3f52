"""Gaussian primitives: divergences, interpolation, guarded factorizations.

Everything downstream manipulates Gaussians in moment form. Cholesky factors
are the only route to inverses and log-determinants here; dense inverses of
covariances never appear.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ContractError, FactorizationError

# Symmetry tolerance for covariance construction and the jitter ladder used
# when a factorization is allowed to repair mild indefiniteness.
SYMMETRY_TOL = 1e-9
JITTER_BASE = 1e-12
JITTER_ATTEMPTS = 6


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Project a square matrix onto its symmetric part."""
    return 0.5 * (mat + mat.T)


def safe_cholesky(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor with a bounded diagonal jitter ladder.

    Tries the factorization as given, then with jitter starting at
    ``1e-12 * trace(mat)/n`` and growing tenfold for at most six attempts,
    so the repair never exceeds ``1e-7 * trace(mat)/n``. For matrices with a
    non-positive trace the base scale falls back to 1.0 so that degenerate
    all-zero covariances still factor.

    Returns:
        (factor, jitter): lower-triangular ``L`` with ``L @ L.T`` equal to the
        input plus ``jitter`` times the identity, and the jitter applied.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise FactorizationError("matrix has non-finite entries")
    n = mat.shape[0]
    trace = float(np.trace(mat))
    scale = trace / n if trace > 0.0 else 1.0

    jitter = 0.0
    for attempt in range(JITTER_ATTEMPTS + 1):
        try:
            shifted = mat if jitter == 0.0 else mat + jitter * np.eye(n)
            return np.linalg.cholesky(shifted), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_BASE * scale if attempt == 0 else jitter * 10.0
    raise FactorizationError(
        f"matrix is not positive definite after jitter up to {jitter / 10.0:.3g}"
    )


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Multivariate normal in moment form.

    The covariance is symmetrized on construction; inputs whose asymmetry
    exceeds the tolerance (relative to the matrix scale) are rejected rather
    than silently repaired.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise ContractError(f"mean must be a vector, got shape {mean.shape}")
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise ContractError(
                f"covariance shape {cov.shape} does not match mean dimension {n}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ContractError("Gaussian moments must be finite")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if float(np.max(np.abs(cov - cov.T))) > SYMMETRY_TOL * scale:
            raise ContractError("covariance is not symmetric within tolerance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", symmetrize(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _unchecked(mean: np.ndarray, cov: np.ndarray) -> Gaussian:
    # Hot-path constructor for moments produced by the surrounding algebra:
    # callers guarantee float arrays, finiteness, and exact symmetry, so the
    # __post_init__ validation would be pure overhead in inner loops.
    g = object.__new__(Gaussian)
    object.__setattr__(g, "mean", mean)
    object.__setattr__(g, "cov", cov)
    return g


def _strict_cholesky(mat: np.ndarray, what: str) -> np.ndarray:
    # No jitter: singularity is a contract-level condition for divergences.
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"{what} is not positive definite") from exc


def spd_inverse(mat: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    factor = _strict_cholesky(np.asarray(mat, dtype=float), "matrix")
    return symmetrize(cho_solve((factor, True), np.eye(mat.shape[0])))


def kl_gaussian(p: Gaussian, q: Gaussian) -> float:
    """KL divergence KL(p || q) between two Gaussians.

    Computed from Cholesky factors (triangular solves and factor diagonals;
    no explicit inverses). Returns exactly 0.0 for componentwise-identical
    inputs and is clamped at zero against rounding.
    """
    if p.dim != q.dim:
        raise ContractError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if p is q or (np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov)):
        return 0.0
    factor_p = _strict_cholesky(p.cov, "p covariance")
    factor_q = _strict_cholesky(q.cov, "q covariance")
    half = solve_triangular(factor_q, factor_p, lower=True)
    whitened = solve_triangular(factor_q, q.mean - p.mean, lower=True)
    trace = float(np.sum(half * half))
    quad = float(whitened @ whitened)
    logdet = 2.0 * float(
        np.sum(np.log(np.diag(factor_q))) - np.sum(np.log(np.diag(factor_p)))
    )
    return max(0.5 * (trace + quad - p.dim + logdet), 0.0)


def kl_gaussian_many(ps: Sequence[Gaussian], qs: Sequence[Gaussian]) -> np.ndarray:
    """Stacked KL(p_t || q_t) over aligned sequences.

    Same mathematics as kl_gaussian, with the factorizations and solves
    batched across the sequence; componentwise-identical pairs yield exactly
    0.0 as in the scalar version.
    """
    if len(ps) != len(qs):
        raise ContractError(f"sequence lengths differ: {len(ps)} vs {len(qs)}")
    if not ps:
        return np.zeros(0)
    n = ps[0].dim
    for g in (*ps, *qs):
        if g.dim != n:
            raise ContractError(f"dimension mismatch: {g.dim} vs {n}")
    mean_p = np.stack([g.mean for g in ps])
    mean_q = np.stack([g.mean for g in qs])
    cov_p = np.stack([g.cov for g in ps])
    cov_q = np.stack([g.cov for g in qs])
    try:
        factor_p = np.linalg.cholesky(cov_p)
        factor_q = np.linalg.cholesky(cov_q)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("a covariance in the batch is not PD") from exc
    half = np.linalg.solve(factor_q, factor_p)
    whitened = np.linalg.solve(factor_q, (mean_q - mean_p)[..., None])[..., 0]
    trace = np.sum(half * half, axis=(1, 2))
    quad = np.sum(whitened * whitened, axis=1)
    diag_p = np.diagonal(factor_p, axis1=1, axis2=2)
    diag_q = np.diagonal(factor_q, axis1=1, axis2=2)
    logdet = 2.0 * (np.sum(np.log(diag_q), axis=1) - np.sum(np.log(diag_p), axis=1))
    out = np.maximum(0.5 * (trace + quad - n + logdet), 0.0)
    for i, (p, q) in enumerate(zip(ps, qs)):
        if p is q or (np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov)):
            out[i] = 0.0
    return out


def blend_precision(p: Gaussian, q: Gaussian, weight: float) -> Gaussian:
    """Combine two Gaussians linearly in information form.

    Precisions and precision-weighted means mix with weights ``weight`` on
    ``p`` and ``1 - weight`` on ``q``. Weights outside [0, 1] extrapolate and
    may leave the positive definite cone, which raises FactorizationError.
    """
    if p.dim != q.dim:
        raise ContractError(f"dimension mismatch: {p.dim} vs {q.dim}")
    lam_p = spd_inverse(p.cov)
    lam_q = spd_inverse(q.cov)
    lam = symmetrize(weight * lam_p + (1.0 - weight) * lam_q)
    shift = weight * (lam_p @ p.mean) + (1.0 - weight) * (lam_q @ q.mean)
    try:
        factor = np.linalg.cholesky(lam)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"blend weight {weight:.6g} leaves the positive definite cone"
        ) from exc
    cov = symmetrize(cho_solve((factor, True), np.eye(p.dim)))
    mean = cho_solve((factor, True), shift)
    return _unchecked(mean, cov)


def blend_precision_many(
    ps: Sequence[Gaussian], qs: Sequence[Gaussian], weight: float
) -> list[Gaussian]:
    """Batched blend_precision over aligned sequences.

    Same information-form mixture as the scalar version, with factorizations
    and solves stacked across the sequence.
    """
    if len(ps) != len(qs):
        raise ContractError(f"sequence lengths differ: {len(ps)} vs {len(qs)}")
    if not ps:
        return []
    n = ps[0].dim
    for g in (*ps, *qs):
        if g.dim != n:
            raise ContractError(f"dimension mismatch: {g.dim} vs {n}")
    eye = np.eye(n)
    try:
        half_p = np.linalg.solve(np.linalg.cholesky(np.stack([g.cov for g in ps])), eye)
        half_q = np.linalg.solve(np.linalg.cholesky(np.stack([g.cov for g in qs])), eye)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("a covariance in the batch is not PD") from exc
    lam_p = np.transpose(half_p, (0, 2, 1)) @ half_p
    lam_q = np.transpose(half_q, (0, 2, 1)) @ half_q
    lam = weight * lam_p + (1.0 - weight) * lam_q
    mean_p = np.stack([g.mean for g in ps])
    mean_q = np.stack([g.mean for g in qs])
    shift = weight * np.einsum("tij,tj->ti", lam_p, mean_p) + (
        1.0 - weight
    ) * np.einsum("tij,tj->ti", lam_q, mean_q)
    try:
        half = np.linalg.solve(np.linalg.cholesky(lam), eye)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"blend weight {weight:.6g} leaves the positive definite cone"
        ) from exc
    cov = np.transpose(half, (0, 2, 1)) @ half
    mean = np.einsum("tij,tj->ti", cov, shift)
    return [_unchecked(mean[t], cov[t]) for t in range(len(ps))]


def barycentric(p: Gaussian, q: Gaussian, weight: float) -> Gaussian:
    """Geodesic-style interpolation between Gaussians in information form.

    The result minimizes ``weight * KL(. || p) + (1 - weight) * KL(. || q)``
    over Gaussians. Endpoints are returned exactly.
    """
    if not 0.0 <= weight <= 1.0:
        raise ContractError(f"interpolation weight must lie in [0, 1], got {weight}")
    if weight == 0.0:
        return q
    if weight == 1.0:
        return p
    return blend_precision(p, q, weight)
