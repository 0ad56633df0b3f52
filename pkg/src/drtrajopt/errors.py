"""Exception taxonomy for the solver stack.

Callers can catch ``SolverError`` to handle any runtime failure of the
numerics; ``ContractError`` signals misuse at the call site and is kept
separate so it is never swallowed by solver-level retries.
"""

from __future__ import annotations


class ContractError(ValueError):
    """A precondition on arguments or configuration was violated."""


class SolverError(RuntimeError):
    """Base class for runtime failures inside the solver stack."""


class FactorizationError(SolverError):
    """A Cholesky factorization failed beyond the allowed jitter budget."""


class NumericalError(SolverError):
    """Non-finite values or a numerically invalid intermediate state."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ExistenceError(SolverError):
    """The tilted parameter distribution has no Gaussian normalizer.

    Raised when the tilted precision is not positive definite. This is a
    semantic condition (the temperature is past the admissible range), not a
    conditioning problem, so no jitter repair is attempted.
    """

    def __init__(self, step: int | None, min_eigenvalue: float, beta: float):
        where = "" if step is None else f" at step {step}"
        super().__init__(
            f"tilted parameter precision is not positive definite{where}: "
            f"min eigenvalue {min_eigenvalue:.6g} at temperature {beta:.6g}"
        )
        self.step = step
        self.min_eigenvalue = min_eigenvalue
        self.beta = beta


class BackwardPassError(SolverError):
    """The tilted policy precision lost positive definiteness."""

    def __init__(self, step: int | None, min_eigenvalue: float, alpha: float):
        where = "" if step is None else f" at step {step}"
        super().__init__(
            f"tilted policy precision is not positive definite{where}: "
            f"min eigenvalue {min_eigenvalue:.6g} at temperature {alpha:.6g}"
        )
        self.step = step
        self.min_eigenvalue = min_eigenvalue
        self.alpha = alpha


class TrustRegionError(SolverError):
    """No admissible temperature satisfies the policy trust region."""


class AdversaryInfeasibleError(SolverError):
    """The adversary could not meet its divergence budget."""
