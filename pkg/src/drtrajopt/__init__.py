"""Distributionally robust trajectory optimization with KL trust regions.

Optimizes time-varying linear-Gaussian policies against worst-case Gaussian
perturbations of the dynamics parameters, alternating an adversary with a
summed-KL divergence budget and a policy update with a summed-KL trust
region. Belief-space rollouts use a cubature rule that is exact for linear
dynamics and known parameters.
"""

from .adversary import (
    AdversaryReport,
    AdversaryState,
    WFunction,
    optimize_worst_case,
    param_backward,
    param_dual_and_grad,
    w_function,
    worst_case_step,
)
from .errors import (
    AdversaryInfeasibleError,
    BackwardPassError,
    ContractError,
    ExistenceError,
    FactorizationError,
    NumericalError,
    SolverError,
    TrustRegionError,
)
from .evaluate import (
    McRollout,
    SweepRow,
    adversary_sweep,
    expected_cost,
    expected_cost_of_trajectory,
    kl_profile,
    mc_rollout,
)
from .gauss import (
    Gaussian,
    barycentric,
    blend_precision,
    kl_gaussian,
    kl_gaussian_many,
    safe_cholesky,
    spd_inverse,
    symmetrize,
)
from .model import (
    LinearParamStep,
    NonlinearSystem,
    ParameterBelief,
    Problem,
    QuadraticCost,
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
from .policy import (
    LinearGaussianPolicy,
    PolicyDualReport,
    PolicyStep,
    QuadraticQ,
    QuadraticValue,
    expected_policy_kl,
    expected_q_under_policy,
    optimize_policy,
    policy_backward,
    policy_dual_and_grad,
    policy_step,
    q_function,
    stationary_policy,
    terminal_value,
)
from .propagate import (
    StateBeliefTrajectory,
    augment,
    cubature_points,
    cubature_step,
    forward_pass,
)
from .solver import (
    IterationRecord,
    SolveConfig,
    SolveReport,
    attack,
    solve_robust,
    solve_stochastic,
)

__version__ = "0.1.0"

__all__ = [
    "AdversaryInfeasibleError",
    "AdversaryReport",
    "AdversaryState",
    "BackwardPassError",
    "ContractError",
    "ExistenceError",
    "FactorizationError",
    "Gaussian",
    "IterationRecord",
    "LinearGaussianPolicy",
    "LinearParamStep",
    "McRollout",
    "NonlinearSystem",
    "NumericalError",
    "ParameterBelief",
    "PolicyDualReport",
    "PolicyStep",
    "Problem",
    "QuadraticCost",
    "QuadraticQ",
    "QuadraticValue",
    "SolveConfig",
    "SolveReport",
    "SolverError",
    "StateBeliefTrajectory",
    "SweepRow",
    "TrustRegionError",
    "WFunction",
    "adversary_sweep",
    "attack",
    "augment",
    "barycentric",
    "blend_precision",
    "cubature_points",
    "cubature_step",
    "expected_cost",
    "expected_cost_of_trajectory",
    "expected_policy_kl",
    "expected_q_under_policy",
    "forward_pass",
    "integrate",
    "kl_gaussian",
    "kl_gaussian_many",
    "kl_profile",
    "linear_system",
    "linearize",
    "marginal_dynamics",
    "mass_spring_damper",
    "mass_spring_damper_problem",
    "mc_rollout",
    "nominal_belief",
    "optimize_policy",
    "optimize_worst_case",
    "param_backward",
    "param_dual_and_grad",
    "policy_backward",
    "policy_dual_and_grad",
    "policy_step",
    "q_function",
    "robot_car",
    "robot_car_problem",
    "safe_cholesky",
    "spd_inverse",
    "solve_robust",
    "solve_stochastic",
    "state_action",
    "stationary_policy",
    "symmetrize",
    "terminal_value",
    "unvec_params",
    "vec_params",
    "w_function",
    "worst_case_step",
]
