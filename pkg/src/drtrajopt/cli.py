"""Command line driver: TOML experiment configs in, CSV artifacts out.

Exit codes: 0 on success, 2 for configuration errors, 3 for solver failures,
4 for I/O failures. All artifact writers format floats with full round-trip
precision so identical configurations reproduce byte-identical files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ContractError, SolverError
from .evaluate import adversary_sweep, expected_cost_of_trajectory, kl_profile
from .gauss import Gaussian
from .model import (
    Problem,
    QuadraticCost,
    linear_system,
    linearize,
    mass_spring_damper,
    nominal_belief,
    robot_car,
)
from .propagate import forward_pass
from .solver import SolveConfig, SolveReport, attack, solve_robust, solve_stochastic

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

SYSTEMS = ("mass_spring_damper", "robot_car", "custom_linear")


class ConfigError(ContractError):
    """Invalid experiment configuration."""


# Schema: key -> (type tag, required). Nested tables hold their own schemas.
_SOLVER_KEYS = {
    "outer_iters": ("int", False),
    "lambda": ("float", False),
    "inner_tol": ("float", False),
    "dual_tol": ("float", False),
    "budget_tol": ("float", False),
    "relinearize": ("bool", False),
    "seed": ("int", False),
    "warm_start": ("bool", False),
}
_SWEEP_KEYS = {
    "lambda_max": ("float", False),
    "points": ("int", False),
}
_TOP_KEYS = {
    "system": ("str", True),
    "horizon": ("int", True),
    "dt": ("float", True),
    "initial_mean": ("vector", True),
    "initial_std": ("float_or_vector", True),
    "goal": ("vector", True),
    "cost_state_diag": ("vector", True),
    "cost_action_diag": ("vector", True),
    "cost_terminal_diag": ("vector", False),
    "sigma_theta": ("float", True),
    "sigma_x": ("float", True),
    "sigma_pi": ("float", True),
    "epsilon": ("float", True),
    "delta": ("float", True),
    "output_dir": ("str", False),
    "drift_matrix": ("matrix", False),
    "input_matrix": ("matrix", False),
    "solver": ("table", False),
    "sweep": ("table", False),
}


def _coerce(value: Any, kind: str, path: str) -> Any:
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {type(value).__name__}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if kind == "vector":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{path}: expected a non-empty list of numbers")
        out = []
        for i, item in enumerate(value):
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise ConfigError(f"{path}[{i}]: expected a number, got {item!r}")
            out.append(float(item))
        return out
    if kind == "float_or_vector":
        if isinstance(value, list):
            return _coerce(value, "vector", path)
        return _coerce(value, "float", path)
    if kind == "matrix":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{path}: expected a non-empty list of rows")
        rows = [_coerce(row, "vector", f"{path}[{i}]") for i, row in enumerate(value)]
        width = len(rows[0])
        if any(len(row) != width for row in rows):
            raise ConfigError(f"{path}: rows have inconsistent lengths")
        return rows
    raise AssertionError(kind)


def _check_keys(data: dict, schema: dict, prefix: str = "") -> None:
    for key in data:
        if key not in schema:
            where = f"{prefix}{key}"
            raise ConfigError(f"unknown configuration key: {where}")
    for key, (kind, required) in schema.items():
        if required and key not in data:
            raise ConfigError(f"missing required configuration key: {prefix}{key}")


@dataclasses.dataclass
class ExperimentConfig:
    """Validated experiment description built from a TOML file."""

    system: str
    horizon: int
    dt: float
    initial_mean: list[float]
    initial_std: list[float]
    goal: list[float]
    cost_state_diag: list[float]
    cost_action_diag: list[float]
    cost_terminal_diag: list[float]
    sigma_theta: float
    sigma_x: float
    sigma_pi: float
    epsilon: float
    delta: float
    outer_iters: int = 30
    smoothing: float = 0.25
    inner_tol: float = 1e-3
    dual_tol: float = 1e-4
    budget_tol: float = 0.05
    relinearize: bool = False
    seed: int = 0
    warm_start: bool = False
    sweep_lambda_max: float = 4.0
    sweep_points: int = 21
    output_dir: str | None = None
    drift_matrix: list[list[float]] | None = None
    input_matrix: list[list[float]] | None = None


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a parsed TOML document; unknown keys are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    _check_keys(raw, _TOP_KEYS)

    values: dict[str, Any] = {}
    for key, (kind, _) in _TOP_KEYS.items():
        if key in raw and kind != "table":
            values[key] = _coerce(raw[key], kind, key)

    solver = raw.get("solver", {})
    if not isinstance(solver, dict):
        raise ConfigError("solver: expected a table")
    _check_keys(solver, _SOLVER_KEYS, "solver.")
    sweep = raw.get("sweep", {})
    if not isinstance(sweep, dict):
        raise ConfigError("sweep: expected a table")
    _check_keys(sweep, _SWEEP_KEYS, "sweep.")

    system = values["system"]
    if system not in SYSTEMS:
        raise ConfigError(
            f"system: expected one of {', '.join(SYSTEMS)}, got {system!r}"
        )
    if system == "custom_linear":
        if "drift_matrix" not in values or "input_matrix" not in values:
            raise ConfigError(
                "custom_linear requires drift_matrix and input_matrix"
            )
    elif "drift_matrix" in values or "input_matrix" in values:
        raise ConfigError("drift_matrix/input_matrix only apply to custom_linear")

    d = len(values["initial_mean"])
    std = values["initial_std"]
    if isinstance(std, float):
        std = [std] * d
    if len(std) != d:
        raise ConfigError("initial_std length does not match initial_mean")
    if any(s <= 0 for s in std):
        raise ConfigError("initial_std entries must be positive")

    config = ExperimentConfig(
        system=system,
        horizon=values["horizon"],
        dt=values["dt"],
        initial_mean=values["initial_mean"],
        initial_std=std,
        goal=values["goal"],
        cost_state_diag=values["cost_state_diag"],
        cost_action_diag=values["cost_action_diag"],
        cost_terminal_diag=values.get("cost_terminal_diag", values["cost_state_diag"]),
        sigma_theta=values["sigma_theta"],
        sigma_x=values["sigma_x"],
        sigma_pi=values["sigma_pi"],
        epsilon=values["epsilon"],
        delta=values["delta"],
        output_dir=values.get("output_dir"),
        drift_matrix=values.get("drift_matrix"),
        input_matrix=values.get("input_matrix"),
    )
    if "outer_iters" in solver:
        config.outer_iters = _coerce(solver["outer_iters"], "int", "solver.outer_iters")
    if "lambda" in solver:
        config.smoothing = _coerce(solver["lambda"], "float", "solver.lambda")
    if "inner_tol" in solver:
        config.inner_tol = _coerce(solver["inner_tol"], "float", "solver.inner_tol")
    if "dual_tol" in solver:
        config.dual_tol = _coerce(solver["dual_tol"], "float", "solver.dual_tol")
    if "budget_tol" in solver:
        config.budget_tol = _coerce(solver["budget_tol"], "float", "solver.budget_tol")
    if "relinearize" in solver:
        config.relinearize = _coerce(solver["relinearize"], "bool", "solver.relinearize")
    if "seed" in solver:
        config.seed = _coerce(solver["seed"], "int", "solver.seed")
    if "warm_start" in solver:
        config.warm_start = _coerce(solver["warm_start"], "bool", "solver.warm_start")
    if "lambda_max" in sweep:
        config.sweep_lambda_max = _coerce(sweep["lambda_max"], "float", "sweep.lambda_max")
    if "points" in sweep:
        config.sweep_points = _coerce(sweep["points"], "int", "sweep.points")

    _validate_dimensions(config)
    return config


def _validate_dimensions(config: ExperimentConfig) -> None:
    if config.system == "mass_spring_damper":
        d, m = 2, 1
    elif config.system == "robot_car":
        d, m = 4, 2
    else:
        drift = config.drift_matrix
        inp = config.input_matrix
        if len(drift) != len(drift[0]):
            raise ConfigError("drift_matrix must be square")
        if len(inp) != len(drift):
            raise ConfigError("input_matrix row count must match drift_matrix")
        d, m = len(inp), len(inp[0])
    if len(config.initial_mean) != d:
        raise ConfigError(f"initial_mean must have {d} entries for {config.system}")
    if len(config.goal) != d:
        raise ConfigError(f"goal must have {d} entries for {config.system}")
    if len(config.cost_state_diag) != d:
        raise ConfigError(f"cost_state_diag must have {d} entries")
    if len(config.cost_terminal_diag) != d:
        raise ConfigError(f"cost_terminal_diag must have {d} entries")
    if len(config.cost_action_diag) != m:
        raise ConfigError(f"cost_action_diag must have {m} entries")
    if config.horizon < 2:
        raise ConfigError("horizon must be at least 2")
    if config.dt <= 0:
        raise ConfigError("dt must be positive")
    for name in ("sigma_theta", "sigma_x", "sigma_pi", "epsilon"):
        if getattr(config, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    if config.delta < 0:
        raise ConfigError("delta must be nonnegative")
    if config.sweep_points < 2:
        raise ConfigError("sweep.points must be at least 2")
    if config.sweep_lambda_max <= 0:
        raise ConfigError("sweep.lambda_max must be positive")


def build_problem(config: ExperimentConfig) -> Problem:
    """Assemble the Problem described by a validated config."""
    if config.system == "mass_spring_damper":
        system = mass_spring_damper(dt=config.dt, noise_std=config.sigma_x)
    elif config.system == "robot_car":
        system = robot_car(dt=config.dt, noise_std=config.sigma_x)
    else:
        system = linear_system(
            np.array(config.drift_matrix),
            np.array(config.input_matrix),
            config.dt,
            config.sigma_x,
        )
    states = np.tile(np.array(config.initial_mean), (config.horizon, 1))
    actions = np.zeros((config.horizon - 1, system.action_dim))
    steps = linearize(system, states, actions)
    cost = QuadraticCost(
        state_weight=np.diag(config.cost_state_diag),
        action_weight=np.diag(config.cost_action_diag),
        terminal_weight=np.diag(config.cost_terminal_diag),
        goal=np.array(config.goal),
    )
    initial = Gaussian(
        np.array(config.initial_mean), np.diag(np.square(config.initial_std))
    )
    return Problem(
        horizon=config.horizon,
        initial_belief=initial,
        cost=cost,
        nominal=tuple(nominal_belief(steps, config.sigma_theta)),
        system=system,
    )


def solve_settings(config: ExperimentConfig) -> SolveConfig:
    return SolveConfig(
        epsilon=config.epsilon,
        delta=config.delta,
        outer_iters=config.outer_iters,
        sigma_pi=config.sigma_pi,
        smoothing=config.smoothing,
        inner_tol=config.inner_tol,
        dual_tol=config.dual_tol,
        budget_tol=config.budget_tol,
        relinearize=config.relinearize,
        sigma_theta=config.sigma_theta,
        seed=config.seed,
        warm_start=config.warm_start,
    )


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def run_solve(config: ExperimentConfig, out_dir: Path, parallel: bool = False) -> int:
    """Solve both controllers, attack the baseline, write all artifacts."""
    problem = build_problem(config)
    settings = solve_settings(config)

    if parallel:
        with concurrent.futures.ThreadPoolExecutor(max_workers=2) as pool:
            robust_future = pool.submit(solve_robust, problem, settings)
            stochastic_future = pool.submit(solve_stochastic, problem, settings)
            robust_policy, _, robust_report = robust_future.result()
            stochastic_policy, stochastic_report = stochastic_future.result()
    else:
        robust_policy, _, robust_report = solve_robust(problem, settings)
        stochastic_policy, stochastic_report = solve_stochastic(problem, settings)

    # The comparison protocol: the adversary attacks the baseline policy, and
    # both controllers are evaluated under that same disturbance, inside the
    # baseline's final (possibly re-linearized) model.
    eval_nominal = stochastic_report.final_nominal
    worst, _, attack_report = attack(
        stochastic_policy, problem, settings, nominal=eval_nominal
    )

    mu1 = problem.initial_belief
    cells = {
        "robust_nominal": forward_pass(mu1, robust_policy, eval_nominal),
        "robust_worst": forward_pass(mu1, robust_policy, worst),
        "stochastic_nominal": forward_pass(mu1, stochastic_policy, eval_nominal),
        "stochastic_worst": forward_pass(mu1, stochastic_policy, worst),
    }

    rows = []
    for cell, traj in cells.items():
        for t, mu in enumerate(traj, start=1):
            stds = np.sqrt(np.diag(mu.cov))
            for dim in range(mu.dim):
                rows.append(
                    (cell, str(t), str(dim), _fmt(mu.mean[dim]), _fmt(stds[dim]))
                )
    _write_csv(out_dir / "trajectory.csv", ("cell", "t", "dim", "mean", "std"), rows)

    profile = kl_profile(worst, eval_nominal)
    _write_csv(
        out_dir / "kl_profile.csv",
        ("t", "kl"),
        [(str(t + 1), _fmt(v)) for t, v in enumerate(profile)],
    )

    weights = np.linspace(0.0, config.sweep_lambda_max, config.sweep_points)
    sweep_rows = adversary_sweep(
        stochastic_policy,
        robust_policy,
        eval_nominal,
        worst,
        mu1,
        problem.cost,
        weights,
    )
    _write_csv(
        out_dir / "sweep.csv",
        ("lambda", "distance", "cost_stochastic", "cost_robust", "valid"),
        [
            (
                _fmt(row.weight),
                _fmt(row.distance),
                _fmt(row.cost_stochastic),
                _fmt(row.cost_robust),
                "true" if row.valid else "false",
            )
            for row in sweep_rows
        ],
    )

    report_text = _render_report(
        config, problem, robust_policy, stochastic_policy,
        robust_report, stochastic_report, attack_report, worst, eval_nominal,
    )
    (out_dir / "report.txt").write_text(report_text)

    echo = dataclasses.asdict(config)
    (out_dir / "config_echo.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n"
    )
    return EXIT_OK


def _render_report(
    config, problem, robust_policy, stochastic_policy,
    robust_report: SolveReport, stochastic_report: SolveReport,
    attack_report, worst, eval_nominal,
) -> str:
    mu1 = problem.initial_belief
    cost = problem.cost
    lines = []
    lines.append(f"system: {config.system}")
    lines.append(
        f"dims: state={problem.state_dim} action={problem.action_dim} "
        f"horizon={problem.horizon}"
    )
    lines.append(f"epsilon={config.epsilon} delta={config.delta} seed={config.seed}")
    lines.append("")

    def cost_under(policy, beliefs):
        traj = forward_pass(mu1, policy, beliefs)
        return expected_cost_of_trajectory(traj, policy, cost)

    for name, report in (("robust", robust_report), ("stochastic", stochastic_report)):
        lines.append(f"[{name} solve]")
        lines.append(
            f"iterations={len(report.iterations)} converged={report.converged} "
            f"time={report.total_time:.2f}s"
        )
        for rec in report.iterations:
            lines.append(
                f"  k={rec.iteration:3d} cost_nominal={rec.cost_nominal:.6g} "
                f"cost_worst={rec.cost_worst:.6g} adv_kl={rec.adversary_kl:.6g} "
                f"pol_kl={rec.policy_kl:.6g} alpha={rec.alpha:.6g} "
                f"beta={rec.beta:.6g} mode={rec.adversary_mode}"
            )
        lines.append("")

    lines.append("[attack on stochastic policy]")
    lines.append(
        f"mode={attack_report.mode} beta={attack_report.beta:.6g} "
        f"kl={attack_report.kl_sum:.6g} of delta={attack_report.delta:.6g} "
        f"active={attack_report.active}"
    )
    lines.append("")
    lines.append("[evaluation under shared model]")
    lines.append(f"robust_nominal_cost={cost_under(robust_policy, eval_nominal):.6g}")
    lines.append(f"robust_worst_cost={cost_under(robust_policy, worst):.6g}")
    lines.append(
        f"stochastic_nominal_cost={cost_under(stochastic_policy, eval_nominal):.6g}"
    )
    lines.append(f"stochastic_worst_cost={cost_under(stochastic_policy, worst):.6g}")
    lines.append("")
    return "\n".join(lines)


def run_check(config: ExperimentConfig) -> int:
    """Validate the configuration and report resolved dimensions."""
    problem = build_problem(config)
    theta_dim = problem.nominal[0].dist.dim
    print(f"system: {config.system}")
    print(f"state_dim: {problem.state_dim}")
    print(f"action_dim: {problem.action_dim}")
    print(f"horizon: {problem.horizon}")
    print(f"dynamics_steps: {problem.horizon - 1}")
    print(f"parameter_dim: {theta_dim}")
    print(f"epsilon: {config.epsilon}")
    print(f"delta: {config.delta}")
    print(f"seed: {config.seed}")
    print("config ok")
    return EXIT_OK


def _load_config(path: str) -> ExperimentConfig:
    try:
        text = Path(path).read_bytes()
    except OSError as exc:
        raise _IoFailure(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    return parse_config(raw)


class _IoFailure(Exception):
    pass


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="drtrajopt",
        description="Distributionally robust trajectory optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve_parser = sub.add_parser("solve", help="solve an experiment, write artifacts")
    solve_parser.add_argument("--config", required=True, help="TOML experiment config")
    solve_parser.add_argument("--out", help="output directory (overrides config)")
    solve_parser.add_argument("--seed", type=int, help="override the config seed")
    solve_parser.add_argument(
        "--parallel", action="store_true",
        help="run the robust and baseline solves concurrently",
    )

    check_parser = sub.add_parser("check", help="validate a config and print dimensions")
    check_parser.add_argument("--config", required=True, help="TOML experiment config")
    check_parser.add_argument("--seed", type=int, help="override the config seed")

    args = parser.parse_args(argv)

    try:
        config = _load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.command == "check":
            return run_check(config)
        out_dir = args.out or config.output_dir
        if out_dir is None:
            raise ConfigError("no output directory: pass --out or set output_dir")
        out_path = Path(out_dir)
        try:
            out_path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise _IoFailure(f"cannot create output directory: {exc}") from exc
        try:
            return run_solve(config, out_path, parallel=args.parallel)
        except OSError as exc:
            raise _IoFailure(f"cannot write artifacts: {exc}") from exc
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _IoFailure as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
