"""Command-line entrypoint for the supermarket toolkit."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from . import __version__
from .errors import ModelValidationError, NumericalError, SupermarketError
from .models import Command, ModelSpec, RunConfig, ServiceCoupling, SimConfig
from .sample_data import exponential, list_models, load_sample, mmpp_example, ph_example
from .services.fixedpoint import FixedPointSolution, FixedPointSolver, poisson_explicit
from .services.meanfield import FractionVector, MeanFieldSystem, jacobian_norm, metric
from .services.performance import (
    EXAMPLE_IDS,
    example_tables,
    mean_queue_length,
    mean_sojourn,
    performance_report,
    table_trends,
)
from .services.simulator import (
    coupled_run,
    gap_by_size,
    run,
    shrinking_fraction,
    stationary_check,
)
from .utils.envfactor import LevelPair, check_invariance
from .utils.stochkit import (
    exit_vector,
    kron_product,
    kron_sum,
    map_rate,
    ph_mean,
    stationary_vector,
    traffic_intensity,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

VALIDATE_SLACK = 0.05
INVARIANCE_PAIRS = 25
LIPSCHITZ_STATES = 500
# ODE checks run to this many mean service times.
CONVERGENCE_HORIZON = 200.0
GAP_HORIZON = 10.0
GAP_PAIRS = 20
GAP_SIZES = (100, 1000)
DOMINANCE_REPLICATIONS = 30

_OPTION_FIELDS = {
    "model": "model_file",
    "sample": "sample",
    "d": "d",
    "K": "K",
    "t_end": "t_end",
    "tol": "tol",
    "N": "N",
    "seed": "seed",
    "horizon": "horizon",
    "warmup": "warmup",
    "replications": "replications",
    "workers": "workers",
    "with_replacement": "with_replacement",
    "service_coupling": "service_coupling",
    "d_list": "d_list",
    "samples": "samples",
    "k_report": "k_report",
    "per_entry": "per_entry",
    "example": "example",
    "eps": "eps",
    "out": "out",
}


def create_parser() -> argparse.ArgumentParser:
    """Configure and return the argument parser."""
    parser = argparse.ArgumentParser(
        prog="supermarket",
        description="Mean-field power-of-d load balancing with MAP inputs and PH service.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    fixed = subparsers.add_parser(Command.fixed_point.value, help="Solve the fixed point.")
    _add_model_options(fixed)
    fixed.add_argument("--K", type=int, help="Truncation level (automatic when omitted).")
    fixed.add_argument("--tol", type=float, help="Residual tolerance.")

    field = subparsers.add_parser(Command.mean_field.value, help="Integrate the mean-field ODEs.")
    _add_model_options(field)
    field.add_argument("--t-end", dest="t_end", type=float, help="Integration end time.")
    field.add_argument("--tol", type=float, help="Integrator tolerance.")
    field.add_argument("--samples", type=int, help="Evenly spaced sample times.")
    field.add_argument("--k-report", dest="k_report", type=int, help="Reported tail levels.")
    field.add_argument(
        "--per-entry", dest="per_entry", action="store_true", default=None,
        help="Emit every fraction entry.",
    )

    simulate = subparsers.add_parser(Command.simulate.value, help="Simulate N servers.")
    _add_model_options(simulate)
    _add_simulation_options(simulate)
    simulate.add_argument("--samples", type=int, help="Evenly spaced sample times.")
    simulate.add_argument("--k-report", dest="k_report", type=int, help="Reported tail levels.")

    couple = subparsers.add_parser(Command.couple.value, help="Coupled runs across d.")
    _add_model_options(couple)
    _add_simulation_options(couple)
    couple.add_argument("--d-list", dest="d_list", type=_int_list, help="Comma-separated d list.")

    perf = subparsers.add_parser(Command.perf.value, help="Performance measures.")
    _add_model_options(perf)
    perf.add_argument("--example", type=int, help="Numerical example 1-4.")
    perf.add_argument("--d-list", dest="d_list", type=_int_list, help="Comma-separated d values.")
    perf.add_argument("--eps", type=float, help="Series truncation threshold.")

    validate = subparsers.add_parser(Command.validate.value, help="Run the cross-check suite.")
    _add_model_options(validate)
    _add_simulation_options(validate)
    validate.add_argument("--tol", type=float, help="Solver tolerance.")

    models = subparsers.add_parser(Command.models.value, help="List bundled sample models.")
    models.add_argument("--out", type=Path, help="Optional CSV path.")

    dump = subparsers.add_parser(Command.dump_model.value, help="Write a model as JSON.")
    _add_model_options(dump)
    return parser


def _add_model_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", type=Path, help="Model JSON file.")
    parser.add_argument("--sample", help="Bundled sample model id (see `models`).")
    parser.add_argument("--d", type=int, help="Override the model's choice count.")
    parser.add_argument("--out", type=Path, help="Output path.")


def _add_simulation_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--N", type=int, help="Number of servers.")
    parser.add_argument("--seed", type=int, help="Root random seed.")
    parser.add_argument("--horizon", type=float, help="Simulated time.")
    parser.add_argument("--warmup", type=float, help="Warm-up time.")
    parser.add_argument("--replications", type=int, help="Independent replications.")
    parser.add_argument("--workers", type=int, help="Worker processes.")
    parser.add_argument(
        "--without-replacement",
        dest="with_replacement",
        action="store_false",
        default=None,
        help="Sample d distinct servers.",
    )
    parser.add_argument(
        "--service-coupling",
        dest="service_coupling",
        choices=[coupling.value for coupling in ServiceCoupling],
        help="How coupled runs share service requirements.",
    )


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        message = f"Expected comma-separated integers, got '{text}'."
        raise argparse.ArgumentTypeError(message) from exc


def build_config(args: argparse.Namespace) -> RunConfig:
    """Validate parsed arguments through RunConfig; unset options take their defaults."""
    values: dict[str, Any] = {"command": args.command}
    for option, field_name in _OPTION_FIELDS.items():
        value = getattr(args, option, None)
        if value is not None:
            values[field_name] = value
    if "workers" not in values and os.getenv("SUPERMARKET_WORKERS"):
        values["workers"] = int(os.environ["SUPERMARKET_WORKERS"])
    return RunConfig.model_validate(values)


def load_model(path: Path) -> ModelSpec:
    """Read and validate a model JSON file."""
    return ModelSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))


def resolve_model(config: RunConfig) -> ModelSpec:
    model = load_model(config.model_file) if config.model_file else load_sample(config.sample)
    return model.with_d(config.d) if config.d is not None else model


def output_path(config: RunConfig, suffix: str = ".csv") -> Path:
    if config.out is not None:
        return config.out
    directory = Path(os.getenv("SUPERMARKET_OUTPUT_DIR", "."))
    return directory / f"{config.command.value}{suffix}"


def write_csv(
    frame: pd.DataFrame, path: Path, model: ModelSpec | None = None, seed: int | None = None
) -> Path:
    """Write ``frame`` after a '#' provenance line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fingerprint = model.fingerprint() if model is not None else "none"
    generated = datetime.now(timezone.utc).isoformat()
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(
            f"# supermarket {__version__} model_sha256={fingerprint} "
            f"seed={seed if seed is not None else 'none'} generated={generated}\n"
        )
        frame.to_csv(handle, index=False)
    logger.info("Wrote %d rows to %s", len(frame), path)
    return path


def _sibling(path: Path, tag: str) -> Path:
    return path.with_name(f"{path.stem}.{tag}{path.suffix or '.csv'}")


def _simulation_config(
    config: RunConfig, model: ModelSpec, sample_times: list[float]
) -> SimConfig:
    return SimConfig(
        model=model,
        N=config.N,
        horizon=config.horizon,
        warmup=config.warmup,
        seed=config.seed,
        sample_times=sample_times,
        replications=config.replications,
        k_report=config.k_report,
        workers=config.workers,
        with_replacement=config.with_replacement,
        service_coupling=config.service_coupling,
    )


def _run_fixed_point(config: RunConfig) -> int:
    model = resolve_model(config)
    solution = FixedPointSolver(model, tol=config.tol).solve_pi(config.K)
    write_csv(solution.to_frame(), output_path(config), model)
    return EXIT_OK


def _run_mean_field(config: RunConfig) -> int:
    model = resolve_model(config)
    system = MeanFieldSystem(model)
    times = np.linspace(0.0, config.t_end, config.samples)
    trajectory = system.integrate(
        FractionVector.empty(model), config.t_end, sample_times=times, tol=config.tol
    )
    frame = trajectory.to_frame(k_report=config.k_report, per_entry=config.per_entry)
    write_csv(frame, output_path(config), model)
    return EXIT_OK


def _run_simulate(config: RunConfig) -> int:
    model = resolve_model(config)
    times = list(np.linspace(0.0, config.horizon, config.samples))
    result = run(_simulation_config(config, model, times))
    path = write_csv(result.to_frame(), output_path(config), model, config.seed)
    write_csv(result.summary_frame(), _sibling(path, "summary"), model, config.seed)
    return EXIT_OK


def _run_couple(config: RunConfig) -> int:
    model = resolve_model(config)
    result = coupled_run(_simulation_config(config, model, []), config.d_list)
    path = write_csv(result.frame, output_path(config), model, config.seed)
    write_csv(result.summary, _sibling(path, "summary"), model, config.seed)
    return EXIT_OK


def _run_perf(config: RunConfig) -> int:
    d_list = config.d_list if "d_list" in config.model_fields_set else None
    if config.example is not None:
        frame = example_tables(config.example, d_list=d_list, eps=config.eps)
        write_csv(frame, output_path(config))
        return EXIT_OK
    if config.model_file is None and config.sample is None:
        raise ModelValidationError("perf needs --example or a model (--model/--sample).")
    model = resolve_model(config)
    choices = d_list or [model.d]
    rows = [performance_report(model.with_d(d), eps=config.eps).model_dump() for d in choices]
    write_csv(pd.DataFrame(rows), output_path(config), model)
    return EXIT_OK


def _run_models(config: RunConfig) -> int:
    frame = pd.DataFrame([info.model_dump() for info in list_models()])
    print(frame.to_string(index=False))
    if config.out is not None:
        write_csv(frame, config.out)
    return EXIT_OK


def _run_dump_model(config: RunConfig) -> int:
    model = resolve_model(config)
    path = config.out or output_path(config, suffix=".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote model to %s", path)
    return EXIT_OK


def _printed_values() -> tuple[bool, str]:
    mu = 1.0 / ph_mean(ph_example(1))
    loads = [ph_mean(ph_example(index)) for index in (1, 2, 3)]
    omega = stationary_vector(np.add(*mmpp_example(0.5).matrices()))
    rates = [map_rate(mmpp_example(lam)) for lam in (0.1, 0.5, 0.9)]
    ok = (
        round(mu, 4) == 3.4118
        and [round(load, 4) for load in loads] == [0.2931, 0.3636, 0.4250]
        and np.allclose(omega, [7 / 12, 5 / 12], atol=1e-12)
        and np.allclose(rates, [0.1, 0.5, 0.9], rtol=1e-12)
    )
    detail = f"mu={mu:.4f} loads={[f'{load:.4f}' for load in loads]} omega={omega.round(6)}"
    return ok, detail


def _kron_identities(model: ModelSpec) -> tuple[bool, str]:
    C, D = model.map.matrices()
    alpha, T = model.ph.arrays()
    m_A, m_B = model.dims
    arrivals = C + np.diag(D.sum(axis=1))
    mixed = kron_product(C, np.eye(m_B)) @ kron_product(np.eye(m_A), T) - kron_product(C, T)
    rows = kron_sum(arrivals, T).sum(axis=1) - (
        np.kron(arrivals.sum(axis=1), np.ones(m_B)) + np.kron(np.ones(m_A), T.sum(axis=1))
    )
    joint = kron_sum(C + D, T + np.outer(exit_vector(T), alpha)).sum(axis=1)
    worst = float(max(np.abs(mixed).max(), np.abs(rows).max(), np.abs(joint).max()))
    return worst <= 1e-12, f"max identity defect {worst:.2e}"


def _ode_convergence(
    model: ModelSpec, solution: FixedPointSolution, tol: float
) -> tuple[bool, str]:
    system = MeanFieldSystem(model)
    t_end = CONVERGENCE_HORIZON * ph_mean(model.ph)
    first_phase = np.eye(model.dims[0])[0]
    starts = {
        "empty": FractionVector.empty(model),
        "saturated": FractionVector.saturated(model, 5, u0=first_phase),
        "geometric": FractionVector.from_tails(model, 0.9 ** np.arange(1, 13)),
    }
    target = solution.as_fraction_vector()
    worst_distance = worst_mass = 0.0
    clamped = 0
    for start in starts.values():
        trajectory = system.integrate(start, t_end, sample_times=[0.0, t_end], tol=tol)
        worst_distance = max(worst_distance, metric(trajectory.final, target))
        worst_mass = max(worst_mass, abs(float(trajectory.final.u0.sum()) - 1.0))
        clamped += trajectory.clamped
    ok = worst_distance <= 1e-5 and worst_mass <= 1e-9 and clamped == 0
    detail = (
        f"t_end={t_end:.4g} starts={list(starts)} max distance {worst_distance:.2e}, "
        f"|u0 e - 1| {worst_mass:.1e}, clamped {clamped}"
    )
    return ok, detail


def _lipschitz(model: ModelSpec, seed: int) -> tuple[bool, str]:
    system = MeanFieldSystem(model)
    bound = system.lipschitz_bound()
    rng = np.random.default_rng(seed)
    worst = max(
        jacobian_norm(system.jacobian(FractionVector.random(model, 10, rng, low=0.0)))
        for _ in range(LIPSCHITZ_STATES)
    )
    return worst <= bound * (1 + 1e-12), f"max norm {worst:.4g} vs M={bound:.4g}"


def _example_trends() -> tuple[bool, str]:
    trends = pd.concat([table_trends(example_tables(which)) for which in EXAMPLE_IDS])
    broken = trends[~trends["holds"]]
    detail = "; ".join(
        f"example {row.example} {row.measure} along {row.along}" for row in broken.itertuples()
    )
    return broken.empty, detail or f"{len(trends)} trends hold"


def _little_law() -> tuple[bool, str]:
    queue = mean_queue_length(0.5, 1)
    sojourn = mean_sojourn(exponential(1.0), 0.5, 1)
    ok = abs(queue - 1.0) <= 1e-12 and abs(sojourn - 2.0) <= 1e-12
    return ok, f"E[Q]={queue:.12g} E[T]={sojourn:.12g} at rho=0.5, d=1"


def _gap_trend(config: RunConfig, model: ModelSpec) -> tuple[bool, str]:
    times = np.linspace(0.0, GAP_HORIZON, 11).tolist()
    trajectory = MeanFieldSystem(model).integrate(
        FractionVector.empty(model), GAP_HORIZON, sample_times=times, tol=config.tol
    )
    cfg = _simulation_config(config, model, times).model_copy(
        update={"horizon": GAP_HORIZON, "warmup": 0.0, "replications": GAP_PAIRS}
    )
    gaps = gap_by_size(cfg, trajectory, GAP_SIZES)
    shrinking = shrinking_fraction(gaps)
    largest = float(gaps.loc[gaps["N"] == max(GAP_SIZES), "gap"].mean())
    ok = shrinking >= 0.9 and largest <= 0.05
    detail = f"shrinks in {shrinking:.0%} of {GAP_PAIRS} pairs; mean gap {largest:.3f} at N=1000"
    return ok, detail


def _coupled_dominance(config: RunConfig, model: ModelSpec) -> tuple[bool, str]:
    cfg = _simulation_config(config, model, []).model_copy(
        update={"replications": DOMINANCE_REPLICATIONS}
    )
    dominated = coupled_run(cfg, config.d_list).non_increasing()
    return bool(dominated.all()), (
        f"totals non-increasing in d={config.d_list} in {int(dominated.sum())}"
        f"/{dominated.size} replications"
    )


def validation_suite(config: RunConfig, model: ModelSpec) -> pd.DataFrame:
    """
    Cross-checks tying the modules together; one row per check.

    Rows with ``enforced`` False are reported for information and never fail
    the suite. Checks that need the fixed point fail when it could not be solved.
    """
    rows: list[dict[str, Any]] = []
    solved: dict[str, FixedPointSolution] = {}

    def check(name: str, run_check: Callable[[], tuple[bool, str]], enforced: bool = True) -> None:
        try:
            passed, detail = run_check()
        except (SupermarketError, ValueError, ArithmeticError) as exc:
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        if not enforced:
            passed, detail = True, f"reported only: {detail}"
        rows.append({"check": name, "passed": bool(passed), "enforced": enforced, "detail": detail})
        logger.info("validate %-22s %s", name, "pass" if passed else "FAIL")

    def solution() -> FixedPointSolution:
        if "pi" not in solved:
            raise NumericalError("fixed point unavailable; see fixed_point_residual")
        return solved["pi"]

    m_A, m_B = model.dims
    rho, stable = traffic_intensity(model)
    check("stability", lambda: (stable, f"rho={rho:.6g}"))
    if not stable:
        return pd.DataFrame(rows)

    check("printed_values", _printed_values)
    check("kron_identities", lambda: _kron_identities(model))

    def invariance() -> tuple[bool, str]:
        rng = np.random.default_rng(config.seed)
        worst = 0.0
        for _ in range(INVARIANCE_PAIRS):
            prev = rng.dirichlet(np.ones(m_A * m_B)) * rng.random()
            cur = prev * rng.random(m_A * m_B)
            _, deviation = check_invariance(LevelPair(prev, cur), model.d, m_A, m_B)
            worst = max(worst, deviation)
        return worst <= 1e-10, f"max relative deviation {worst:.2e}"

    check("env_factor_invariance", invariance)

    solver = FixedPointSolver(model, tol=config.tol)

    def fixed_point() -> tuple[bool, str]:
        solved["pi"] = solver.solve_pi(config.K)
        residual = solved["pi"].residual
        return residual <= config.tol, f"{residual:.2e} (K={solved['pi'].K})"

    check("fixed_point_residual", fixed_point)

    def factorization() -> tuple[bool, str]:
        error = solver.factorization_error(solution().K)
        return error <= 1e-8, f"{error:.2e}"

    check("rg_factorization", factorization)

    def stationarity() -> tuple[bool, str]:
        drift = MeanFieldSystem(model).rhs(solution().as_fraction_vector())
        norm = float(max(np.abs(drift.u0).max(), np.abs(drift.levels).max()))
        return norm <= 1e-6, f"max |rhs(pi)| {norm:.2e}"

    check("ode_stationarity", stationarity)
    check("ode_convergence", lambda: _ode_convergence(model, solution(), config.tol))

    exact_tail = m_A == 1 and m_B == 1
    check(
        "tail_law",
        lambda: (
            solution().tail_deviation <= 1e-6,
            f"deviation {solution().tail_deviation:.2e}"
            + ("" if exact_tail else " (closed form holds for exponential service only)"),
        ),
        enforced=exact_tail,
    )

    def oracle() -> tuple[bool, str]:
        if m_A != 1:
            return False, f"not applicable: MAP input has {m_A} phases"
        explicit = poisson_explicit(model.ph, map_rate(model.map), model.d, K=solution().K)
        gap = float(np.max(np.abs(explicit - solution().pi)))
        return gap <= 1e-8, f"max entry gap {gap:.2e}"

    check("poisson_oracle", oracle, enforced=m_A == 1)
    check("lipschitz_bound", lambda: _lipschitz(model, config.seed), enforced=m_A == 1)
    check("performance", lambda: (True, performance_report(model, config.eps).model_dump_json()))
    check("example_trends", _example_trends)
    check("little_law", _little_law)

    def simulation() -> tuple[bool, str]:
        cfg = _simulation_config(config, model, [])
        table = stationary_check(cfg, solution(), slack=VALIDATE_SLACK)
        worst = float(table["difference"].abs().max())
        return bool(table["within"].all()), f"max |simulated - fixed point| {worst:.3f}"

    check("stationary_simulation", simulation)
    check("meanfield_gap_trend", lambda: _gap_trend(config, model))
    check("coupled_dominance", lambda: _coupled_dominance(config, model))
    return pd.DataFrame(rows)



def _run_validate(config: RunConfig) -> int:
    model = resolve_model(config)
    table = validation_suite(config, model)
    print(table.to_string(index=False))
    if config.out is not None:
        write_csv(table, config.out, model, config.seed)
    return EXIT_OK if bool(table["passed"].all()) else EXIT_FAILURE


_HANDLERS: dict[Command, Callable[[RunConfig], int]] = {
    Command.fixed_point: _run_fixed_point,
    Command.mean_field: _run_mean_field,
    Command.simulate: _run_simulate,
    Command.couple: _run_couple,
    Command.perf: _run_perf,
    Command.validate: _run_validate,
    Command.models: _run_models,
    Command.dump_model: _run_dump_model,
}


def _write_diagnostics(config: RunConfig, exc: NumericalError) -> Path:
    path = output_path(config)
    target = path.with_name(f"{path.name}.diagnostics.json")
    payload = {
        "error": type(exc).__name__,
        "message": str(exc),
        "diagnostics": getattr(exc, "diagnostics", {}),
        "last_time": getattr(exc, "last_time", None),
    }
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")
    return target


def _configure_logging(verbose: bool) -> None:
    level_name = "DEBUG" if verbose else os.getenv("SUPERMARKET_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO))
    logging.getLogger().setLevel(getattr(logging, level_name, logging.INFO))


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit status."""
    args = create_parser().parse_args(argv)
    _configure_logging(args.verbose)
    config = build_config(args)
    try:
        return _HANDLERS[config.command](config)
    except NumericalError as exc:
        target = _write_diagnostics(config, exc)
        logger.error("Diagnostics written to %s", target)
        raise


def main(argv: Sequence[str] | None = None) -> int:
    """Console entrypoint: maps failures onto exit codes 2 (input) and 3 (numerical)."""
    load_dotenv()
    try:
        return dispatch(argv)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:  # pragma: no cover - unexpected failure path
        logger.exception("Unexpected failure")
        return EXIT_FAILURE
