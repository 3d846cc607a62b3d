"""Command handlers behind `python -m app.main`.

Each `cmd_*` returns the process exit status; domain errors propagate to the
entry point, which turns them into the `E:<kind>:<detail>` line.
"""
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

from app.config import NoiseSection, RunConfig, Settings, SuiteConfig, instance_path, load_suite
from app.models.schemas import GridSolution, SolverMode
from app.services import grid_service, picard_service
from app.services.output_service import OutputService, read_manifest
from app.services.problem_service import check_hypotheses, make_noise
from app.services.validation_service import SWEEP_COLUMNS, check_penalization_sweep, run_suite, suite_instances
from app.utils.exceptions import ConfigurationError, NoConvergence
from app.utils.logger import bind_run, get_logger

logger = get_logger(__name__)


def parse_levels(text: str) -> List[float]:
    """'1,2,4' -> [1.0, 2.0, 4.0]; an empty list is a configuration error."""
    try:
        levels = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigurationError(f"bad penalty levels {text!r}: {e}") from e
    if not levels:
        raise ConfigurationError("empty level list")
    return levels


def _load(config: str, settings: Settings) -> RunConfig:
    return RunConfig.from_toml(instance_path(config, settings))


def _noise(config: RunConfig):
    spec = config.spec
    disc = config.discretization
    return make_noise(config.noise.seed, disc.Nt, spec.d1, spec.T / disc.Nt)


def _finish(command: str, out: OutputService, arguments: Dict[str, Any], config: Optional[RunConfig], started: float) -> None:
    wall = time.perf_counter() - started
    out.write_manifest(command, arguments, config, wall)
    logger.info("command finished", wall_time_s=wall, out=str(out.out_dir))


# ---------------------------------------------------------------- solve

def _run_solve(config: RunConfig, out_dir: str, settings: Settings, arguments: Dict[str, Any]) -> int:
    started = time.perf_counter()
    bind_run("solve", instance=config.problem.name)
    logger.info("command started")
    spec, disc = config.spec, config.discretization
    for warning in check_hypotheses(spec, disc).warnings:
        logger.warning("hypothesis warning", detail=warning)

    noise = _noise(config)
    solve = config.solve
    if spec.depends_on_solution:
        sol: GridSolution = picard_service.picard_solve(
            spec, disc, noise, config.picard.tol, config.picard.max_iter,
            initial=config.picard.initial, mode=solve.mode,
        )[0]
    else:
        sol = grid_service.solve(spec, disc, noise, mode=solve.mode, penalty=solve.penalty, penalty_mode=solve.penalty_mode)

    out = OutputService(out_dir, settings.csv_float_format)
    out.write_solution(sol)
    _finish("solve", out, arguments, config, started)
    return 0


def cmd_solve(config: str, out: str, settings: Settings, mode: Optional[str] = None, seed: Optional[int] = None) -> int:
    run = _load(config, settings)
    if mode is not None:
        run.solve = run.solve.model_copy(update={"mode": SolverMode(mode)})
    if seed is not None:
        run.noise = NoiseSection(seed=seed)
    return _run_solve(run, out, settings, {"config": config, "mode": mode, "seed": seed, "out": out})


# ---------------------------------------------------------------- sweep

def _run_sweep(config: RunConfig, levels: List[float], out_dir: str, settings: Settings, arguments: Dict[str, Any]) -> int:
    started = time.perf_counter()
    bind_run("sweep", instance=config.problem.name)
    logger.info("command started", levels=levels)
    report = check_penalization_sweep(
        config.spec, config.discretization, _noise(config), levels,
        config.validation.tol_excess, config.solve.penalty_mode, config.problem.name, settings.workers,
    )
    out = OutputService(out_dir, settings.csv_float_format)
    out.write_sweep(report.details["table"], SWEEP_COLUMNS)
    _finish("sweep", out, {**arguments, "levels": levels}, config, started)
    return 0 if report.passed else 1


def cmd_sweep(config: str, out: str, settings: Settings, levels: Optional[str] = None) -> int:
    run = _load(config, settings)
    parsed = parse_levels(levels) if levels is not None else list(run.validation.levels)
    if not parsed:
        raise ConfigurationError("empty level list")
    return _run_sweep(run, parsed, out, settings, {"config": config, "out": out})


# ---------------------------------------------------------------- picard

def _run_picard(config: RunConfig, out_dir: str, settings: Settings, arguments: Dict[str, Any]) -> int:
    started = time.perf_counter()
    bind_run("picard", instance=config.problem.name)
    logger.info("command started")
    out = OutputService(out_dir, settings.csv_float_format)
    try:
        sol, trace = picard_service.picard_solve(
            config.spec, config.discretization, _noise(config), config.picard.tol, config.picard.max_iter,
            initial=config.picard.initial, mode=config.solve.mode,
        )
    except NoConvergence as e:
        if e.trace is not None:
            out.write_trace(e.trace)
        if e.solution is not None:
            out.write_solution(e.solution)
        _finish("picard", out, arguments, config, started)
        raise
    out.write_trace(trace)
    out.write_solution(sol)
    _finish("picard", out, arguments, config, started)
    return 0


def cmd_picard(config: str, out: str, settings: Settings, tol: Optional[float] = None, max_iter: Optional[int] = None) -> int:
    run = _load(config, settings)
    update = {k: v for k, v in (("tol", tol), ("max_iter", max_iter)) if v is not None}
    if update:
        run.picard = run.picard.model_copy(update=update)
    return _run_picard(run, out, settings, {"config": config, "tol": tol, "max_iter": max_iter, "out": out})


# ---------------------------------------------------------------- validate

def _run_validate(
    suite: SuiteConfig,
    out_dir: str,
    settings: Settings,
    arguments: Dict[str, Any],
    instances: Optional[Dict[str, RunConfig]] = None,
) -> int:
    started = time.perf_counter()
    bind_run("validate")
    logger.info("command started", checks=len(suite.checks))
    if instances is None:
        instances = suite_instances(suite, settings)
    summary, reports = run_suite(suite, settings, instances)
    out = OutputService(out_dir, settings.csv_float_format)
    out.write_summary(summary, reports)
    recorded = {
        **arguments,
        "suite_config": suite.model_dump(mode="json"),
        "instances": {name: config.model_dump(mode="json") for name, config in instances.items()},
    }
    _finish("validate", out, recorded, None, started)
    failed = [f"{r.check}:{r.instance}" for r in reports if not r.passed]
    if failed:
        logger.warning("checks failed", failed=failed)
        return 1
    return 0


def cmd_validate(out: str, settings: Settings, suite: str = "default") -> int:
    return _run_validate(load_suite(suite, settings), out, settings, {"suite": suite, "out": out})


# ---------------------------------------------------------------- replay

def cmd_replay(manifest: str, out: str, settings: Settings) -> int:
    """Re-run the command recorded in a manifest with its resolved config and seed."""
    recorded = read_manifest(manifest)
    command = recorded.get("command")
    arguments = dict(recorded.get("arguments") or {})
    arguments["replayed_from"] = str(Path(manifest))
    logger.info("replaying", command=command, manifest=manifest)

    if command == "validate":
        suite = SuiteConfig(**arguments.pop("suite_config", {}))
        recorded_instances = arguments.pop("instances", None)
        if recorded_instances is None:
            raise ConfigurationError(f"manifest {manifest} has no resolved instances")
        instances = {name: RunConfig.from_dict(data) for name, data in recorded_instances.items()}
        return _run_validate(suite, out, settings, arguments, instances)
    if recorded.get("config") is None:
        raise ConfigurationError(f"manifest {manifest} has no resolved config")
    config = RunConfig.from_dict(recorded["config"])
    if command == "solve":
        return _run_solve(config, out, settings, arguments)
    if command == "sweep":
        return _run_sweep(config, [float(n) for n in arguments.pop("levels")], out, settings, arguments)
    if command == "picard":
        return _run_picard(config, out, settings, arguments)
    raise ConfigurationError(f"manifest records unknown command {command!r}")
