import argparse
import sys
from typing import List, Optional

from app.cli import commands
from app.config import Settings, get_settings
from app.models.schemas import SolverMode
from app.utils.exceptions import ObstacleLabError
from app.utils.logger import LOG_LEVELS, get_logger, setup_logging


def build_parser() -> argparse.ArgumentParser:
    defaults = get_settings()
    parser = argparse.ArgumentParser(
        prog="python -m app.main",
        description=f"{defaults.app_name}: two-obstacle SPDE solvers and validation checks",
    )
    parser.add_argument("--log-level", default=defaults.log_level, type=str.upper, choices=LOG_LEVELS)
    parser.add_argument("--workers", type=int, default=defaults.workers, help="parallel map width")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve one problem and write u, nu_plus, nu_minus, diagnostics")
    solve.add_argument("config", help="problem TOML file or bundled instance name")
    solve.add_argument("--mode", choices=[m.value for m in SolverMode])
    solve.add_argument("--seed", type=int)
    solve.add_argument("--out", required=True)

    sweep = sub.add_parser("sweep", help="penalization sweep over increasing levels n")
    sweep.add_argument("config")
    sweep.add_argument("--levels", help="comma separated levels, e.g. 1,2,4,8")
    sweep.add_argument("--out", required=True)

    picard = sub.add_parser("picard", help="Picard iteration for nonlinear coefficients")
    picard.add_argument("config")
    picard.add_argument("--tol", type=float)
    picard.add_argument("--max-iter", type=int, dest="max_iter")
    picard.add_argument("--out", required=True)

    validate = sub.add_parser("validate", help="run a validation suite")
    validate.add_argument("--suite", default="default", help="'default', a suite name or a suite TOML file")
    validate.add_argument("--out", required=True)

    replay = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    replay.add_argument("manifest", help="manifest.json or the directory holding it")
    replay.add_argument("--out", required=True)
    return parser


def run(args: argparse.Namespace, settings: Settings) -> int:
    if args.command == "solve":
        return commands.cmd_solve(args.config, args.out, settings, mode=args.mode, seed=args.seed)
    if args.command == "sweep":
        return commands.cmd_sweep(args.config, args.out, settings, levels=args.levels)
    if args.command == "picard":
        return commands.cmd_picard(args.config, args.out, settings, tol=args.tol, max_iter=args.max_iter)
    if args.command == "validate":
        return commands.cmd_validate(args.out, settings, suite=args.suite)
    return commands.cmd_replay(args.manifest, args.out, settings)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    logger = get_logger(__name__)
    try:
        settings = Settings(log_level=args.log_level, workers=args.workers)
        settings.print_config()
        return run(args, settings)
    except ObstacleLabError as e:
        logger.error("command failed", kind=e.kind, exit_code=e.exit_code)
        print(e.error_line(), file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # pydantic rejects bad flag values (e.g. --workers 0)
        print(f"E:config:{' '.join(str(e).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
