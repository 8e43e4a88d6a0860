"""momentum_lab/cli.py

Command-line entry point.

Subcommands: ``rate``, ``stability``, ``optimal``, ``stationary``,
``simulate {det|stoch|asym|drop|sweep}``, ``verify``.  Values come from
``--config <file.json>`` and are overridden by flags given explicitly; the
merged dict is validated against the command's config model.

Exit codes: 0 success, 1 failed check, 2 instability, 64 usage error.
Logs go to stderr; results go to stdout or ``--output``.

Usage::

    python -m momentum_lab rate --alpha 0.1 --beta 0.669421 --nu 1 --mu 1 --L 100
    MOMENTUM_LAB_THREADS=8 python -m momentum_lab simulate sweep --grid 30x30x30 --start-at-optimum
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from pydantic import ValidationError

from momentum_lab import __version__
from momentum_lab.handlers import analysis, experiments
from momentum_lab.handlers.common import ExitCode, collect
from momentum_lab.services.core import InvalidArgumentError, MomentumLabError, UnstableSystemError
from momentum_lab.services.verify import GROUPS
from momentum_lab.settings import get_settings

logger = logging.getLogger("momentum_lab")

COMMANDS = collect(analysis.router, experiments.router)
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(ExitCode.USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Parser --------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _common_options() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with option values; flags override it")
    common.add_argument("-o", "--output", help="output file (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker processes (default: $MOMENTUM_LAB_THREADS or 1)")
    common.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS)
    return common


def _problem_options() -> argparse.ArgumentParser:
    opts = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    opts.add_argument("--problem", help="QuadraticProblem JSON file (default: seeded 2-D benchmark)")
    return opts


def _momentum_args(parser: argparse.ArgumentParser, with_alpha: bool = True) -> None:
    if with_alpha:
        parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--nu", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    problem = _problem_options()
    parser = _Parser(prog="momentum_lab", description="Quasi-hyperbolic momentum analysis toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(title="commands", metavar="COMMAND")

    def add(subparsers, name: str, command: str, help_text: str, *parents: argparse.ArgumentParser):
        sub = subparsers.add_parser(
            name, help=help_text, parents=[common, *parents], argument_default=argparse.SUPPRESS
        )
        sub.set_defaults(command=command)
        return sub

    p = add(commands, "rate", "rate", "spectrum-wide convergence rate")
    _momentum_args(p)
    p.add_argument("--mu", type=float)
    p.add_argument("--L", type=float)

    p = add(commands, "stability", "stability", "largest stable step size")
    _momentum_args(p, with_alpha=False)
    p.add_argument("--L", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--no-tradeoff", action="store_true", help="heavy-ball interval where the rate is sqrt(beta)")

    p = add(commands, "optimal", "optimal", "optimal parameters")
    p.add_argument("--kappa", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--nu", type=float, help="best (alpha, beta) for this nu")
    p.add_argument("--beta", type=float, help="best nu for this beta")
    p.add_argument("--sweep-nu", type=int, metavar="N", help="optimum for N values of nu in [0, 1]")
    p.add_argument("--sweep-beta", type=int, metavar="N", help="best nu for N values of beta in [0, 1)")
    p.add_argument("--check-monotonicity", type=float, nargs="+", metavar="KAPPA")
    p.add_argument("--beta-grid", type=int)
    p.add_argument("--nu-grid", type=int)

    p = add(commands, "stationary", "stationary", "stationary covariance and its approximations", problem)
    _momentum_args(p)
    p.add_argument("--error-map", action="store_true")
    p.add_argument("--optimal-nu", action="store_true")
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--beta-grid", type=int)
    p.add_argument("--nu-grid", type=int)
    p.add_argument("--nu-candidates", type=int)
    p.add_argument("--threshold", type=float)

    simulate = commands.add_parser("simulate", help="trajectory experiments").add_subparsers(
        title="modes", metavar="MODE"
    )

    p = add(simulate, "det", "simulate det", "noiseless run and fitted rate", problem)
    _momentum_args(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--x0", type=float, nargs="+")
    p.add_argument("--thin", type=int)

    p = add(simulate, "stoch", "simulate stoch", "noisy run with stationary statistics", problem)
    _momentum_args(p)
    p.add_argument("--schedule", help="schedule as JSON, e.g. '{\"variant\": \"beta_to_one\", \"omega\": 0.9, \"c\": 0.6}'")
    p.add_argument("--steps", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--noise-bound", type=float)
    p.add_argument("--x0", type=float, nargs="+")

    p = add(simulate, "asym", "simulate asym", "decaying schedules", problem)
    p.add_argument("--schedule")
    p.add_argument("--regime", choices=("beta_to_zero", "beta_to_one"))
    p.add_argument("--steps", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--noise-bound", type=float)
    p.add_argument("--x0", type=float, nargs="+")

    p = add(simulate, "drop", "simulate drop", "constant-and-drop stages", problem)
    p.add_argument("--stages", help="'alpha:steps,...' (with --beta/--nu) or 'alpha:beta:nu:steps,...'")
    _momentum_args(p, with_alpha=False)
    p.add_argument("--rate-probe-steps", type=int)
    p.add_argument("--noise-bound", type=float)
    p.add_argument("--x0", type=float, nargs="+")

    p = add(simulate, "sweep", "simulate sweep", "(alpha, beta, nu) grid", problem)
    p.add_argument("--grid", help="sizes as AxBxC (default 30x30x30)")
    p.add_argument("--alpha-range", type=float, nargs=2)
    p.add_argument("--beta-range", type=float, nargs=2)
    p.add_argument("--nu-range", type=float, nargs=2)
    p.add_argument("--steps", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--start-at-optimum", action="store_true")
    p.add_argument("--noise-bound", type=float)
    p.add_argument("--x0", type=float, nargs="+")

    p = add(commands, "verify", "verify", "run the self-check suite")
    p.add_argument("--only", nargs="+", choices=GROUPS)
    return parser


# ---------------------------------------------------------------------------
# Entry ---------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _load_config_file(path: str) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"config file {path} must hold a JSON object")
    return data


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    options = vars(parser.parse_args(argv))
    name = options.pop("command", None)
    if name is None:
        parser.print_help(sys.stderr)
        return ExitCode.USAGE

    level = options.pop("log_level", None) or get_settings().log_level.upper()
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    command = COMMANDS[name]
    try:
        data = _load_config_file(options.pop("config")) if "config" in options else {}
        data.update(options)
        config = command.config.model_validate(data)
        logger.info("Running %s", name)
        return int(command.handler(config))
    except (ValidationError, InvalidArgumentError) as exc:
        logger.error("%s: %s", name, exc)
        return ExitCode.USAGE
    except UnstableSystemError as exc:
        logger.error("%s: %s", name, exc)
        return ExitCode.UNSTABLE
    except MomentumLabError as exc:
        logger.error("%s: %s", name, exc)
        return ExitCode.CHECK_FAILED


if __name__ == "__main__":
    raise SystemExit(main())
