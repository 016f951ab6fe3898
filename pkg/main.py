"""
Electrolyser Inverse Toolkit CLI
Runs forward solves, measurement campaigns, reconstructions and verification studies from a YAML config.
"""

import argparse
import json
import logging
import sys
from typing import Optional

import yaml
from pydantic import ValidationError

# Configuration
from config import get_settings

from services.coefficient_service import CoefficientError
from services.elliptic_service import EllipticSolveError
from services.forward_service import ForwardSolveError
from services.measurement_service import MeasurementError
from services.reconstruction_service import ReconstructionError
from services.storage_service import StorageError
from services.workflow_service import SUBCOMMANDS, ConfigError, VerificationError, WorkflowService, load_run_config
from utils.expression_parser import ExpressionError
from utils.grid import GridError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_USAGE = 3

CONFIG_ERRORS = (ConfigError, ValidationError, yaml.YAMLError, CoefficientError, ExpressionError, GridError)
NUMERICAL_ERRORS = (
    ForwardSolveError,
    EllipticSolveError,
    MeasurementError,
    ReconstructionError,
    StorageError,
    VerificationError,
)


class UsageError(Exception):
    """Raised for unknown subcommands or malformed flags."""
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises instead of exiting, so usage errors get their own exit code."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def setup_argument_parser() -> argparse.ArgumentParser:
    """Build the command-line parser."""
    settings = get_settings()
    parser = ArgumentParser(
        prog="electrolyser",
        description=settings.app_description,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s forward --config configs/example.yaml --out runs/forward
  %(prog)s measure --config configs/example.yaml --seed 7
  %(prog)s verify-linearisation --config configs/example.yaml --tol 1e-12
  %(prog)s reconstruct-phi --config configs/example.yaml --threads 8
  %(prog)s convergence --config configs/example.yaml

Exit codes:
  0 success, 1 invalid configuration, 2 numerical failure, 3 usage error
        """
    )

    parser.add_argument(
        "subcommand",
        choices=SUBCOMMANDS,
        help="Workflow to run"
    )

    parser.add_argument(
        "--config",
        type=str,
        required=True,
        help="YAML run configuration"
    )

    parser.add_argument(
        "--out",
        type=str,
        default=None,
        help="Output directory (overrides output_dir in the config)"
    )

    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Noise seed (overrides seed in the config)"
    )

    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"Worker threads for concurrent solves (default: {settings.max_workers})"
    )

    parser.add_argument(
        "--tol",
        type=float,
        default=None,
        help="Linear solver tolerance (overrides solver.linear_tol)"
    )

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    parser = setup_argument_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None and args.threads < 1:
            parser.error("--threads must be at least 1")
        if args.tol is not None and args.tol <= 0:
            parser.error("--tol must be positive")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        config = load_run_config(args.config)
        overrides = {}
        if args.out is not None:
            overrides["output_dir"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.tol is not None:
            overrides["solver"] = config.solver.model_copy(update={"linear_tol": args.tol})
        config = config.model_copy(update=overrides)

        logger.info(f"🚀 Running {args.subcommand} with {args.config}")
        summary = WorkflowService(config, max_workers=args.threads).run(args.subcommand)
        print(json.dumps(summary, indent=2, default=str))
        return EXIT_OK
    except CONFIG_ERRORS as e:
        logger.error(f"❌ Invalid configuration: {e}")
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as e:
        logger.error(f"❌ Numerical failure ({type(e).__name__}): {e}")
        return EXIT_NUMERICAL
    except Exception as e:
        logger.exception(f"❌ Unexpected error: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
