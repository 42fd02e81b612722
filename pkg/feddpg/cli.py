"""
Command-line interface for feddpg
"""

import argparse
import json
import logging
import sys
import traceback
from typing import Any, List, Optional

from feddpg.config import Config, apply_overrides, load_config
from feddpg.controller import ExperimentRunner, generate_data_files
from feddpg.errors import FedDPGError
from feddpg.gradcheck import DEFAULT_TOLERANCE, gradient_check_report

logger = logging.getLogger(__name__)


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", help="Path to configuration file (YAML)", default=None)

    parser.add_argument("--out", "-o", help="Output directory for results", default=None)

    parser.add_argument("--seed", help="Experiment seed", type=int, default=None)

    parser.add_argument("--rounds", help="Number of federated rounds", type=int, default=None)

    parser.add_argument(
        "--log-level",
        "-l",
        help="Logging level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        default=None,
    )

    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override a configuration value (repeatable)",
    )

    parser.add_argument(
        "--workers", help="Worker processes for client training", type=int, default=None
    )

    parser.add_argument(
        "--no-progress", help="Disable progress bars", action="store_true", default=False
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="feddpg - federated dynamic prompt generation simulator"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", help="Run federated training")
    _add_common_arguments(train)

    ablate = subparsers.add_parser("ablate", help="Compare [P;x], x and P input configurations")
    _add_common_arguments(ablate)

    grid = subparsers.add_parser("grid", help="Selection ratio x prompt length x hidden grid")
    _add_common_arguments(grid)
    grid.add_argument(
        "--all-seeds",
        action="store_true",
        default=False,
        help="Repeat the grid for every seed in experiment.seeds",
    )

    unlearn = subparsers.add_parser("unlearn", help="Federated training then client unlearning")
    _add_common_arguments(unlearn)

    compare = subparsers.add_parser("compare", help="Dynamic generator vs static soft prompt")
    _add_common_arguments(compare)

    evaluate = subparsers.add_parser("eval", help="Evaluate a checkpoint or check gradients")
    _add_common_arguments(evaluate)
    evaluate.add_argument("--checkpoint", help="Generator checkpoint (.fdpg)", default=None)
    evaluate.add_argument("--encoder", help="Encoder checkpoint (.fdpg)", default=None)
    evaluate.add_argument(
        "--gradcheck",
        action="store_true",
        default=False,
        help="Compare analytic gradients with finite differences on a small model",
    )

    gen_data = subparsers.add_parser("gen-data", help="Write the synthetic task as JSON-lines")
    gen_data.add_argument("--config", "-c", help="Path to configuration file (YAML)", default=None)
    gen_data.add_argument("--out", "-o", help="Output directory", required=True)
    gen_data.add_argument("--seed", help="Task seed", type=int, default=None)
    gen_data.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE"
    )

    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    """Load the config file, then apply --set overrides and the dedicated flags"""
    config = load_config(args.config)
    overrides: List[str] = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if getattr(args, "rounds", None) is not None:
        overrides.append(f"experiment.rounds={args.rounds}")
    if getattr(args, "log_level", None):
        overrides.append(f"experiment.log_level={args.log_level}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"federation.parallel_clients={args.workers}")
    if getattr(args, "no_progress", False):
        overrides.append("experiment.show_progress=false")
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _print_json(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def run_command(args: argparse.Namespace) -> int:
    config = resolve_config(args)

    if args.command == "gen-data":
        _print_json(generate_data_files(config, args.out))
        return 0

    if args.command == "eval" and args.gradcheck:
        results = gradient_check_report(seed=config.experiment.seed)
        payload = {name: r.to_dict() for name, r in results.items()}
        _print_json(payload)
        return 0 if all(r.passed(DEFAULT_TOLERANCE) for r in results.values()) else 1

    with ExperimentRunner(config, command=args.command, output_dir=args.out) as runner:
        if args.command == "train":
            result = runner.run_experiment()
        elif args.command == "ablate":
            result = runner.run_ablation()
        elif args.command == "grid":
            seeds = config.experiment.seeds if args.all_seeds else None
            result = runner.run_grid(seeds)
        elif args.command == "unlearn":
            result = runner.run_unlearning()
        elif args.command == "compare":
            result = runner.run_compare()
        else:
            if not args.checkpoint:
                raise FedDPGError("eval needs --checkpoint or --gradcheck")
            result = {
                "checkpoint": args.checkpoint,
                "accuracy": runner.evaluate_checkpoint(args.checkpoint, args.encoder),
            }
        result = dict(result, run_dir=str(runner.run_dir))
    _print_json(result)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point

    Returns:
        Exit code: 0 on success, 1 on a reported error, 2 on an unexpected failure
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run_command(args)
    except FedDPGError as e:
        logger.debug(f"{args.command} failed: {e}")
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
