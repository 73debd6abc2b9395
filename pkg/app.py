"""
pickopt - learned pick refinement for suction picking, runs with: pickopt <command>
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from prometheus_client import start_http_server

from command_processor import CommandProcessor
from config import DEFAULT_RUN_CONFIG, LOG_FILE, LOG_FORMAT, LOG_LEVEL, load_run_config
from picking.common import EXIT_RUNTIME, PickOptError
from pipeline_core import PipelineCore

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pickopt", description="Simulated suction picking with learned refinement")
    parser.add_argument("--config", help=f"Run config JSON (default: {DEFAULT_RUN_CONFIG.name} if present)")
    parser.add_argument("--seed", type=lambda v: int(v, 0), help="Master seed")
    parser.add_argument("--threads", type=int, help="Worker threads")
    parser.add_argument("--log-file", default=LOG_FILE or None, help="Also log to this file")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--metrics-port", type=int, help="Expose prometheus counters on this port")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="Generate synthetic scenes")
    p.add_argument("--out", help="Scene file")
    p.add_argument("--count", type=int, help="Number of scenes")

    p = sub.add_parser("collect-picks", help="Run one control pick per scene and log outcomes")
    p.add_argument("--scenes", help="Scene file")
    p.add_argument("--out", help="Pick log")

    p = sub.add_parser("gen-dataset", help="Build perturbation training pairs")
    p.add_argument("--scenes", help="Scene file")
    p.add_argument("--picks", help="Pick log")
    p.add_argument("--out", help="Dataset file")

    p = sub.add_parser("train", help="Train a refinement chain and print held-out RMSE")
    p.add_argument("--dataset", help="Dataset file")
    p.add_argument("--kind", choices=["gbdt", "mlp"], help="Regressor kind")
    p.add_argument("--out", help="Model file")

    p = sub.add_parser("optimize", help="Refine logged picks and report the mean PSP gain")
    p.add_argument("--model", help="Model file")
    p.add_argument("--scenes", help="Scene file")
    p.add_argument("--picks", help="Pick log")
    p.add_argument("--features-csv", help="Write features of the refined picks as CSV")

    p = sub.add_parser("abtest", help="Run the paired A/B evaluation")
    p.add_argument("--model", help="Model file")
    p.add_argument("--inducts", type=int, help="Inducts per arm")
    p.add_argument("--reports", help="Report directory")

    p = sub.add_parser("dump-trace", help="Write refinement traces for the first scenes")
    p.add_argument("--model", help="Model file")
    p.add_argument("--scenes", help="Scene file")
    p.add_argument("--out", help="Trace file")
    p.add_argument("--limit", type=int, default=10, help="Number of scenes")

    p = sub.add_parser("compare", help="Train GBDT and MLP chains on several dataset seeds and print median RMSE")
    p.add_argument("--scenes", help="Scene file")
    p.add_argument("--picks", help="Pick log")
    p.add_argument("--datasets", type=int, default=3, help="Number of dataset seeds")

    p = sub.add_parser("dump-frame", help="Write the rendered sensor frame of one scene as JSON")
    p.add_argument("--scenes", help="Scene file")
    p.add_argument("--index", type=int, default=0, help="Scene index")
    p.add_argument("--out", help="Frame file")
    return parser


def resolve_config_path(value: Optional[str]) -> Optional[Path]:
    if value:
        return Path(value)
    return DEFAULT_RUN_CONFIG if DEFAULT_RUN_CONFIG.exists() else None


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    overrides = {"threads": args.threads} if args.threads else {}
    try:
        setup_logging(args.verbose, args.log_file)
        if args.metrics_port:
            start_http_server(args.metrics_port)
            logger.info(f"Metrics exposed on port {args.metrics_port}")
        config = load_run_config(resolve_config_path(args.config), overrides, args.seed)
    except PickOptError as e:
        logger.error(f"Configuration error: {e}")
        return e.exit_code
    except (OSError, ValueError) as e:
        logger.error(f"Startup failed: {e}")
        return EXIT_RUNTIME

    processor = CommandProcessor(PipelineCore(config))
    return processor.process_command(args.command, args)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(130)
