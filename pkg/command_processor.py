"""
Command Processor - maps subcommands to pipeline stages and turns failures into exit codes
"""

import argparse
import logging
from pathlib import Path
from typing import Callable, Dict, Optional

from picking.common import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, PickOptError
from pipeline_core import PipelineCore, PipelineStage

logger = logging.getLogger(__name__)


def _path(value: Optional[str]) -> Optional[Path]:
    return Path(value) if value else None


class CommandProcessor:
    """Runs one subcommand against the pipeline"""

    def __init__(self, pipeline: PipelineCore):
        self.pipeline = pipeline

        # Map of available subcommands to their handler functions
        self.action_handlers: Dict[str, Callable[[argparse.Namespace], int]] = {
            "gen-scenes": self._handle_gen_scenes,
            "collect-picks": self._handle_collect_picks,
            "gen-dataset": self._handle_gen_dataset,
            "train": self._handle_train,
            "optimize": self._handle_optimize,
            "abtest": self._handle_abtest,
            "dump-trace": self._handle_dump_trace,
            "compare": self._handle_compare,
            "dump-frame": self._handle_dump_frame,
        }

    def process_command(self, command: str, args: argparse.Namespace) -> int:
        """Execute a subcommand and return the process exit code"""
        handler = self.action_handlers.get(command)
        if handler is None:
            logger.error(f"No handler found for command: {command}")
            return EXIT_CONFIG
        logger.info(f"Running command: {command}")
        try:
            return handler(args)
        except PickOptError as e:
            self.pipeline.update_stage(PipelineStage.ERROR)
            logger.error(f"{command} failed: {e}")
            return e.exit_code
        except (OSError, ValueError) as e:
            self.pipeline.update_stage(PipelineStage.ERROR)
            logger.error(f"{command} failed: {e}")
            return EXIT_RUNTIME

    def _handle_gen_scenes(self, args: argparse.Namespace) -> int:
        self.pipeline.gen_scenes(_path(args.out), args.count)
        return EXIT_OK

    def _handle_collect_picks(self, args: argparse.Namespace) -> int:
        self.pipeline.collect_picks(_path(args.scenes), _path(args.out))
        return EXIT_OK

    def _handle_gen_dataset(self, args: argparse.Namespace) -> int:
        self.pipeline.gen_dataset(_path(args.scenes), _path(args.picks), _path(args.out))
        return EXIT_OK

    def _handle_train(self, args: argparse.Namespace) -> int:
        _, table = self.pipeline.train(_path(args.dataset), args.kind, _path(args.out))
        print(table, end="")
        return EXIT_OK

    def _handle_optimize(self, args: argparse.Namespace) -> int:
        gain = self.pipeline.optimize(_path(args.model), _path(args.scenes), _path(args.picks),
                                      _path(args.features_csv))
        print(f"Mean PSP improvement: {gain:+.4f}")
        return EXIT_OK

    def _handle_abtest(self, args: argparse.Namespace) -> int:
        report = self.pipeline.abtest(_path(args.model), args.inducts, _path(args.reports))
        if not report.significant:
            logger.warning("Missed-pick rates are not significantly different at the configured level")
        return EXIT_OK

    def _handle_dump_trace(self, args: argparse.Namespace) -> int:
        self.pipeline.dump_trace(_path(args.model), _path(args.scenes), _path(args.out), args.limit)
        return EXIT_OK

    def _handle_compare(self, args: argparse.Namespace) -> int:
        _, table = self.pipeline.compare(_path(args.scenes), _path(args.picks), args.datasets)
        print(table, end="")
        return EXIT_OK

    def _handle_dump_frame(self, args: argparse.Namespace) -> int:
        self.pipeline.dump_frame(_path(args.scenes), args.index, _path(args.out))
        return EXIT_OK
