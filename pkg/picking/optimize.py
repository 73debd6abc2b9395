"""
Iterative pick refinement: apply chain-predicted deltas, re-derive cups and features,
score each pose with the PSP model and keep the best one seen.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import FORMAT_VERSION, OptimizerConfig, PickConfig
from picking.common import PickOptError, write_jsonl
from picking.geometry import AdjacencyInfo, adjacency_graph
from picking.learn import AutoregressiveChain, predict_chain
from picking.pick import DEFAULT_EOAT, DEFAULT_PICK_CONFIG, EoatModel, PickAction, make_action
from picking.scene import SensorFrame
from picking.success import PspModel

logger = logging.getLogger(__name__)

TRACE_KIND = "trace"
DEFAULT_OPTIMIZER = OptimizerConfig()


@dataclass(frozen=True)
class TraceStep:
    action: PickAction
    score: float
    n_cups: int

    def to_dict(self) -> Dict[str, Any]:
        return {"action": self.action.to_dict(), "score": self.score, "n_cups": self.n_cups}


@dataclass(frozen=True)
class RefinementTrace:
    """steps[0] is the initial action; best_index points at the highest PSP score (first on ties)"""
    steps: Tuple[TraceStep, ...]
    best_index: int
    iterations_run: int
    stop_reason: str = "iterations"

    @property
    def best(self) -> TraceStep:
        return self.steps[self.best_index]

    @property
    def improvement(self) -> float:
        return self.best.score - self.steps[0].score

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "best_index": self.best_index,
            "iterations_run": self.iterations_run,
            "stop_reason": self.stop_reason,
        }


@dataclass(frozen=True)
class OptimizeResult:
    index: int
    action: Optional[PickAction]
    trace: Optional[RefinementTrace]
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _nearest_segment_cell(frame: SensorFrame, segment: int) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """For every grid cell, (row, col) of the closest cell of `segment`; None if the segment is gone"""
    def build():
        mask = frame.segment_mask(segment)
        if not mask.any():
            return None
        _, indices = ndimage.distance_transform_edt(~mask, return_indices=True)
        return indices[0], indices[1]
    return frame.cached(("nearest_cell", segment), build)


def clamp_to_segment(frame: SensorFrame, segment: int, x: float, y: float) -> Optional[Tuple[float, float]]:
    """Keep (x, y) if it lies on the segment, otherwise move it to the nearest segment cell center"""
    x0, y0, x1, y1 = frame.bounds
    x, y = min(max(x, x0), x1), min(max(y, y0), y1)
    row, col = frame.cell_of(x, y)
    if frame.segmentgrid[row, col] == segment:
        return x, y
    nearest = _nearest_segment_cell(frame, segment)
    if nearest is None:
        return None
    rows, cols = nearest
    r, c = int(rows[row, col]), int(cols[row, col])
    return float(frame.x_centers[c]), float(frame.y_centers[r])


def optimize_pick(frame: SensorFrame, initial: PickAction, chain: AutoregressiveChain, psp: PspModel,
                  K: Optional[int] = None, config: OptimizerConfig = DEFAULT_OPTIMIZER,
                  adjacency: Optional[Mapping[int, AdjacencyInfo]] = None, eoat: EoatModel = DEFAULT_EOAT,
                  settings: PickConfig = DEFAULT_PICK_CONFIG) -> Tuple[PickAction, RefinementTrace]:
    iterations = config.iterations if K is None else K
    if iterations < 1:
        raise ValueError(f"K must be at least 1, got {iterations}")
    if adjacency is None:
        adjacency = adjacency_graph(frame, psp.base.geometry.adjacency_gap)
    segment = initial.target_segment

    phi = psp.features(frame, initial, adjacency)
    steps = [TraceStep(initial, psp.prob(phi), len(initial.cups))]
    current = initial
    stop_reason = "iterations"
    for k in range(1, iterations + 1):
        dx, dy, dr = (config.step_size * v for v in predict_chain(chain, phi))
        if abs(dx) < config.min_step[0] and abs(dy) < config.min_step[1] and abs(dr) < config.min_step[2]:
            stop_reason = "converged"
            break
        position = clamp_to_segment(frame, segment, current.x + dx, current.y + dy)
        if position is None:
            stop_reason = "left_segment"
            break
        candidate = make_action(frame, position[0], position[1], current.r + dr, segment, eoat, settings)
        try:
            phi = psp.features(frame, candidate, adjacency)
        except PickOptError as e:
            logger.debug(f"Refinement of segment {segment} stopped at iteration {k}: {e}")
            stop_reason = "left_segment"
            break
        steps.append(TraceStep(candidate, psp.prob(phi), len(candidate.cups)))
        current = candidate

    scores = np.asarray([s.score for s in steps])
    best_index = int(np.argmax(scores))
    trace = RefinementTrace(steps=tuple(steps), best_index=best_index, iterations_run=len(steps) - 1,
                            stop_reason=stop_reason)
    return steps[best_index].action, trace


def optimize_batch(items: Sequence[Tuple[SensorFrame, PickAction]], chain: AutoregressiveChain, psp: PspModel,
                   K: Optional[int] = None, config: OptimizerConfig = DEFAULT_OPTIMIZER,
                   eoat: EoatModel = DEFAULT_EOAT, settings: PickConfig = DEFAULT_PICK_CONFIG,
                   threads: int = 1) -> List[OptimizeResult]:
    """Element-wise optimize_pick; failures are recorded per item and the batch carries on"""
    if not items:
        raise ValueError("optimize_batch needs at least one (frame, action) pair")

    def work(indexed: Tuple[int, Tuple[SensorFrame, PickAction]]) -> OptimizeResult:
        index, (frame, action) = indexed
        try:
            best, trace = optimize_pick(frame, action, chain, psp, K, config, eoat=eoat, settings=settings)
            return OptimizeResult(index=index, action=best, trace=trace)
        except PickOptError as e:
            logger.warning(f"Optimization of item {index} failed: {e}")
            return OptimizeResult(index=index, action=None, trace=None, error=str(e))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, enumerate(items)))
    else:
        results = [work(item) for item in enumerate(items)]
    failed = sum(1 for r in results if not r.ok)
    logger.info(f"Optimized {len(results) - failed} of {len(results)} picks")
    return results


def mean_improvement(results: Sequence[OptimizeResult]) -> float:
    gains = [r.trace.improvement for r in results if r.ok]
    return float(np.mean(gains)) if gains else 0.0


def dump_traces(path: Path, traces: Sequence[Tuple[int, RefinementTrace]], seed: int) -> int:
    """One JSON line per (scene index, trace)"""
    header = {"kind": TRACE_KIND, "format_version": FORMAT_VERSION, "count": len(traces), "seed": seed}
    records = ({"scene_index": index, **trace.to_dict()} for index, trace in traces)
    count = write_jsonl(path, header, records)
    logger.info(f"Wrote {count} refinement traces to {path}")
    return count
