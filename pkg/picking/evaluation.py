"""
A/B evaluation harness: control (heuristic sampler + PSP ranker) against treatment
(control + refinement) over paired simulated inducts, with binomial confidence intervals.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import partial
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from prometheus_client import Counter
from scipy.stats import norm

from config import GeometryConfig, OptimizerConfig, PickConfig, RunConfig, SceneConfig, WorkspaceConfig
from picking.common import UndefinedBaselineError, substreams
from picking.geometry import AdjacencyInfo, adjacency_graph
from picking.learn import AutoregressiveChain
from picking.optimize import optimize_pick
from picking.pick import (
    DEFAULT_EOAT,
    EoatModel,
    PickAction,
    PickOutcome,
    PickResult,
    check_feasible,
    sample_candidates,
    simulate_execute,
)
from picking.scene import SegmentSummary, SensorFrame, generate_scene, render_sensor, visible_segments
from picking.success import PspModel, TrueSuccessModel

logger = logging.getLogger(__name__)

Z_95 = 1.959964
SEED_DRAW_LIMIT = 2 ** 63

INDUCTS = Counter("pickopt_inducts_total", "Simulated inducts", ["arm", "result"])
MULTIPICKS = Counter("pickopt_multipicks_total", "Simulated multi-picks", ["arm"])


@dataclass(frozen=True)
class SimulationContext:
    """Everything the simulator needs besides the per-induct random streams"""
    oracle: TrueSuccessModel
    psp: PspModel
    scene: SceneConfig
    geometry: GeometryConfig
    pick: PickConfig
    workspace: WorkspaceConfig
    eoat: EoatModel = DEFAULT_EOAT

    @classmethod
    def from_config(cls, config: RunConfig, eoat: EoatModel = DEFAULT_EOAT) -> "SimulationContext":
        return cls(
            oracle=TrueSuccessModel.from_config(config.oracle, eoat, config.geometry),
            psp=PspModel.from_config(config.psp, eoat, config.geometry),
            scene=config.scene,
            geometry=config.geometry,
            pick=config.pick,
            workspace=config.workspace,
            eoat=eoat,
        )


def z_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    if level == 0.95:
        return Z_95
    return float(norm.ppf(1.0 - (1.0 - level) / 2.0))


def proportion_ci(k: int, n: int, level: float = 0.95, method: str = "normal") -> Tuple[float, float]:
    """Binomial interval for k successes in n trials, clamped to [0, 1]"""
    if n < 1:
        raise ValueError("proportion_ci needs n >= 1")
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, n], got k={k}, n={n}")
    z = z_value(level)
    p = k / n
    if method == "normal":
        half = z * math.sqrt(p * (1.0 - p) / n)
        return max(0.0, p - half), min(1.0, p + half)
    if method == "wilson":
        denom = 1.0 + z * z / n
        center = (p + z * z / (2 * n)) / denom
        half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
        return max(0.0, center - half), min(1.0, center + half)
    raise ValueError(f"unknown interval method {method!r}")


def relative_reduction(c_missed: int, t_missed: int) -> float:
    if c_missed <= 0:
        raise UndefinedBaselineError("relative reduction is undefined when control has no missed picks")
    return (c_missed - t_missed) / c_missed


def two_proportion_test(k_c: int, n_c: int, k_t: int, n_t: int) -> Tuple[float, float]:
    """Pooled z statistic for p_c - p_t and its one-sided p-value (H1: treatment rate is lower)"""
    pooled = (k_c + k_t) / (n_c + n_t)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n_c + 1.0 / n_t))
    if se == 0.0:
        return 0.0, 0.5
    z = (k_c / n_c - k_t / n_t) / se
    return z, float(norm.sf(z))


@dataclass(frozen=True)
class RateEstimate:
    count: int
    rate: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class ArmReport:
    inducts: int
    successes: int
    missed: int
    infeasible: int
    multipick: int
    missed_rate: RateEstimate
    infeasible_rate: RateEstimate
    multipick_rate: RateEstimate

    @classmethod
    def from_counts(cls, inducts: int, successes: int, missed: int, infeasible: int, multipick: int,
                    level: float = 0.95, method: str = "normal") -> "ArmReport":
        def estimate(count: int) -> RateEstimate:
            lo, hi = proportion_ci(count, inducts, level, method)
            return RateEstimate(count=count, rate=count / inducts, ci_low=lo, ci_high=hi)

        return cls(
            inducts=inducts, successes=successes, missed=missed, infeasible=infeasible, multipick=multipick,
            missed_rate=estimate(missed), infeasible_rate=estimate(infeasible), multipick_rate=estimate(multipick),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class AbReport:
    control: ArmReport
    treatment: ArmReport
    relative_missed_reduction: Optional[float]
    significant: bool
    z_statistic: float
    p_value: float
    ci_level: float
    ci_method: str
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "control": self.control.to_dict(),
            "treatment": self.treatment.to_dict(),
            "relative_missed_reduction": self.relative_missed_reduction,
            "significant": self.significant,
            "z_statistic": self.z_statistic,
            "p_value": self.p_value,
            "ci_level": self.ci_level,
            "ci_method": self.ci_method,
            "seed": self.seed,
        }


def build_report(control: Mapping[str, int], treatment: Mapping[str, int], level: float, method: str,
                 seed: int) -> AbReport:
    c = ArmReport.from_counts(level=level, method=method, **control)
    t = ArmReport.from_counts(level=level, method=method, **treatment)
    reduction = relative_reduction(c.missed, t.missed) if c.missed > 0 else None
    significant = c.missed_rate.ci_low > t.missed_rate.ci_high or t.missed_rate.ci_low > c.missed_rate.ci_high
    z, p = two_proportion_test(c.missed, c.inducts, t.missed, t.inducts)
    return AbReport(control=c, treatment=t, relative_missed_reduction=reduction, significant=significant,
                    z_statistic=z, p_value=p, ci_level=level, ci_method=method, seed=int(seed))


def select_target(frame: SensorFrame, adjacency: Mapping[int, AdjacencyInfo],
                  min_cells: int) -> Optional[SegmentSummary]:
    """Topmost rank-1 segment large enough to pick; ties go to the lower id"""
    eligible = [s for s in visible_segments(frame)
                if s.cell_count >= min_cells and adjacency[s.id].rank == 1]
    if not eligible:
        return None
    return min(eligible, key=lambda s: (-adjacency[s.id].height, s.id))


def run_control_pick(frame: SensorFrame, segment: SegmentSummary, k: int, psp: PspModel, seed: int,
                     ctx: Optional[SimulationContext] = None,
                     adjacency: Optional[Mapping[int, AdjacencyInfo]] = None) -> Optional[PickAction]:
    """Best-scoring feasible candidate, or None when no candidate is feasible"""
    eoat = ctx.eoat if ctx else DEFAULT_EOAT
    settings = ctx.pick if ctx else PickConfig()
    workspace = ctx.workspace if ctx else WorkspaceConfig()
    if adjacency is None:
        adjacency = adjacency_graph(frame, psp.base.geometry.adjacency_gap)
    candidates = sample_candidates(frame, segment, k, seed, eoat, settings)
    feasible = [c for c in candidates if check_feasible(frame, c, workspace)]
    if not feasible:
        logger.debug(f"None of {len(candidates)} candidates on segment {segment.id} is feasible")
        return None
    scores = [psp.prob_for_action(frame, c, adjacency) for c in feasible]
    return feasible[int(np.argmax(scores))]


@dataclass(frozen=True)
class InductOutcome:
    index: int
    control: PickOutcome
    treatment: PickOutcome


def simulate_induct(index: int, seed: int, ctx: SimulationContext, chain: AutoregressiveChain,
                    k: int, optimizer: OptimizerConfig) -> InductOutcome:
    """One paired induct: both arms share the scene, the candidates and the outcome draw"""
    scene_rng, sampler_rng, outcome_rng = substreams(seed, index, 3)
    scene_seed = int(scene_rng.integers(SEED_DRAW_LIMIT))
    sampler_seed = int(sampler_rng.integers(SEED_DRAW_LIMIT))
    outcome_seed = int(outcome_rng.integers(SEED_DRAW_LIMIT))

    frame = render_sensor(generate_scene(ctx.scene, scene_seed), ctx.geometry.resolution)
    adjacency = adjacency_graph(frame, ctx.geometry.adjacency_gap)
    target = select_target(frame, adjacency, ctx.pick.min_segment_cells)
    control_action = None
    if target is not None:
        control_action = run_control_pick(frame, target, k, ctx.psp, sampler_seed, ctx, adjacency)

    treatment_action = control_action
    if control_action is not None:
        refined, _ = optimize_pick(frame, control_action, chain, ctx.psp, config=optimizer, adjacency=adjacency,
                                   eoat=ctx.eoat, settings=ctx.pick)
        if check_feasible(frame, refined, ctx.workspace):
            treatment_action = refined

    def execute(action: Optional[PickAction]) -> PickOutcome:
        rng = np.random.default_rng(outcome_seed)
        return simulate_execute(frame, action, ctx.oracle, rng, ctx.workspace, ctx.eoat, ctx.pick)

    return InductOutcome(index=index, control=execute(control_action), treatment=execute(treatment_action))


def _tally(outcomes: List[PickOutcome]) -> Dict[str, int]:
    return {
        "inducts": len(outcomes),
        "successes": sum(o.result == PickResult.SUCCESS for o in outcomes),
        "missed": sum(o.result == PickResult.MISSED for o in outcomes),
        "infeasible": sum(o.result == PickResult.INFEASIBLE for o in outcomes),
        "multipick": sum(o.multipick for o in outcomes),
    }


def _record_metrics(arm: str, outcomes: List[PickOutcome]) -> None:
    for result in PickResult:
        INDUCTS.labels(arm=arm, result=result.value).inc(sum(o.result == result for o in outcomes))
    MULTIPICKS.labels(arm=arm).inc(sum(o.multipick for o in outcomes))


def run_ab(config: RunConfig, seed: int, chain: AutoregressiveChain, ctx: Optional[SimulationContext] = None,
           inducts: Optional[int] = None, threads: int = 1) -> AbReport:
    """Paired A/B run; inducts fan out over worker processes and results are independent of the worker count"""
    ctx = ctx or SimulationContext.from_config(config)
    n = config.ab.inducts_per_arm if inducts is None else inducts
    if n < 1:
        raise ValueError(f"inducts per arm must be at least 1, got {n}")
    logger.info(f"Running A/B test: {n} inducts per arm, k={config.ab.candidates}, "
                f"K={config.optimizer.iterations}")

    work = partial(simulate_induct, seed=seed, ctx=ctx, chain=chain, k=config.ab.candidates,
                   optimizer=config.optimizer)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(n), chunksize=max(1, n // (8 * threads))))
    else:
        results = [work(i) for i in range(n)]

    control = [r.control for r in results]
    treatment = [r.treatment for r in results]
    _record_metrics("control", control)
    _record_metrics("treatment", treatment)
    report = build_report(_tally(control), _tally(treatment), config.ab.ci_level, config.ab.ci_method, seed)
    logger.info(f"Missed rate: control {report.control.missed_rate.rate:.4%}, "
                f"treatment {report.treatment.missed_rate.rate:.4%} (significant: {report.significant})")
    return report
