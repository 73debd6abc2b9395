"""
Pick Optimization Pipeline Core - stage coordination and file I/O for every subcommand
"""

import logging
from contextlib import contextmanager
from enum import Enum, auto
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

from config import FORMAT_VERSION, STAGE_TAGS, RunConfig
from picking.common import (
    DataFormatError,
    MissingSegmentError,
    PickOptError,
    derive_seed,
    read_jsonl,
    substream,
    substreams,
    write_json,
    write_jsonl,
)
from picking.datagen import ExecutedPick, build_dataset, load_dataset, save_dataset
from picking.evaluation import AbReport, SimulationContext, run_ab, run_control_pick, select_target
from picking.features import write_feature_csv
from picking.geometry import adjacency_graph
from picking.learn import ChainComparison, compare_chain_kinds, held_out_rmse, load_chain, save_chain, train_chain
from picking.optimize import RefinementTrace, dump_traces, mean_improvement, optimize_batch, optimize_pick
from picking.pick import action_from_dict, pick_record, simulate_execute
from picking.reports import render_ab_report, render_rmse_table, write_text
from picking.scene import Scene, SensorFrame, generate_scene, render_sensor, segment_polygon, visible_segments
from picking.success import describe

logger = logging.getLogger(__name__)

SCENES_KIND = "scenes"
PICKS_KIND = "picks"
FRAME_KIND = "frame"
SEED_DRAW_LIMIT = 2 ** 63


class PipelineStage(Enum):
    """Pipeline operational states"""
    IDLE = auto()
    GENERATING_SCENES = auto()
    COLLECTING_PICKS = auto()
    BUILDING_DATASET = auto()
    TRAINING = auto()
    OPTIMIZING = auto()
    AB_TESTING = auto()
    DUMPING_TRACES = auto()
    COMPARING_MODELS = auto()
    DUMPING_FRAME = auto()
    ERROR = auto()


@contextmanager
def removing_on_failure(paths: Sequence[Path]) -> Iterator[None]:
    """Delete any regular file among `paths` if the block raises"""
    try:
        yield
    except BaseException:
        for path in paths:
            if Path(path).is_file():
                Path(path).unlink()
                logger.warning(f"Removed partial output {path}")
        raise


class PipelineCore:
    """Runs one subcommand at a time against a resolved RunConfig"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.ctx = SimulationContext.from_config(config)
        self.stage = PipelineStage.IDLE
        logger.info(f"Pipeline initialized (seed {config.seed}, threads {config.threads})")

    def update_stage(self, new_stage: PipelineStage) -> None:
        if self.stage != new_stage:
            self.stage = new_stage
            logger.debug(f"Stage changed to: {new_stage.name}")

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.config.seed, STAGE_TAGS[stage])

    # ------------------------------------------------------------------
    # Scenes and executed picks
    # ------------------------------------------------------------------

    def gen_scenes(self, out_path: Optional[Path] = None, count: Optional[int] = None) -> Path:
        self.update_stage(PipelineStage.GENERATING_SCENES)
        out_path = Path(out_path or self.config.paths.scenes)
        count = self.config.n_scenes if count is None else count
        seed = self.stage_seed("scenes")
        if count == 0:
            logger.warning("Scene count is 0; writing a header-only scene file")

        def records():
            for i in range(count):
                scene_seed = int(substream(seed, i).integers(SEED_DRAW_LIMIT))
                yield {"index": i, **generate_scene(self.config.scene, scene_seed).to_dict()}

        header = {"kind": SCENES_KIND, "format_version": FORMAT_VERSION, "count": count, "seed": seed}
        with removing_on_failure([out_path]):
            write_jsonl(out_path, header, records())
        logger.info(f"Wrote {count} scenes to {out_path}")
        self.update_stage(PipelineStage.IDLE)
        return out_path

    def load_scenes(self, path: Optional[Path] = None) -> List[Scene]:
        _, records = read_jsonl(Path(path or self.config.paths.scenes), SCENES_KIND, FORMAT_VERSION)
        return [Scene.from_dict(r) for r in records]

    def render(self, scene: Scene) -> SensorFrame:
        return render_sensor(scene, self.config.geometry.resolution)

    def collect_picks(self, scenes_path: Optional[Path] = None, out_path: Optional[Path] = None) -> Path:
        """One control-arm pick per scene, executed against the oracle and logged"""
        self.update_stage(PipelineStage.COLLECTING_PICKS)
        scenes = self.load_scenes(scenes_path)
        out_path = Path(out_path or self.config.paths.picks)
        seed = self.stage_seed("picks")
        ctx = self.ctx

        def records():
            for i, scene in enumerate(scenes):
                frame = self.render(scene)
                adjacency = adjacency_graph(frame, ctx.geometry.adjacency_gap)
                sampler_rng, outcome_rng = substreams(seed, i, 2)
                target = select_target(frame, adjacency, ctx.pick.min_segment_cells)
                action = None
                if target is not None:
                    action = run_control_pick(frame, target, self.config.ab.candidates, ctx.psp,
                                              int(sampler_rng.integers(SEED_DRAW_LIMIT)), ctx, adjacency)
                outcome = simulate_execute(frame, action, ctx.oracle, outcome_rng, ctx.workspace, ctx.eoat, ctx.pick)
                yield pick_record(scene.seed, i, action, outcome)

        header = {"kind": PICKS_KIND, "format_version": FORMAT_VERSION, "count": len(scenes), "seed": seed}
        with removing_on_failure([out_path]):
            written = write_jsonl(out_path, header, records())
        logger.info(f"Logged {written} executed picks to {out_path}")
        self.update_stage(PipelineStage.IDLE)
        return out_path

    def load_executed_picks(self, scenes_path: Optional[Path] = None,
                            picks_path: Optional[Path] = None) -> List[ExecutedPick]:
        """Executed picks with their re-rendered frames; infeasible records carry no action and are skipped"""
        scenes = self.load_scenes(scenes_path)
        _, records = read_jsonl(Path(picks_path or self.config.paths.picks), PICKS_KIND, FORMAT_VERSION)
        picks = []
        for record in records:
            if record.get("action") is None:
                continue
            index = int(record["pick_index"])
            if not 0 <= index < len(scenes):
                raise DataFormatError(f"pick record refers to scene {index}, but only {len(scenes)} scenes exist")
            frame = self.render(scenes[index])
            action = action_from_dict(frame, record["action"], self.ctx.eoat, self.ctx.pick)
            picks.append(ExecutedPick(scene_seed=int(record["scene_seed"]), pick_index=index, frame=frame,
                                      action=action))
        logger.info(f"Loaded {len(picks)} executed picks")
        return picks

    # ------------------------------------------------------------------
    # Dataset and training
    # ------------------------------------------------------------------

    def gen_dataset(self, scenes_path: Optional[Path] = None, picks_path: Optional[Path] = None,
                    out_path: Optional[Path] = None) -> Path:
        self.update_stage(PipelineStage.BUILDING_DATASET)
        picks = self.load_executed_picks(scenes_path, picks_path)
        out_path = Path(out_path or self.config.paths.dataset)
        settings = self.config.dataset
        dataset = build_dataset(picks, settings.noise, self.ctx.psp, settings.split_fraction,
                                self.stage_seed("dataset"), self.ctx.eoat, self.ctx.pick, self.config.threads)
        with removing_on_failure([out_path]):
            save_dataset(out_path, dataset)
        self.update_stage(PipelineStage.IDLE)
        return out_path

    def model_path(self, kind: Optional[str] = None) -> Path:
        """paths.model for the configured chain kind, model_<kind>.json beside it for the other kind"""
        kind = kind or self.config.chain.kind
        configured = Path(self.config.paths.model)
        if kind == self.config.chain.kind:
            return configured
        return configured.parent / f"model_{kind}.json"

    def train(self, dataset_path: Optional[Path] = None, kind: Optional[str] = None,
              out_path: Optional[Path] = None) -> Tuple[Path, str]:
        """Train a chain, write the model and return the held-out RMSE table"""
        self.update_stage(PipelineStage.TRAINING)
        kind = kind or self.config.chain.kind
        dataset = load_dataset(Path(dataset_path or self.config.paths.dataset))
        out_path = Path(out_path or self.model_path(kind))
        chain = train_chain(dataset, kind, self.config.chain, self.stage_seed("train"), self.config.threads)
        rmse = held_out_rmse(chain, dataset)
        logger.info(f"{kind} held-out RMSE: x={rmse[0]:.4f} m, y={rmse[1]:.4f} m, r={rmse[2]:.4f} rad")
        table = render_rmse_table({kind.upper(): rmse})
        table_path = Path(self.config.paths.reports) / f"rmse_{kind}.txt"
        with removing_on_failure([out_path, table_path]):
            save_chain(out_path, chain)
            write_text(table_path, table)
        self.update_stage(PipelineStage.IDLE)
        return out_path, table

    def compare(self, scenes_path: Optional[Path] = None, picks_path: Optional[Path] = None,
                n_datasets: int = 3) -> Tuple[ChainComparison, str]:
        """GBDT against MLP over datasets rebuilt with n_datasets seeds; renders the median RMSE table"""
        if n_datasets < 1:
            raise ValueError(f"model comparison needs at least one dataset, got {n_datasets}")
        self.update_stage(PipelineStage.COMPARING_MODELS)
        picks = self.load_executed_picks(scenes_path, picks_path)
        settings = self.config.dataset
        base_seed = self.stage_seed("dataset")
        datasets = [
            build_dataset(picks, settings.noise, self.ctx.psp, settings.split_fraction,
                          int(substream(base_seed, i).integers(SEED_DRAW_LIMIT)), self.ctx.eoat, self.ctx.pick,
                          self.config.threads)
            for i in range(n_datasets)
        ]
        comparison = compare_chain_kinds(datasets, ("gbdt", "mlp"), self.config.chain, self.stage_seed("train"),
                                         self.config.threads)
        table = render_rmse_table({kind.upper(): rmse for kind, rmse in comparison.medians.items()})
        table_path = Path(self.config.paths.reports) / "rmse_comparison.txt"
        with removing_on_failure([table_path]):
            write_text(table_path, table)
        if not comparison.leads("gbdt", "mlp"):
            logger.warning("GBDT median RMSE does not lead MLP on this data")
        self.update_stage(PipelineStage.IDLE)
        return comparison, table

    # ------------------------------------------------------------------
    # Optimization and evaluation
    # ------------------------------------------------------------------

    def optimize(self, model_path: Optional[Path] = None, scenes_path: Optional[Path] = None,
                 picks_path: Optional[Path] = None, features_csv: Optional[Path] = None) -> float:
        """Refine every logged pick and report the mean PSP improvement"""
        self.update_stage(PipelineStage.OPTIMIZING)
        chain = load_chain(Path(model_path or self.model_path()))
        picks = self.load_executed_picks(scenes_path, picks_path)
        if not picks:
            raise MissingSegmentError("no feasible logged picks to optimize")
        items = [(p.frame, p.action) for p in picks]
        results = optimize_batch(items, chain, self.ctx.psp, config=self.config.optimizer, eoat=self.ctx.eoat,
                                 settings=self.ctx.pick, threads=self.config.threads)
        gain = mean_improvement(results)
        logger.info(f"Mean PSP improvement over {len(results)} picks: {gain:+.4f}")
        if features_csv is not None:
            rows = [self.ctx.psp.features(p.frame, r.action) for p, r in zip(picks, results) if r.ok]
            with removing_on_failure([Path(features_csv)]):
                write_feature_csv(Path(features_csv), rows)
        self.update_stage(PipelineStage.IDLE)
        return gain

    def abtest(self, model_path: Optional[Path] = None, inducts: Optional[int] = None,
               reports_dir: Optional[Path] = None) -> AbReport:
        self.update_stage(PipelineStage.AB_TESTING)
        chain = load_chain(Path(model_path or self.model_path()))
        reports_dir = Path(reports_dir or self.config.paths.reports)
        logger.info(f"Oracle weights: {describe(self.ctx.oracle)}")
        json_path, text_path = reports_dir / "ab_report.json", reports_dir / "ab_report.txt"
        with removing_on_failure([json_path, text_path]):
            report = run_ab(self.config, self.stage_seed("abtest"), chain, self.ctx, inducts, self.config.threads)
            write_json(json_path, {"kind": "ab_report", "format_version": FORMAT_VERSION, **report.to_dict()})
            write_text(text_path, render_ab_report(report))
        self.update_stage(PipelineStage.IDLE)
        return report

    def dump_trace(self, model_path: Optional[Path] = None, scenes_path: Optional[Path] = None,
                   out_path: Optional[Path] = None, limit: int = 10) -> Path:
        """Refinement traces for the control pick of the first `limit` scenes"""
        self.update_stage(PipelineStage.DUMPING_TRACES)
        chain = load_chain(Path(model_path or self.model_path()))
        scenes = self.load_scenes(scenes_path)[:limit]
        out_path = Path(out_path or Path(self.config.paths.reports) / "traces.jsonl")
        seed = self.stage_seed("optimize")
        traces: List[Tuple[int, RefinementTrace]] = []
        for i, scene in enumerate(scenes):
            frame = self.render(scene)
            adjacency = adjacency_graph(frame, self.ctx.geometry.adjacency_gap)
            target = select_target(frame, adjacency, self.ctx.pick.min_segment_cells)
            if target is None:
                logger.debug(f"Scene {i} has no pickable segment")
                continue
            action = run_control_pick(frame, target, self.config.ab.candidates, self.ctx.psp,
                                      int(substream(seed, i).integers(SEED_DRAW_LIMIT)), self.ctx, adjacency)
            if action is None:
                continue
            try:
                _, trace = optimize_pick(frame, action, chain, self.ctx.psp, config=self.config.optimizer,
                                         adjacency=adjacency, eoat=self.ctx.eoat, settings=self.ctx.pick)
            except PickOptError as e:
                logger.warning(f"Trace for scene {i} failed: {e}")
                continue
            traces.append((i, trace))
        with removing_on_failure([out_path]):
            dump_traces(out_path, traces, seed)
        self.update_stage(PipelineStage.IDLE)
        return out_path

    def dump_frame(self, scenes_path: Optional[Path] = None, index: int = 0,
                   out_path: Optional[Path] = None) -> Path:
        """Rendered sensor frame of one stored scene as JSON"""
        self.update_stage(PipelineStage.DUMPING_FRAME)
        scenes = self.load_scenes(scenes_path)
        if not 0 <= index < len(scenes):
            raise DataFormatError(f"scene index {index} is out of range for {len(scenes)} scenes")
        frame = self.render(scenes[index])
        out_path = Path(out_path or Path(self.config.paths.reports) / f"frame_{index}.json")
        record = {"kind": FRAME_KIND, "format_version": FORMAT_VERSION, "scene_index": index,
                  "scene_seed": scenes[index].seed, **frame.to_dict(),
                  "segments": [{"id": s.id, "kind": s.kind.value, "cell_count": s.cell_count,
                                "centroid": list(s.centroid),
                                "polygon": [list(v) for v in segment_polygon(frame, s.id)]}
                               for s in visible_segments(frame)]}
        with removing_on_failure([out_path]):
            write_json(out_path, record)
        logger.info(f"Wrote frame of scene {index} ({frame.shape[0]} x {frame.shape[1]} cells) to {out_path}")
        self.update_stage(PipelineStage.IDLE)
        return out_path
