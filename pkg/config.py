"""
Configuration settings for the pick optimization pipeline
"""
import json
import math
import os
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from picking.common import ConfigError

# Base paths
BASE_DIR = Path(__file__).parent
TEMPLATES_DIR = BASE_DIR / "templates"
CONFIGS_DIR = BASE_DIR / "configs"
DEFAULT_RUN_CONFIG = CONFIGS_DIR / "default_run.json"

# Logging configuration
LOG_LEVEL = os.getenv("PICKOPT_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("PICKOPT_LOG_FILE", "")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Master seed fallback
SEED_ENV_VAR = "PICKOPT_SEED"

# Conveyor and sensor
CONVEYOR_BOUNDS = (0.0, 0.0, 1.2, 1.0)  # x_min, y_min, x_max, y_max
SENSOR_RESOLUTION = 0.005
MIN_RESOLUTION = 0.002
MAX_RESOLUTION = 0.02
MAX_PACKAGE_HEIGHT = 0.6
MAX_PACKAGE_SIDE = 0.6
MAX_TOP_TILT = 0.25

# Geometry
HEIGHT_MAP_HALF_WIDTH = 0.3
HEIGHT_MAP_GRID = 8
HEIGHT_MAP_FILL = 0.0
ADJACENCY_GAP_CELLS = 2
PATCH_RADIUS = 0.05

# End-of-arm tool and seal
CUP_RADIUS = 0.02
EOAT_FOOTPRINT = 0.25
OUTER_CUP_OFFSET = 0.105
INNER_CUP_OFFSET = 0.045
SEAL_RMSE_MAX = 0.005
SEAL_DZ_MAX = 0.01
MULTIPICK_CAPTURE_RADIUS = 0.04
MULTIPICK_OVERLAP_FRACTION = 0.15
MIN_SEGMENT_CELLS = 10

# Arm workspace
ARM_REACH = 1.831
TOOL_TILT_MAX = 0.5
MIN_ACTIVE_CUPS = 1

# Feature vector
FEATURE_DIM = 78

# Format versions for every persisted artifact
FORMAT_VERSION = 1

# Default success model weights, keyed by feature name
DEFAULT_SUCCESS_WEIGHTS = {
    "n_active_cups": 0.9,
    "plane_rmse": -120.0,
    "cup_align_mean": -2.0,
    "pkg_height": -1.5,
}
DEFAULT_KIND_PENALTIES = {"box": 0.0, "polybag": -0.4, "envelope": -0.2}
DEFAULT_SUCCESS_BIAS = -3.0
EDGE_MARGIN = 0.05
EDGE_DEFICIT_WEIGHT = -3.0

# Seed derivation tags, one per pipeline stage
STAGE_TAGS = {
    "scenes": 0x5343454E45,
    "picks": 0x5049434B53,
    "dataset": 0x44415441,
    "train": 0x545241494E,
    "abtest": 0x4142544553,
    "optimize": 0x4F5054,
}

PackageKindName = Literal["box", "polybag", "envelope"]
Range = Tuple[float, float]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


def _check_range(name: str, value: Range, positive: bool = True, upper: Optional[float] = None) -> None:
    lo, hi = value
    if lo > hi:
        raise ValueError(f"{name} range is empty: {lo} > {hi}")
    if positive and lo <= 0:
        raise ValueError(f"{name} must be strictly positive, got {lo}")
    if upper is not None and hi > upper:
        raise ValueError(f"{name} upper bound {hi} exceeds {upper}")


class KindDims(_Frozen):
    """Dimension and tilt ranges for one package kind"""
    length: Range
    width: Range
    height: Range
    tilt_max: float = Field(default=0.02, ge=0.0, le=MAX_TOP_TILT)

    @model_validator(mode="after")
    def _ranges(self):
        _check_range("length", self.length, upper=MAX_PACKAGE_SIDE)
        _check_range("width", self.width, upper=MAX_PACKAGE_SIDE)
        _check_range("height", self.height, upper=MAX_PACKAGE_HEIGHT)
        return self


def _default_kinds() -> Dict[str, KindDims]:
    return {
        "box": KindDims(length=(0.15, 0.5), width=(0.12, 0.4), height=(0.05, 0.35), tilt_max=0.02),
        "polybag": KindDims(length=(0.2, 0.45), width=(0.15, 0.35), height=(0.03, 0.15), tilt_max=0.2),
        "envelope": KindDims(length=(0.2, 0.38), width=(0.15, 0.3), height=(0.005, 0.02), tilt_max=0.01),
    }


class SceneConfig(_Frozen):
    count_range: Tuple[int, int] = (5, 15)
    kind_mix: Dict[PackageKindName, float] = Field(
        default_factory=lambda: {"box": 0.6, "polybag": 0.25, "envelope": 0.15}
    )
    kinds: Dict[PackageKindName, KindDims] = Field(default_factory=_default_kinds)
    pile_probability: float = Field(default=0.3, ge=0.0, le=1.0)
    bounds: Tuple[float, float, float, float] = CONVEYOR_BOUNDS
    placement_margin: float = Field(default=0.1, ge=0.0)

    @model_validator(mode="after")
    def _consistent(self):
        lo, hi = self.count_range
        if lo < 0 or lo > hi:
            raise ValueError(f"count_range is empty or negative: {self.count_range}")
        weights = [w for w in self.kind_mix.values()]
        if not weights or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("kind_mix needs non-negative weights with a positive sum")
        missing = [k for k, w in self.kind_mix.items() if w > 0 and k not in self.kinds]
        if missing:
            raise ValueError(f"kinds has no dimensions for {missing}")
        x0, y0, x1, y1 = self.bounds
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"bounds is empty: {self.bounds}")
        if 2 * self.placement_margin >= min(x1 - x0, y1 - y0):
            raise ValueError("placement_margin leaves no room inside bounds")
        return self


class GeometryConfig(_Frozen):
    resolution: float = Field(default=SENSOR_RESOLUTION, ge=MIN_RESOLUTION, le=MAX_RESOLUTION)
    height_map_half_width: float = Field(default=HEIGHT_MAP_HALF_WIDTH, gt=0.0)
    height_map_grid: int = Field(default=HEIGHT_MAP_GRID, ge=2)
    height_map_fill: float = HEIGHT_MAP_FILL
    adjacency_gap: int = Field(default=ADJACENCY_GAP_CELLS, ge=0)
    patch_radius: float = Field(default=PATCH_RADIUS, gt=0.0)


class PickConfig(_Frozen):
    seal_rmse_max: float = Field(default=SEAL_RMSE_MAX, ge=0.0)
    seal_dz_max: float = Field(default=SEAL_DZ_MAX, ge=0.0)
    multipick_capture_radius: float = Field(default=MULTIPICK_CAPTURE_RADIUS, gt=0.0)
    multipick_overlap_fraction: float = Field(default=MULTIPICK_OVERLAP_FRACTION, gt=0.0, le=1.0)
    min_segment_cells: int = Field(default=MIN_SEGMENT_CELLS, ge=1)
    rotation_jitter: float = Field(default=math.pi / 4, ge=0.0, le=math.pi)


class WorkspaceConfig(_Frozen):
    base: Tuple[float, float, float] = (0.6, -0.4, 0.0)
    reach: float = Field(default=ARM_REACH, gt=0.0)
    tilt_max: float = Field(default=TOOL_TILT_MAX, ge=0.0, le=math.pi / 2)
    min_cups: int = Field(default=MIN_ACTIVE_CUPS, ge=0, le=8)


class SuccessModelConfig(_Frozen):
    weights: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_SUCCESS_WEIGHTS))
    bias: float = DEFAULT_SUCCESS_BIAS
    kind_penalties: Dict[PackageKindName, float] = Field(default_factory=lambda: dict(DEFAULT_KIND_PENALTIES))
    edge_margin: float = Field(default=EDGE_MARGIN, ge=0.0)
    edge_deficit_weight: float = EDGE_DEFICIT_WEIGHT


class PspConfig(_Frozen):
    base: SuccessModelConfig = Field(default_factory=SuccessModelConfig)
    noise_amplitude: float = Field(default=0.03, ge=0.0)
    smoothing: float = Field(default=0.01, ge=0.0)


class NoiseConfig(_Frozen):
    sigma_pos: float = Field(default=0.02, gt=0.0)
    sigma_rot: float = Field(default=0.30, gt=0.0)
    n_perturb: int = Field(default=30, ge=1)


class DatasetConfig(_Frozen):
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    split_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)


class GbdtHyperparams(_Frozen):
    n_rounds: int = Field(default=200, ge=0)
    max_depth: int = Field(default=3, ge=1)
    learning_rate: float = Field(default=0.05, gt=0.0, le=1.0)
    subsample: float = Field(default=0.8, gt=0.0, le=1.0)
    min_samples_leaf: int = Field(default=1, ge=1)


class MlpHyperparams(_Frozen):
    hidden: Tuple[int, int] = (35, 2)
    learning_rate: float = Field(default=0.001, gt=0.0)
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)


class ChainConfig(_Frozen):
    kind: Literal["gbdt", "mlp"] = "gbdt"
    teacher_forcing: bool = True
    gbdt: GbdtHyperparams = Field(default_factory=GbdtHyperparams)
    mlp: MlpHyperparams = Field(default_factory=MlpHyperparams)


class OptimizerConfig(_Frozen):
    iterations: int = Field(default=4, ge=1)
    step_size: float = Field(default=2.0, gt=0.0)
    min_step: Tuple[float, float, float] = (1e-4, 1e-4, 1e-3)


class AbConfig(_Frozen):
    inducts_per_arm: int = Field(default=50_000, ge=1)
    candidates: int = Field(default=8, ge=1)
    ci_method: Literal["normal", "wilson"] = "normal"
    ci_level: float = Field(default=0.95, gt=0.0, lt=1.0)


class PathsConfig(_Frozen):
    oracle_config: Optional[Path] = None
    psp_config: Optional[Path] = None
    scenes: Path = Path("out/scenes.jsonl")
    picks: Path = Path("out/picks.jsonl")
    dataset: Path = Path("out/dataset.jsonl")
    model: Path = Path("out/model_gbdt.json")
    reports: Path = Path("out/reports")


class RunConfig(_Frozen):
    """Everything one pipeline run needs; every subcommand reads its slice"""
    seed: int = Field(default=0, ge=0, lt=2**64)
    n_scenes: int = Field(default=1000, ge=0)
    threads: int = Field(default=1, ge=1)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    pick: PickConfig = Field(default_factory=PickConfig)
    workspace: WorkspaceConfig = Field(default_factory=WorkspaceConfig)
    oracle: SuccessModelConfig = Field(default_factory=SuccessModelConfig)
    psp: PspConfig = Field(default_factory=PspConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    chain: ChainConfig = Field(default_factory=ChainConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    ab: AbConfig = Field(default_factory=AbConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)


def _field_path(error: dict) -> str:
    return ".".join(str(part) for part in error.get("loc", ())) or "<root>"


def validate_model(model_cls, data: dict, source: str = "config"):
    """Build a config model, turning validation failures into ConfigError naming the field"""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"{source}: invalid field '{_field_path(first)}': {first['msg']}") from e


def load_json(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


def merge_overrides(base: dict, overrides: dict) -> dict:
    """Recursively overlay overrides onto base (flag > file > default)"""
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_seed(cli_seed: Optional[int], file_data: dict) -> int:
    if cli_seed is not None:
        return cli_seed
    if "seed" in file_data:
        return file_data["seed"]
    env = os.getenv(SEED_ENV_VAR, "")
    if env:
        try:
            return int(env, 0)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from e
    return 0


def load_run_config(path: Optional[Path] = None, overrides: Optional[dict] = None,
                    cli_seed: Optional[int] = None) -> RunConfig:
    """Load a RunConfig with precedence flag > file > default, then resolve oracle/PSP files"""
    file_data = load_json(path) if path is not None else {}
    data = merge_overrides(file_data, overrides or {})
    data["seed"] = resolve_seed(cli_seed, file_data)
    config = validate_model(RunConfig, data, source=str(path or "defaults"))

    base_dir = Path(path).parent if path is not None else Path.cwd()

    def beside_config(p: Path) -> Path:
        return p if p.is_absolute() else base_dir / p

    updates = {}
    if config.paths.oracle_config is not None:
        oracle_path = beside_config(config.paths.oracle_config)
        updates["oracle"] = validate_model(SuccessModelConfig, load_json(oracle_path), str(oracle_path))
    if config.paths.psp_config is not None:
        psp_path = beside_config(config.paths.psp_config)
        updates["psp"] = validate_model(PspConfig, load_json(psp_path), str(psp_path))
    return config.model_copy(update=updates) if updates else config
