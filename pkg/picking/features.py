"""
Fixed-length pick feature vector shared by the success models and the refinement chain
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import numpy as np
from scipy import ndimage

from config import FEATURE_DIM, GeometryConfig
from picking.common import ConfigError, DegenerateGeometryError, DimensionMismatchError, MissingSegmentError
from picking.geometry import AdjacencyInfo, cell_points, disk_patches, fit_plane, local_height_map
from picking.pick import DEFAULT_EOAT, EoatModel, PickAction
from picking.scene import PackageKind, SensorFrame, find_segment

logger = logging.getLogger(__name__)

DEFAULT_GEOMETRY = GeometryConfig()

HEIGHT_MAP_SLICE = slice(9, 73)
KIND_SLICE = slice(75, 78)


def feature_names() -> List[str]:
    names = [
        "pkg_height",
        "plane_rmse",
        "n_active_cups",
        "cup_align_mean",
        "cup_align_max",
        "n_neighbors",
        "adjacency_rank_norm",
        "edge_distance",
        "centroid_distance",
    ]
    names += [f"hmap_r{row}_c{col}" for row in range(8) for col in range(8)]
    names += ["hmap_var", "hmap_range"]
    names += [f"kind_{kind.value}" for kind in PackageKind]
    return names


FEATURE_NAMES = tuple(feature_names())
FEATURE_INDEX: Dict[str, int] = {name: i for i, name in enumerate(FEATURE_NAMES)}


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (FEATURE_DIM,):
            raise DimensionMismatchError(f"feature vector must have {FEATURE_DIM} values, got {self.values.shape}")

    def __len__(self) -> int:
        return FEATURE_DIM

    def __getitem__(self, index):
        return self.values[index]


PhiLike = Union[FeatureVector, np.ndarray, Sequence[float]]


def as_array(phi: PhiLike) -> np.ndarray:
    values = phi.values if isinstance(phi, FeatureVector) else np.asarray(phi, dtype=float)
    if values.shape != (FEATURE_DIM,):
        raise DimensionMismatchError(f"expected {FEATURE_DIM} features, got shape {values.shape}")
    return values


def _segment_plane_rmse(frame: SensorFrame, segment: int) -> float:
    def build() -> float:
        rows, cols = np.nonzero(frame.segment_mask(segment))
        try:
            return fit_plane(cell_points(frame, rows, cols)).rmse
        except DegenerateGeometryError:
            return 0.0
    return frame.cached(("plane_rmse", segment), build)


def _edge_distance_map(frame: SensorFrame, segment: int) -> np.ndarray:
    """Distance (m) from each segment cell to the nearest non-segment cell; grid border counts as outside"""
    def build() -> np.ndarray:
        padded = np.pad(frame.segment_mask(segment), 1, constant_values=False)
        return ndimage.distance_transform_edt(padded)[1:-1, 1:-1] * frame.resolution
    return frame.cached(("edge_distance", segment), build)


def _alignment_offsets(frame: SensorFrame, action: PickAction, eoat: EoatModel) -> np.ndarray:
    if not action.cups:
        return np.empty(0)
    positions = eoat.cup_positions(action.x, action.y, action.r)[list(action.cups)]
    patches = disk_patches(frame, positions, eoat.cup_radius)
    cosines = patches.normal[~patches.degenerate] @ np.asarray(action.normal)
    return np.arccos(np.clip(cosines, -1.0, 1.0))


def compute_features(frame: SensorFrame, adjacency: Mapping[int, AdjacencyInfo], action: PickAction,
                     eoat: EoatModel = DEFAULT_EOAT, geometry: GeometryConfig = DEFAULT_GEOMETRY) -> FeatureVector:
    segment = action.target_segment
    summary = find_segment(frame, segment)
    if summary is None or segment not in adjacency:
        raise MissingSegmentError(f"target segment {segment} is not visible in the frame")
    info = adjacency[segment]

    values = np.zeros(FEATURE_DIM, dtype=float)
    values[0] = info.height
    values[1] = _segment_plane_rmse(frame, segment)
    values[2] = len(action.cups)
    offsets = _alignment_offsets(frame, action, eoat)
    if offsets.size:
        values[3] = offsets.mean()
        values[4] = offsets.max()
    values[5] = len(info.neighbor_ids)
    values[6] = info.rank / (1 + len(info.neighbor_ids))

    row, col = frame.cell_of(action.x, action.y)
    values[7] = _edge_distance_map(frame, segment)[row, col]
    values[8] = math.hypot(action.x - summary.centroid[0], action.y - summary.centroid[1])

    if geometry.height_map_grid ** 2 != HEIGHT_MAP_SLICE.stop - HEIGHT_MAP_SLICE.start:
        raise ConfigError(f"feature vector needs an 8 x 8 height map, got grid {geometry.height_map_grid}")
    hmap = local_height_map(frame, (action.x, action.y), geometry.height_map_half_width,
                            geometry.height_map_grid, geometry.height_map_fill)
    block = hmap.grid.ravel()
    values[HEIGHT_MAP_SLICE] = block
    values[73] = block.var()
    values[74] = block.max() - block.min()
    values[75 + summary.kind.index] = 1.0
    return FeatureVector(values=values)


def write_feature_csv(path: Path, rows: Sequence[PhiLike]) -> None:
    """Header of feature names, one row per action"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.vstack([as_array(r) for r in rows]) if rows else np.empty((0, FEATURE_DIM))
    np.savetxt(path, matrix, delimiter=",", header=",".join(FEATURE_NAMES), comments="", fmt="%.17g")
    logger.info(f"Wrote {matrix.shape[0]} feature rows to {path}")
