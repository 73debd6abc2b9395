"""
Multi-suction end-of-arm tool, pick actions, cup activation, the heuristic
candidate sampler, feasibility checks and simulated pick execution.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from config import (
    CUP_RADIUS,
    EOAT_FOOTPRINT,
    INNER_CUP_OFFSET,
    OUTER_CUP_OFFSET,
    PATCH_RADIUS,
    PickConfig,
    WorkspaceConfig,
)
from picking.common import lattice_angle, to_lattice
from picking.geometry import SurfacePoint, disk_cells, disk_patches, surface_at
from picking.scene import EMPTY, SegmentSummary, SensorFrame

logger = logging.getLogger(__name__)

DEFAULT_PICK_CONFIG = PickConfig()
DEFAULT_WORKSPACE = WorkspaceConfig()


def _x_pattern(outer: float, inner: float) -> Tuple[Tuple[float, float], ...]:
    signs = ((1, 1), (-1, 1), (-1, -1), (1, -1))
    return tuple((sx * outer, sy * outer) for sx, sy in signs) + tuple((sx * inner, sy * inner) for sx, sy in signs)


@dataclass(frozen=True)
class EoatModel:
    """Eight cups on the diagonals of the footprint square; 0-3 outer, 4-7 inner"""
    cup_centers: Tuple[Tuple[float, float], ...] = _x_pattern(OUTER_CUP_OFFSET, INNER_CUP_OFFSET)
    cup_radius: float = CUP_RADIUS
    footprint: float = EOAT_FOOTPRINT

    def cup_positions(self, x: float, y: float, r: float) -> np.ndarray:
        """World (x, y) of every cup for a tool at (x, y) rotated by r, shape (8, 2)"""
        c, s = math.cos(r), math.sin(r)
        local = np.asarray(self.cup_centers)
        return np.column_stack([x + c * local[:, 0] - s * local[:, 1], y + s * local[:, 0] + c * local[:, 1]])


DEFAULT_EOAT = EoatModel()


class PickResult(Enum):
    SUCCESS = "success"
    MISSED = "missed"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class PickAction:
    """Tool pose on the action lattice; z, normal and cups are derived, never set by hand"""
    x: float
    y: float
    r: float
    cups: Tuple[int, ...]
    z: float
    normal: Tuple[float, float, float]
    target_segment: int

    @property
    def pose(self) -> Tuple[float, float, float]:
        return self.x, self.y, self.r

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x": self.x,
            "y": self.y,
            "r": self.r,
            "cups": list(self.cups),
            "z": self.z,
            "normal": list(self.normal),
            "target_segment": self.target_segment,
        }


@dataclass(frozen=True)
class PickOutcome:
    result: PickResult
    multipick: bool
    p_true: float

    def to_dict(self) -> Dict[str, Any]:
        return {"result": self.result.value, "multipick": self.multipick, "p_true": self.p_true}


def activate_cups(frame: SensorFrame, eoat: EoatModel, x: float, y: float, r: float,
                  settings: PickConfig = DEFAULT_PICK_CONFIG,
                  surface: Optional[SurfacePoint] = None) -> Tuple[int, ...]:
    """Cups whose disk sits wholly on the target segment, seals on a flat patch and is level with the pick"""
    if surface is None:
        surface = surface_at(frame, x, y)
    if surface.segment_id == EMPTY:
        return ()
    positions = eoat.cup_positions(x, y, r)
    patches = disk_patches(frame, positions, eoat.cup_radius)
    sealed = patches.inside & (patches.n_cells >= 3) & patches.uniform & (patches.segment == surface.segment_id)
    sealed &= ~patches.degenerate & (np.nan_to_num(patches.rmse, nan=np.inf) <= settings.seal_rmse_max)
    active = []
    for i in np.flatnonzero(sealed):
        row, col = frame.cell_of(*positions[i])
        if abs(float(frame.heightgrid[row, col]) - surface.z) <= settings.seal_dz_max:
            active.append(int(i))
    return tuple(active)


def make_action(frame: SensorFrame, x: float, y: float, r: float, target_segment: int,
                eoat: EoatModel = DEFAULT_EOAT, settings: PickConfig = DEFAULT_PICK_CONFIG,
                patch_radius: float = PATCH_RADIUS) -> PickAction:
    """Snap the pose to the action lattice and derive z, normal and cups from the frame"""
    x, y, r = to_lattice(x), to_lattice(y), lattice_angle(r)
    surface = surface_at(frame, x, y, patch_radius)
    cups = activate_cups(frame, eoat, x, y, r, settings, surface)
    return PickAction(x=x, y=y, r=r, cups=cups, z=surface.z, normal=surface.normal,
                      target_segment=int(target_segment))


def action_from_dict(frame: SensorFrame, data: Mapping[str, Any], eoat: EoatModel = DEFAULT_EOAT,
                     settings: PickConfig = DEFAULT_PICK_CONFIG) -> PickAction:
    """Rebuild a logged action from its pose; derived fields are recomputed, not trusted"""
    return make_action(frame, float(data["x"]), float(data["y"]), float(data["r"]),
                       int(data["target_segment"]), eoat, settings)


def principal_angle(xs: np.ndarray, ys: np.ndarray) -> float:
    """Direction of the major axis of a point set, in (-pi/2, pi/2]"""
    cov = np.cov(np.vstack([xs, ys]))
    _, vecs = np.linalg.eigh(cov)
    vx, vy = vecs[:, -1]
    angle = math.atan2(vy, vx)
    if angle > math.pi / 2:
        angle -= math.pi
    elif angle <= -math.pi / 2:
        angle += math.pi
    return angle


def sample_candidates(frame: SensorFrame, segment: SegmentSummary, k: int, seed: int,
                      eoat: EoatModel = DEFAULT_EOAT,
                      settings: PickConfig = DEFAULT_PICK_CONFIG) -> List[PickAction]:
    """Heuristic sampler: centroid pick along the principal axis, then jittered picks inside the segment"""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    rows, cols = np.nonzero(frame.segment_mask(segment.id))
    if rows.size < settings.min_segment_cells:
        logger.debug(f"Segment {segment.id} has {rows.size} cells; no candidates")
        return []
    xs, ys = frame.x_centers[cols], frame.y_centers[rows]
    r0 = principal_angle(xs, ys)

    cx, cy = segment.centroid
    row, col = frame.cell_of(cx, cy)
    if frame.segmentgrid[row, col] != segment.id:
        nearest = int(np.argmin((xs - cx) ** 2 + (ys - cy) ** 2))
        cx, cy = float(xs[nearest]), float(ys[nearest])
    candidates = [make_action(frame, cx, cy, r0, segment.id, eoat, settings)]

    rng = np.random.default_rng(seed)
    n_jitter = k - 1
    if n_jitter > 0:
        picks = rng.choice(rows.size, size=n_jitter, replace=n_jitter > rows.size)
        turns = rng.uniform(-settings.rotation_jitter, settings.rotation_jitter, size=n_jitter)
        for idx, dr in zip(picks, turns):
            candidates.append(make_action(frame, float(xs[idx]), float(ys[idx]), r0 + float(dr),
                                          segment.id, eoat, settings))
    return candidates


def tool_tilt(action: PickAction) -> float:
    return math.acos(max(-1.0, min(1.0, action.normal[2])))


def check_feasible(frame: SensorFrame, action: PickAction,
                   workspace: WorkspaceConfig = DEFAULT_WORKSPACE) -> bool:
    """Reach, tool tilt and minimum active cups"""
    bx, by, bz = workspace.base
    reach = math.sqrt((action.x - bx) ** 2 + (action.y - by) ** 2 + (action.z - bz) ** 2)
    if reach > workspace.reach:
        return False
    if tool_tilt(action) > workspace.tilt_max:
        return False
    return len(action.cups) >= workspace.min_cups


def is_multipick(frame: SensorFrame, action: PickAction, eoat: EoatModel = DEFAULT_EOAT,
                 settings: PickConfig = DEFAULT_PICK_CONFIG) -> bool:
    """An active cup's capture disk overlaps another package at the cup's level by the configured fraction"""
    if not action.cups:
        return False
    capture_area = math.pi * settings.multipick_capture_radius ** 2
    cell_area = frame.resolution ** 2
    positions = eoat.cup_positions(action.x, action.y, action.r)
    for i in action.cups:
        cx, cy = positions[i]
        rows, cols, _ = disk_cells(frame, cx, cy, settings.multipick_capture_radius)
        labels = frame.segmentgrid[rows, cols]
        level = np.abs(frame.heightgrid[rows, cols] - action.z) <= settings.seal_dz_max
        others = labels[(labels != EMPTY) & (labels != action.target_segment) & level]
        if others.size == 0:
            continue
        _, counts = np.unique(others, return_counts=True)
        if counts.max() * cell_area >= settings.multipick_overlap_fraction * capture_area:
            return True
    return False


def simulate_execute(frame: SensorFrame, action: Optional[PickAction], oracle, rng: np.random.Generator,
                     workspace: WorkspaceConfig = DEFAULT_WORKSPACE, eoat: EoatModel = DEFAULT_EOAT,
                     settings: PickConfig = DEFAULT_PICK_CONFIG) -> PickOutcome:
    """Execute against the hidden oracle; one uniform draw per feasible pick, none otherwise"""
    if action is None or not check_feasible(frame, action, workspace):
        return PickOutcome(result=PickResult.INFEASIBLE, multipick=False, p_true=0.0)
    p_true = float(oracle.prob_for_action(frame, action))
    success = rng.random() < p_true
    return PickOutcome(
        result=PickResult.SUCCESS if success else PickResult.MISSED,
        multipick=is_multipick(frame, action, eoat, settings),
        p_true=p_true,
    )


def pick_record(scene_seed: int, pick_index: int, action: Optional[PickAction],
                outcome: PickOutcome) -> Dict[str, Any]:
    """One executed-pick log line"""
    return {
        "scene_seed": scene_seed,
        "pick_index": pick_index,
        "action": None if action is None else action.to_dict(),
        "active_cups": [] if action is None else list(action.cups),
        "outcome": outcome.to_dict(),
    }
