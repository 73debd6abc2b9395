"""
Synthetic cluttered-package scenes and their top-down sensor rendering
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull

from config import SceneConfig
from picking.common import MASK_64, ConfigError, DataFormatError

logger = logging.getLogger(__name__)

EMPTY = -1

Vec2 = Tuple[float, float]
Vec3 = Tuple[float, float, float]
Bounds = Tuple[float, float, float, float]


class PackageKind(Enum):
    """Package types; declaration order is the one-hot order"""
    BOX = "box"
    POLYBAG = "polybag"
    ENVELOPE = "envelope"

    @property
    def index(self) -> int:
        return list(PackageKind).index(self)


@dataclass(frozen=True)
class PackageSpec:
    id: int
    kind: PackageKind
    center: Vec3
    yaw: float
    dims: Vec3
    top_tilt: Vec2 = (0.0, 0.0)

    def local_coords(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dx = np.asarray(x) - self.center[0]
        dy = np.asarray(y) - self.center[1]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return c * dx + s * dy, -s * dx + c * dy

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        u, v = self.local_coords(x, y)
        return (np.abs(u) <= self.dims[0] / 2) & (np.abs(v) <= self.dims[1] / 2)

    def top_z(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Top surface height; a plane through the top center tilted by top_tilt"""
        u, v = self.local_coords(x, y)
        top = self.center[2] + self.dims[2] / 2
        return top + math.tan(self.top_tilt[0]) * v - math.tan(self.top_tilt[1]) * u

    def top_normal(self) -> np.ndarray:
        nu, nv = math.tan(self.top_tilt[1]), -math.tan(self.top_tilt[0])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        n = np.array([c * nu - s * nv, s * nu + c * nv, 1.0])
        return n / np.linalg.norm(n)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "center": list(self.center),
            "yaw": self.yaw,
            "dims": list(self.dims),
            "top_tilt": list(self.top_tilt),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PackageSpec":
        return cls(
            id=int(data["id"]),
            kind=PackageKind(data["kind"]),
            center=tuple(float(v) for v in data["center"]),
            yaw=float(data["yaw"]),
            dims=tuple(float(v) for v in data["dims"]),
            top_tilt=tuple(float(v) for v in data["top_tilt"]),
        )


@dataclass(frozen=True)
class Scene:
    packages: Tuple[PackageSpec, ...]
    bounds: Bounds
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "bounds": list(self.bounds),
            "packages": [p.to_dict() for p in self.packages],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Scene":
        try:
            return cls(
                packages=tuple(PackageSpec.from_dict(p) for p in data["packages"]),
                bounds=tuple(float(v) for v in data["bounds"]),
                seed=int(data["seed"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"malformed scene record: {e}") from e


@dataclass(frozen=True)
class SegmentSummary:
    id: int
    kind: PackageKind
    cell_count: int
    centroid: Vec2


@dataclass(frozen=True, eq=False)
class SensorFrame:
    """Top-down z-buffer rendering; rows index y, columns index x"""
    resolution: float
    bounds: Bounds
    heightgrid: np.ndarray
    segmentgrid: np.ndarray
    kinds: Mapping[int, PackageKind]
    _cache: Dict[Any, Any] = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.heightgrid.shape

    @property
    def x_centers(self) -> np.ndarray:
        return self.cached("x_centers", lambda: self.bounds[0] + (np.arange(self.shape[1]) + 0.5) * self.resolution)

    @property
    def y_centers(self) -> np.ndarray:
        return self.cached("y_centers", lambda: self.bounds[1] + (np.arange(self.shape[0]) + 0.5) * self.resolution)

    @property
    def points(self) -> np.ndarray:
        """(x, y, z) of every non-empty cell, shape (n, 3)"""
        rows, cols = np.nonzero(self.segmentgrid != EMPTY)
        return np.column_stack([self.x_centers[cols], self.y_centers[rows], self.heightgrid[rows, cols]])

    def in_bounds(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1

    def cell_of(self, x: float, y: float) -> Tuple[int, int]:
        """(row, col) of the cell containing (x, y); the far bound maps to the last cell"""
        col = int(math.floor((x - self.bounds[0]) / self.resolution))
        row = int(math.floor((y - self.bounds[1]) / self.resolution))
        return min(max(row, 0), self.shape[0] - 1), min(max(col, 0), self.shape[1] - 1)

    def segment_mask(self, segment_id: int) -> np.ndarray:
        key = ("mask", segment_id)
        if key not in self._cache:
            self._cache[key] = self.segmentgrid == segment_id
        return self._cache[key]

    def segment_ids(self) -> List[int]:
        if "ids" not in self._cache:
            ids = np.unique(self.segmentgrid)
            self._cache["ids"] = [int(i) for i in ids if i != EMPTY]
        return self._cache["ids"]

    def cached(self, key: Any, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "resolution": self.resolution,
            "bounds": list(self.bounds),
            "shape": list(self.shape),
            "heightgrid": self.heightgrid.ravel().tolist(),
            "segmentgrid": self.segmentgrid.ravel().tolist(),
            "kinds": {str(k): v.value for k, v in sorted(self.kinds.items())},
        }


def _sample_range(rng: np.random.Generator, value: Tuple[float, float]) -> float:
    lo, hi = value
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _clamp_tilt(tilt: Vec2, dims: Vec3) -> Vec2:
    """Scale the tilt so no top corner drops more than half the package height"""
    tx, ty = tilt
    drop = abs(math.tan(tx)) * dims[1] / 2 + abs(math.tan(ty)) * dims[0] / 2
    limit = dims[2] / 2
    if drop <= limit or drop == 0.0:
        return tx, ty
    f = limit / drop
    return math.atan(math.tan(tx) * f), math.atan(math.tan(ty) * f)


def _surface_below(packages: Sequence[PackageSpec], x: float, y: float) -> float:
    z = 0.0
    for pkg in packages:
        if bool(pkg.contains(x, y)):
            z = max(z, float(pkg.top_z(x, y)))
    return z


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic random scene for (config, seed)"""
    if not isinstance(config, SceneConfig):
        raise ConfigError(f"scene config must be a SceneConfig, got {type(config).__name__}")
    rng = np.random.default_rng(int(seed) & MASK_64)

    kinds = [k for k in PackageKind if config.kind_mix.get(k.value, 0.0) > 0]
    weights = np.array([config.kind_mix[k.value] for k in kinds], dtype=float)
    weights /= weights.sum()

    x0, y0, x1, y1 = config.bounds
    m = config.placement_margin
    lo, hi = config.count_range
    count = int(rng.integers(lo, hi + 1))

    packages: List[PackageSpec] = []
    for i in range(count):
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        spec = config.kinds[kind.value]
        dims = (_sample_range(rng, spec.length), _sample_range(rng, spec.width), _sample_range(rng, spec.height))
        yaw = float(rng.uniform(-math.pi / 2, math.pi / 2))
        tilt = tuple(float(t) for t in rng.uniform(-spec.tilt_max, spec.tilt_max, size=2))
        tilt = _clamp_tilt(tilt, dims)

        if packages and rng.random() < config.pile_probability:
            below = packages[int(rng.integers(len(packages)))]
            ou = rng.uniform(-0.25, 0.25) * below.dims[0]
            ov = rng.uniform(-0.25, 0.25) * below.dims[1]
            c, s = math.cos(below.yaw), math.sin(below.yaw)
            cx = float(np.clip(below.center[0] + c * ou - s * ov, x0 + m, x1 - m))
            cy = float(np.clip(below.center[1] + s * ou + c * ov, y0 + m, y1 - m))
            base = _surface_below(packages, cx, cy)
        else:
            cx = float(rng.uniform(x0 + m, x1 - m))
            cy = float(rng.uniform(y0 + m, y1 - m))
            base = 0.0

        packages.append(PackageSpec(
            id=i + 1, kind=kind, center=(cx, cy, base + dims[2] / 2), yaw=yaw, dims=dims, top_tilt=tilt,
        ))

    logger.debug(f"Generated scene seed={seed} with {count} packages")
    return Scene(packages=tuple(packages), bounds=tuple(config.bounds), seed=int(seed))


def render_sensor(scene: Scene, resolution: float) -> SensorFrame:
    """Top-down z-buffer: each cell takes the highest top surface covering its center"""
    if not (0.002 <= resolution <= 0.02):
        raise ConfigError(f"resolution must lie in [0.002, 0.02] m, got {resolution}")
    x0, y0, x1, y1 = scene.bounds
    nx = int(round((x1 - x0) / resolution))
    ny = int(round((y1 - y0) / resolution))
    xs = x0 + (np.arange(nx) + 0.5) * resolution
    ys = y0 + (np.arange(ny) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)

    height = np.zeros((ny, nx), dtype=float)
    segments = np.full((ny, nx), EMPTY, dtype=np.int32)
    for pkg in sorted(scene.packages, key=lambda p: p.id):
        inside = pkg.contains(gx, gy)
        z = pkg.top_z(gx, gy)
        higher = inside & (z > height)
        height[higher] = z[higher]
        segments[higher] = pkg.id

    kinds = {p.id: p.kind for p in scene.packages}
    return SensorFrame(resolution=float(resolution), bounds=tuple(scene.bounds),
                       heightgrid=height, segmentgrid=segments, kinds=kinds)


def visible_segments(frame: SensorFrame) -> List[SegmentSummary]:
    """One summary per visible package, sorted by id"""
    def build() -> List[SegmentSummary]:
        summaries = []
        for seg in frame.segment_ids():
            rows, cols = np.nonzero(frame.segment_mask(seg))
            centroid = (float(frame.x_centers[cols].mean()), float(frame.y_centers[rows].mean()))
            summaries.append(SegmentSummary(
                id=seg,
                kind=frame.kinds.get(seg, PackageKind.BOX),
                cell_count=int(rows.size),
                centroid=centroid,
            ))
        return summaries

    return frame.cached("summaries", build)


def find_segment(frame: SensorFrame, segment_id: int) -> Optional[SegmentSummary]:
    for summary in visible_segments(frame):
        if summary.id == segment_id:
            return summary
    return None


def segment_polygon(frame: SensorFrame, segment_id: int) -> Tuple[Vec2, ...]:
    """Convex outline of a segment's cells (corners included), counter-clockwise; empty if not visible"""
    def build() -> Tuple[Vec2, ...]:
        rows, cols = np.nonzero(frame.segment_mask(segment_id))
        if rows.size == 0:
            return ()
        half = frame.resolution / 2
        xs, ys = frame.x_centers[cols], frame.y_centers[rows]
        corners = np.concatenate([
            np.column_stack([xs + sx * half, ys + sy * half]) for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))
        ])
        hull = ConvexHull(np.unique(corners, axis=0))
        return tuple((float(x), float(y)) for x, y in hull.points[hull.vertices])

    return frame.cached(("polygon", segment_id), build)
