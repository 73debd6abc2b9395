"""
Geometric primitives for feature extraction: plane fitting, surface lookup,
local height maps and the segment adjacency graph.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import ADJACENCY_GAP_CELLS, HEIGHT_MAP_FILL, PATCH_RADIUS
from picking.common import DegenerateGeometryError, OutOfBoundsError
from picking.scene import EMPTY, SensorFrame

logger = logging.getLogger(__name__)

UP = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class PlaneFit:
    normal: Tuple[float, float, float]
    point: Tuple[float, float, float]
    rmse: float


@dataclass(frozen=True)
class SurfacePoint:
    z: float
    normal: Tuple[float, float, float]
    segment_id: int


@dataclass(frozen=True, eq=False)
class HeightMap:
    grid: np.ndarray
    center: Tuple[float, float]
    extent: float
    fill_value: float


@dataclass(frozen=True)
class AdjacencyInfo:
    segment_id: int
    neighbor_ids: FrozenSet[int]
    rank: int
    n_higher: int
    height: float


def fit_plane(points: Sequence[Sequence[float]]) -> PlaneFit:
    """Total-least-squares plane via SVD of the centered points; normal points up"""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise DegenerateGeometryError(f"plane fit needs at least 3 points, got {pts.shape[0]}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] <= 1e-12:
        raise DegenerateGeometryError("points are collinear; plane is undefined")
    normal = vt[2] / np.linalg.norm(vt[2])
    if normal[2] < 0:
        normal = -normal
    if normal[2] == 0.0:
        raise DegenerateGeometryError("fitted plane is vertical")
    rmse = float(np.sqrt(np.mean((centered @ normal) ** 2)))
    return PlaneFit(normal=tuple(float(v) for v in normal), point=tuple(float(v) for v in centroid), rmse=rmse)


def disk_cells(frame: SensorFrame, cx: float, cy: float, radius: float) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Cells whose centers lie within `radius` of (cx, cy); flag is False if the disk leaves the grid"""
    res = frame.resolution
    x0, y0 = frame.bounds[0], frame.bounds[1]
    ny, nx = frame.shape
    c_lo = int(math.floor((cx - radius - x0) / res))
    c_hi = int(math.floor((cx + radius - x0) / res))
    r_lo = int(math.floor((cy - radius - y0) / res))
    r_hi = int(math.floor((cy + radius - y0) / res))
    inside = c_lo >= 0 and r_lo >= 0 and c_hi < nx and r_hi < ny
    cols = np.arange(max(c_lo, 0), min(c_hi, nx - 1) + 1)
    rows = np.arange(max(r_lo, 0), min(r_hi, ny - 1) + 1)
    if cols.size == 0 or rows.size == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int), False
    gr, gc = np.meshgrid(rows, cols, indexing="ij")
    dx = x0 + (gc + 0.5) * res - cx
    dy = y0 + (gr + 0.5) * res - cy
    keep = dx * dx + dy * dy <= radius * radius
    return gr[keep], gc[keep], inside


@dataclass(frozen=True, eq=False)
class DiskPatches:
    """Plane fits over several equal-radius disks; arrays are indexed by disk"""
    inside: np.ndarray
    n_cells: np.ndarray
    uniform: np.ndarray
    segment: np.ndarray
    degenerate: np.ndarray
    rmse: np.ndarray
    normal: np.ndarray


def disk_patches(frame: SensorFrame, centers: np.ndarray, radius: float) -> DiskPatches:
    """disk_cells and fit_plane for every center at once; degenerate disks get rmse nan and normal UP"""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    m = centers.shape[0]
    res = frame.resolution
    x0, y0 = frame.bounds[0], frame.bounds[1]
    ny, nx = frame.shape
    cx, cy = centers[:, 0], centers[:, 1]
    c_lo = np.floor((cx - radius - x0) / res).astype(np.int64)
    c_hi = np.floor((cx + radius - x0) / res).astype(np.int64)
    r_lo = np.floor((cy - radius - y0) / res).astype(np.int64)
    r_hi = np.floor((cy + radius - y0) / res).astype(np.int64)
    inside = (c_lo >= 0) & (r_lo >= 0) & (c_hi < nx) & (r_hi < ny)
    if m == 0:
        empty = np.zeros(0)
        return DiskPatches(inside=inside, n_cells=empty.astype(np.int64), uniform=empty.astype(bool),
                           segment=empty.astype(np.int64), degenerate=empty.astype(bool), rmse=empty,
                           normal=np.zeros((0, 3)))

    span = int(max((c_hi - c_lo).max(), (r_hi - r_lo).max())) + 1
    offsets = np.arange(span)
    rows = np.broadcast_to(r_lo[:, None, None] + offsets[None, :, None], (m, span, span))
    cols = np.broadcast_to(c_lo[:, None, None] + offsets[None, None, :], (m, span, span))
    valid = (rows <= r_hi[:, None, None]) & (cols <= c_hi[:, None, None])
    valid &= (rows >= 0) & (rows < ny) & (cols >= 0) & (cols < nx)
    rc, cc = np.clip(rows, 0, ny - 1), np.clip(cols, 0, nx - 1)
    dx = x0 + (cc + 0.5) * res - cx[:, None, None]
    dy = y0 + (rc + 0.5) * res - cy[:, None, None]
    keep = (valid & (dx * dx + dy * dy <= radius * radius)).reshape(m, -1)

    labels = frame.segmentgrid[rc, cc].reshape(m, -1)
    n_cells = keep.sum(axis=1)
    first = labels[np.arange(m), np.argmax(keep, axis=1)]
    uniform = (n_cells > 0) & np.all((labels == first[:, None]) | ~keep, axis=1)

    pts = np.stack([frame.x_centers[cc], frame.y_centers[rc], frame.heightgrid[rc, cc]], axis=-1).reshape(m, -1, 3)
    weight = keep[:, :, None].astype(float)
    count = np.maximum(n_cells, 1)[:, None]
    centroid = (pts * weight).sum(axis=1) / count
    centered = (pts - centroid[:, None, :]) * weight
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[:, 2, :]
    normal = normal / np.linalg.norm(normal, axis=1, keepdims=True)
    normal = np.where(normal[:, 2:3] < 0, -normal, normal)
    degenerate = (n_cells < 3) | (s[:, 1] <= 1e-12) | (normal[:, 2] == 0.0)
    residual = np.einsum("mkj,mj->mk", centered, normal)
    rmse = np.where(degenerate, np.nan, np.sqrt((residual ** 2).sum(axis=1) / count[:, 0]))
    normal = np.where(degenerate[:, None], np.asarray(UP), normal)
    return DiskPatches(inside=inside, n_cells=n_cells, uniform=uniform, segment=first,
                       degenerate=degenerate, rmse=rmse, normal=normal)


def cell_points(frame: SensorFrame, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.column_stack([frame.x_centers[cols], frame.y_centers[rows], frame.heightgrid[rows, cols]])


def surface_at(frame: SensorFrame, x: float, y: float, patch_radius: float = PATCH_RADIUS) -> SurfacePoint:
    """Height, local normal and segment label under (x, y)"""
    if not frame.in_bounds(x, y):
        raise OutOfBoundsError(f"({x:.4f}, {y:.4f}) lies outside conveyor bounds {frame.bounds}")
    row, col = frame.cell_of(x, y)
    segment = int(frame.segmentgrid[row, col])
    if segment == EMPTY:
        return SurfacePoint(z=0.0, normal=UP, segment_id=EMPTY)

    rows, cols, _ = disk_cells(frame, x, y, patch_radius)
    same = frame.segmentgrid[rows, cols] == segment
    normal = UP
    if np.count_nonzero(same) >= 3:
        try:
            normal = fit_plane(cell_points(frame, rows[same], cols[same])).normal
        except DegenerateGeometryError:
            logger.debug(f"Degenerate patch at ({x:.4f}, {y:.4f}); using vertical normal")
    return SurfacePoint(z=float(frame.heightgrid[row, col]), normal=normal, segment_id=segment)


def local_height_map(frame: SensorFrame, center: Tuple[float, float], d: float, G: int,
                     fill_value: float = HEIGHT_MAP_FILL) -> HeightMap:
    """G x G max-pooled heights over the 2d x 2d window around center (snapped to the cell grid)"""
    if d <= 0:
        raise ValueError(f"height map half-width must be positive, got {d}")
    if G < 2:
        raise ValueError(f"height map grid must be at least 2, got {G}")
    res = frame.resolution
    ny, nx = frame.shape
    half = max(int(round(d / res)), 1)
    size = 2 * half
    if size < G:
        size = G
        half = (G + 1) // 2
    ci = int(math.floor((center[0] - frame.bounds[0]) / res))
    ri = int(math.floor((center[1] - frame.bounds[1]) / res))
    c0, r0 = ci - half + 1, ri - half + 1

    window = np.full((size, size), -np.inf)
    rs, re = max(r0, 0), min(r0 + size, ny)
    cs, ce = max(c0, 0), min(c0 + size, nx)
    if rs < re and cs < ce:
        z = frame.heightgrid[rs:re, cs:ce]
        labeled = frame.segmentgrid[rs:re, cs:ce] != EMPTY
        window[rs - r0:re - r0, cs - c0:ce - c0] = np.where(labeled, z, -np.inf)

    starts = (np.arange(G) * size) // G
    pooled = np.maximum.reduceat(np.maximum.reduceat(window, starts, axis=0), starts, axis=1)
    grid = np.where(np.isfinite(pooled), pooled, fill_value)
    return HeightMap(grid=grid, center=(float(center[0]), float(center[1])), extent=float(d),
                     fill_value=float(fill_value))


def adjacency_graph(frame: SensorFrame, gap: int = ADJACENCY_GAP_CELLS) -> Dict[int, AdjacencyInfo]:
    """Neighbors are segments with cells within `gap` cells (Chebyshev); rank 1 is highest"""
    def build() -> Dict[int, AdjacencyInfo]:
        ids = frame.segment_ids()
        heights = {s: float(frame.heightgrid[frame.segment_mask(s)].mean()) for s in ids}
        structure = np.ones((2 * gap + 1, 2 * gap + 1), dtype=bool)
        neighbors = {}
        for seg in ids:
            grown = ndimage.binary_dilation(frame.segment_mask(seg), structure=structure) if gap > 0 \
                else frame.segment_mask(seg)
            touched = np.unique(frame.segmentgrid[grown])
            neighbors[seg] = frozenset(int(t) for t in touched if t != EMPTY and t != seg)

        graph = {}
        for seg in ids:
            n_higher = sum(
                1 for n in neighbors[seg]
                if heights[n] > heights[seg] or (heights[n] == heights[seg] and n < seg)
            )
            graph[seg] = AdjacencyInfo(segment_id=seg, neighbor_ids=neighbors[seg], rank=1 + n_higher,
                                       n_higher=n_higher, height=heights[seg])
        return graph

    return frame.cached(("adjacency", gap), build)
