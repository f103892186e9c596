"""Label assignment: grid points to ground-truth instances via Hungarian
matching on center distance, mass-center + 24-ray mask encoding, majority
4x-downsampled dense targets, and training-time grid subsampling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CapacityExceeded, CenterOutside, GeometryError
from .geometry import (cast_rays, interior_point, point_in_polygon,
                       polygon_centroid, rasterize_polygon, ray_angles)
from .tasks import DENSE_BLOCK, DENSE_DOWNSAMPLE
from .template import GridSpec

NUM_RAYS = 24
BACKGROUND = -1


@dataclass
class Assignment:
    """Grid point -> instance mapping; -1 marks background points."""

    matched: np.ndarray      # (N,) instance index or -1
    total_cost: float
    cost: np.ndarray         # (N, M) normalized L1 distances

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.matched >= 0)

    @property
    def positive_mask(self) -> np.ndarray:
        return self.matched >= 0


def center_cost_matrix(grid: GridSpec, boxes, image_size: int) -> np.ndarray:
    """L1 distance from each grid point to each box center, as a fraction of
    the image diagonal."""
    if len(boxes) == 0:
        return np.zeros((grid.n_points, 0))
    b = np.asarray(boxes, dtype=np.float64)
    centers = np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2], -1)
    diag = float(np.hypot(image_size, image_size))
    diff = np.abs(grid.points[:, None, :] - centers[None, :, :]).sum(-1)
    return diff / diag


def hungarian_match(grid: GridSpec, boxes, image_size: int,
                    strict: bool = False) -> Assignment:
    """Optimal one-to-one matching of boxes to grid points.

    With more boxes than points the optimal subset of points-many boxes is
    kept and a warning issued (strict=True raises instead); the rest of the
    grid is background.
    """
    cost = center_cost_matrix(grid, boxes, image_size)
    n, m = cost.shape
    if m > n:
        if strict:
            raise CapacityExceeded(f"{m} boxes for {n} grid points")
        warnings.warn(f"{m} boxes exceed {n} grid points; keeping the "
                      f"lowest-cost {n}", stacklevel=2)
    matched = np.full(n, BACKGROUND, dtype=np.int64)
    if m == 0:
        return Assignment(matched=matched, total_cost=0.0, cost=cost)
    rows, cols = linear_sum_assignment(cost)
    matched[rows] = cols
    return Assignment(matched=matched, total_cost=float(cost[rows, cols].sum()),
                      cost=cost)


def mass_center(polygon) -> tuple[float, float]:
    """Area centroid of the annotated polygon (shoelace moments)."""
    return polygon_centroid(polygon)


def instance_center(polygon) -> tuple[float, float]:
    """Mass center, falling back to an approximate pole of inaccessibility
    when the centroid lands outside the polygon."""
    center = mass_center(polygon)
    if point_in_polygon(center, polygon):
        return center
    return interior_point(polygon, refinements=3)


def polar_encode(polygon, center, rays: int = NUM_RAYS) -> np.ndarray:
    """Boundary distance along each of `rays` uniform directions."""
    if not point_in_polygon(center, polygon):
        raise CenterOutside(f"center {center} outside polygon")
    return cast_rays(polygon, center, ray_angles(rays))


def polar_decode(center, lengths,
                 image_size: int | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Connect successive ray endpoints into a polygon; optionally rasterize."""
    lengths = np.asarray(lengths, dtype=np.float64)
    ang = ray_angles(len(lengths))
    poly = np.stack([center[0] + lengths * np.cos(ang),
                     center[1] + lengths * np.sin(ang)], axis=-1)
    mask = None
    if image_size is not None:
        mask = rasterize_polygon(poly, image_size, image_size)
    return poly, mask


def downsample_labels(sem_map: np.ndarray, num_classes: int) -> np.ndarray:
    """Majority vote over each DENSE_DOWNSAMPLE-square block; ties break to
    the lowest class id, with background (-1) ordered after all classes."""
    h, w = sem_map.shape
    f = DENSE_DOWNSAMPLE
    if h % f or w % f:
        raise GeometryError(f"map {h}x{w} not divisible by {f}")
    blocks = (sem_map.reshape(h // f, f, w // f, f)
              .transpose(0, 2, 1, 3).reshape(-1, f * f))
    # order: class 0..C-1, then background, so argmax tie-break prefers classes
    mapped = np.where(blocks == BACKGROUND, num_classes, blocks)
    counts = np.zeros((len(mapped), num_classes + 1), dtype=np.int64)
    np.add.at(counts, (np.arange(len(mapped))[:, None], mapped), 1)
    maj = counts.argmax(axis=1)
    maj = np.where(maj == num_classes, BACKGROUND, maj)
    return maj.reshape(h // f, w // f)


def semseg_targets(sem_map: np.ndarray, grid: GridSpec,
                   num_classes: int) -> np.ndarray:
    """(N, 16) dense targets: the 4x4 raster-order block of the downsampled
    map owned by each grid point. The blocks partition the map exactly."""
    down = downsample_labels(sem_map, num_classes)
    rows, cols = grid.shape
    if down.shape != (rows * DENSE_BLOCK, cols * DENSE_BLOCK):
        raise GeometryError(
            f"downsampled {down.shape} vs grid {grid.shape} blocks")
    b = DENSE_BLOCK
    out = (down.reshape(rows, b, cols, b).transpose(0, 2, 1, 3)
           .reshape(rows * cols, b * b))
    return out


def assemble_dense_map(blocks: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Inverse of semseg_targets' blocking: (N, 16) -> downsampled map."""
    rows, cols = grid_shape
    b = DENSE_BLOCK
    return (blocks.reshape(rows, cols, b, b).transpose(0, 2, 1, 3)
            .reshape(rows * b, cols * b))


def sample_grid_points(positive: np.ndarray, grid: GridSpec, budget: int,
                       rng: np.random.Generator) -> list[int]:
    """Per-window track selection: positives first, the remaining budget
    filled with uniformly drawn negatives. budget <= 0 keeps every point."""
    if budget <= 0:
        return list(range(grid.n_points))
    selected: list[int] = []
    for w in range(grid.n_windows):
        idx = np.flatnonzero(grid.point_window == w)
        if budget > len(idx):
            raise GeometryError(f"budget {budget} exceeds window size {len(idx)}")
        pos = idx[positive[idx]]
        neg = idx[~positive[idx]]
        if len(pos) >= budget:
            take = rng.choice(pos, size=budget, replace=False)
        else:
            fill = rng.choice(neg, size=budget - len(pos), replace=False)
            take = np.concatenate([pos, fill])
        selected.extend(int(i) for i in np.sort(take))
    return selected
