"""Polygon geometry: shoelace area/centroid, even-odd rasterization, ray
casting, and the interior-point fallback for non-star-convex shapes.

Vertices are float arrays of shape (N, 2) in (x, y) pixel coordinates;
masks are (H, W) booleans sampled at pixel centers (x+0.5, y+0.5).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInstance

_MIN_AREA = 1e-9


def as_vertices(polygon) -> np.ndarray:
    v = np.asarray(polygon, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
        raise DegenerateInstance(f"polygon shape {v.shape} invalid")
    return v


def polygon_area(polygon) -> float:
    """Signed shoelace area (positive for counterclockwise order)."""
    v = as_vertices(polygon)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(x * yn - xn * y))


def polygon_centroid(polygon) -> tuple[float, float]:
    """Area centroid from the shoelace moments."""
    v = as_vertices(polygon)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * float(np.sum(cross))
    if abs(area) < _MIN_AREA:
        raise DegenerateInstance("zero-area polygon")
    cx = float(np.sum((x + xn) * cross)) / (6.0 * area)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * area)
    return cx, cy


def polygon_bbox(polygon) -> tuple[float, float, float, float]:
    v = as_vertices(polygon)
    return (float(v[:, 0].min()), float(v[:, 1].min()),
            float(v[:, 0].max()), float(v[:, 1].max()))


def points_in_polygon(points: np.ndarray, polygon) -> np.ndarray:
    """Even-odd (crossing number) containment test for an (M, 2) point array."""
    v = as_vertices(polygon)
    px, py = points[..., 0], points[..., 1]
    inside = np.zeros(px.shape, dtype=bool)
    n = len(v)
    for i in range(n):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        crosses = (y1 <= py) != (y2 <= py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xhit = x1 + (py - y1) / (y2 - y1) * (x2 - x1)
        inside ^= crosses & (px < xhit)
    return inside


def point_in_polygon(point, polygon) -> bool:
    return bool(points_in_polygon(np.asarray(point, dtype=np.float64), polygon))


def rasterize_polygon(polygon, height: int, width: int) -> np.ndarray:
    """(H, W) boolean mask of pixels whose centers fall inside the polygon."""
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    grid = np.stack(np.meshgrid(xs, ys), axis=-1)  # (H, W, 2)
    return points_in_polygon(grid, polygon)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def ray_angles(count: int) -> np.ndarray:
    """Uniform directions starting at 0 deg from +x, counterclockwise."""
    return np.arange(count) * (2.0 * np.pi / count)


def cast_rays(polygon, center, angles: np.ndarray) -> np.ndarray:
    """Distance from center to the polygon boundary along each direction.

    Takes the farthest edge crossing per ray, which equals the boundary
    distance when the polygon is star-convex about the center.
    """
    v = as_vertices(polygon)
    c = np.asarray(center, dtype=np.float64)
    d = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (K, 2)
    edge = np.roll(v, -1, axis=0) - v                        # (E, 2)
    rel = v[None, :, :] - c[None, None, :]                   # (1, E, 2)

    def cross2(a, b):
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    de = cross2(d[:, None, :], edge[None, :, :])             # (K, E)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross2(rel, edge[None, :, :]) / de
        s = cross2(rel, d[:, None, :]) / de
    # closed interval with slack: a ray through a shared vertex must not slip
    # between the two adjacent edges; duplicates are folded by the max below
    eps = 1e-9
    valid = (np.abs(de) > 1e-12) & (s >= -eps) & (s <= 1.0 + eps) & (t >= 0.0)
    t = np.where(valid, t, -np.inf)
    best = t.max(axis=1)
    return np.where(np.isfinite(best), best, 0.0)


def interior_point(polygon, refinements: int = 3) -> tuple[float, float]:
    """Approximate pole of inaccessibility: coarse grid of candidates scored
    by clearance (distance to the nearest edge, negated outside), refined a
    fixed number of times around the best cell; ties broken toward the
    centroid."""
    v = as_vertices(polygon)
    try:
        cx, cy = polygon_centroid(polygon)
    except DegenerateInstance:
        cx, cy = float(v[:, 0].mean()), float(v[:, 1].mean())
    x1, y1, x2, y2 = polygon_bbox(polygon)

    def clearance(points: np.ndarray) -> np.ndarray:
        a = v
        b = np.roll(v, -1, axis=0)
        ab = b - a                                           # (E, 2)
        ap = points[:, None, :] - a[None, :, :]              # (M, E, 2)
        denom = np.maximum((ab * ab).sum(axis=-1), 1e-12)
        t = np.clip((ap * ab[None]).sum(axis=-1) / denom, 0.0, 1.0)
        near = a[None] + t[..., None] * ab[None]
        dist = np.sqrt(((points[:, None, :] - near) ** 2).sum(-1)).min(axis=1)
        sign = np.where(points_in_polygon(points, polygon), 1.0, -1.0)
        return sign * dist

    best = np.array([cx, cy])
    best_score = clearance(best[None])[0]
    span_x, span_y = (x2 - x1) / 2.0, (y2 - y1) / 2.0
    center = np.array([(x1 + x2) / 2.0, (y1 + y2) / 2.0])
    for _ in range(refinements + 1):
        gx = np.linspace(center[0] - span_x, center[0] + span_x, 9)
        gy = np.linspace(center[1] - span_y, center[1] + span_y, 9)
        cand = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
        score = clearance(cand)
        # prefer clearance, then proximity to the centroid
        tie = -np.hypot(cand[:, 0] - cx, cand[:, 1] - cy) * 1e-6
        k = int(np.argmax(score + tie))
        if score[k] > best_score:
            best, best_score = cand[k], score[k]
        center = best
        span_x /= 4.0
        span_y /= 4.0
    return float(best[0]), float(best[1])


def flip_polygon(polygon, width: int) -> np.ndarray:
    v = as_vertices(polygon).copy()
    v[:, 0] = width - v[:, 0]
    return v[::-1].copy()  # keep orientation


def flip_box(box, width: int) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = box
    return (width - x2, y1, width - x1, y2)


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union)


def regular_polygon(center, radius: float, sides: int,
                    phase: float = 0.0) -> np.ndarray:
    ang = ray_angles(sides) + phase
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=-1)
