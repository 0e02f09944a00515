"""Polygon primitives in the image frame.

Coordinates are pixels with the y-axis pointing down. A ring is called
counterclockwise (CCW) when it turns counterclockwise *as seen on screen*;
with y pointing down that makes the plain shoelace sum negative.  Tangent
angles are measured the same way, ``atan2(-dy, dx)``, so a CCW ring turns
through +2*pi.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "Polygon",
    "MaskGrid",
    "GeometryError",
    "as_polygon",
    "signed_area",
    "is_ccw",
    "ensure_ccw",
    "perimeter",
    "rasterize",
    "point_to_boundary_distance",
    "points_to_boundary_distance",
    "resample_by_arclength",
    "tangent_angles",
    "is_simple",
    "bounding_box",
]


class GeometryError(ValueError):
    """Raised for degenerate or otherwise invalid polygon input."""


@dataclass(frozen=True, eq=False)
class Polygon:
    """Closed ring of 2D vertices; the last edge runs from the last vertex back to the first."""

    vertices: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise GeometryError(f"expected an (n, 2) vertex array, got shape {v.shape}")
        if len(v) < 3:
            raise GeometryError(f"a polygon needs at least 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon vertices must be finite")
        if np.any(np.all(v == np.roll(v, -1, axis=0), axis=1)):
            raise GeometryError("consecutive vertices must differ")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __len__(self) -> int:
        return len(self.vertices)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Polygon):
            return NotImplemented
        return self.vertices.shape == other.vertices.shape and bool(
            np.array_equal(self.vertices, other.vertices)
        )

    def __hash__(self) -> int:
        return hash(self.vertices.tobytes())

    def reversed(self) -> "Polygon":
        return Polygon(self.vertices[::-1].copy())

    def tolist(self) -> list[list[float]]:
        return self.vertices.tolist()


PolygonLike = Union[Polygon, Sequence[Sequence[float]], np.ndarray]


def as_polygon(p: PolygonLike) -> Polygon:
    return p if isinstance(p, Polygon) else Polygon(np.asarray(p, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class MaskGrid:
    """Row-major boolean raster; ``bits[j, i]`` is the pixel whose center is (i + 0.5, j + 0.5)."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.size != self.width * self.height:
            raise GeometryError("bits length must equal width * height")
        object.__setattr__(self, "bits", bits.reshape(self.height, self.width))

    def count(self) -> int:
        return int(self.bits.sum())


def signed_area(p: PolygonLike) -> float:
    """Shoelace area ``0.5 * sum(x_i * y_{i+1} - x_{i+1} * y_i)``.

    Negative for rings that are counterclockwise on screen (y down).
    """
    v = as_polygon(p).vertices
    x, y = v[:, 0], v[:, 1]
    # Center first: keeps the sum translation invariant to rounding level.
    x = x - x.mean()
    y = y - y.mean()
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def is_ccw(p: PolygonLike) -> bool:
    return signed_area(p) < 0.0


def ensure_ccw(p: PolygonLike) -> Polygon:
    poly = as_polygon(p)
    return poly if is_ccw(poly) else poly.reversed()


def _edges(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return v, np.roll(v, -1, axis=0)


def perimeter(p: PolygonLike) -> float:
    a, b = _edges(as_polygon(p).vertices)
    return float(np.sum(np.hypot(*(b - a).T)))


def bounding_box(p: PolygonLike) -> tuple[float, float, float, float]:
    v = as_polygon(p).vertices
    return (float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max()))


def rasterize(p: PolygonLike, w: int, h: int) -> MaskGrid:
    """Even-odd fill sampled at pixel centers.

    Edge crossings use a half-open span in y (``min_y <= yc < max_y``) and a
    center counts as inside when an odd number of crossings lie at or left of
    it, which is the top-left fill rule: centers on a top or left edge are
    set, centers on a bottom or right edge are not.
    """
    if w < 1 or h < 1:
        raise GeometryError("raster dimensions must be >= 1")
    a, b = _edges(as_polygon(p).vertices)
    yc = np.arange(h) + 0.5
    xc = np.arange(w) + 0.5
    y0, y1 = a[:, 1], b[:, 1]
    x0, x1 = a[:, 0], b[:, 0]
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
    spans = (lo[None, :] <= yc[:, None]) & (yc[:, None] < hi[None, :])  # (h, E)
    dy = np.where(y1 != y0, y1 - y0, 1.0)
    t = (yc[:, None] - y0[None, :]) / dy[None, :]
    x_cross = x0[None, :] + t * (x1 - x0)[None, :]
    x_cross = np.where(spans, x_cross, np.inf)
    counts = (x_cross[:, None, :] <= xc[None, :, None]).sum(axis=2)  # (h, w)
    return MaskGrid(w, h, (counts % 2).astype(bool))


def points_to_boundary_distance(q: np.ndarray, p: PolygonLike) -> np.ndarray:
    """Distances from each row of ``q`` (k, 2) to the closest boundary segment of ``p``."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    a, b = _edges(as_polygon(p).vertices)
    d = b - a
    len2 = np.sum(d * d, axis=1)
    rel = q[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(rel * d[None], axis=2) / len2[None], 0.0, 1.0)
    nearest = a[None] + t[..., None] * d[None]
    dist = np.hypot(*(q[:, None, :] - nearest).transpose(2, 0, 1))
    return dist.min(axis=1)


def point_to_boundary_distance(q: Sequence[float], p: PolygonLike) -> float:
    return float(points_to_boundary_distance(np.asarray(q, dtype=np.float64)[None], p)[0])


def _dense_ring(
    v: np.ndarray, spacing: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense ring samples plus the positions of the original vertices and arc positions."""
    if not spacing > 0:
        raise GeometryError("spacing must be positive")
    a, b = _edges(v)
    seg = np.hypot(*(b - a).T)
    starts = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    total = float(seg.sum())
    tol = 1e-9 * max(total, 1.0)
    pts: list[np.ndarray] = []
    arcs: list[float] = []
    vidx: list[int] = []
    k = 1
    for e in range(len(v)):
        vidx.append(len(pts))
        pts.append(v[e])
        arcs.append(starts[e])
        end = starts[e] + seg[e]
        while k * spacing < total - tol:
            s = k * spacing
            if s >= end - tol:
                break
            if s > starts[e] + tol:
                t = (s - starts[e]) / seg[e]
                pts.append(a[e] + t * (b[e] - a[e]))
                arcs.append(s)
            k += 1
    return np.array(pts), np.array(vidx, dtype=np.int64), np.array(arcs)


def resample_by_arclength(p: PolygonLike, spacing: float) -> np.ndarray:
    """Points every ``spacing`` px of arc length from the first vertex, with every vertex kept.

    Returns an (n, 2) array in ring order; the first row is the first vertex.
    """
    pts, _, _ = _dense_ring(as_polygon(p).vertices, spacing)
    return pts


def tangent_angles(points: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """Directed tangent at each point of a cyclic sequence, in (-pi, pi].

    The tangent is the forward difference to the next point. When the next
    point coincides with the current one the first distinct successor is
    used instead.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise GeometryError("need at least 2 points")
    out = np.empty(n)
    for i in range(n):
        for step in range(1, n):
            d = pts[(i + step) % n] - pts[i]
            if d[0] != 0.0 or d[1] != 0.0:
                break
        else:
            raise GeometryError("all points coincide")
        ang = np.arctan2(-d[1], d[0])
        out[i] = np.pi if ang <= -np.pi else ang + 0.0
    return out


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c) -> float:
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c) -> bool:
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True
    return (
        (d1 == 0 and on_seg(q1, q2, p1))
        or (d2 == 0 and on_seg(q1, q2, p2))
        or (d3 == 0 and on_seg(p1, p2, q1))
        or (d4 == 0 and on_seg(p1, p2, q2))
    )


def is_simple(p: PolygonLike) -> bool:
    """True when no two non-adjacent edges touch and adjacent edges only share their vertex."""
    v = as_polygon(p).vertices
    n = len(v)
    for i in range(n):
        a1, a2 = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            b1, b2 = v[j], v[(j + 1) % n]
            if j == i + 1 or (i == 0 and j == n - 1):
                # Adjacent: fail only on a fold back along the shared edge.
                shared = a2 if j == i + 1 else a1
                u = (a1 if j == i + 1 else a2) - shared
                w = (b2 if j == i + 1 else b1) - shared
                cross = u[0] * w[1] - u[1] * w[0]
                if cross == 0 and np.dot(u, w) > 0:
                    return False
                continue
            if _segments_intersect(a1, a2, b1, b2):
                return False
    return True


def polygon_from_points(points: Iterable[Sequence[float]]) -> Polygon:
    return Polygon(np.asarray(list(points), dtype=np.float64))
