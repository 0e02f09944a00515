"""Fixed-length vertex targets for a ground-truth polygon.

A ring with G corners is turned into M >= G ordered slots: the contour is
walked counterclockwise from its top-left vertex, M points are spaced evenly
by arc length, and every corner is snapped onto one distinct sample. Snapped
slots are labeled valid. Two matching costs are available: plain Euclidean
distance between sample and corner, and the difference of their positions in
the dense contour sequence ("index" mode). Only the latter keeps corners in
contour order when two corners are close together.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np

from .assignment import solve_assignment
from .geometry import GeometryError, Polygon, PolygonLike, _dense_ring, as_polygon, ensure_ccw, is_simple

__all__ = [
    "EncodingError",
    "ContourSequence",
    "CostMatrix",
    "AssignmentMatrix",
    "VertexTargetSet",
    "start_vertex",
    "build_contour",
    "sample_vertices",
    "cost_matrix",
    "assign",
    "build_target",
    "polygon_from_target",
    "slot_order",
    "preserves_order",
]

Mode = Literal["index", "euclidean"]
DEFAULT_SPACING = 0.5


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class ContourSequence:
    points: np.ndarray
    arc: np.ndarray
    start_index: int
    gt_indices: np.ndarray
    gt_vertices: np.ndarray
    sample_indices: Optional[np.ndarray] = None
    perimeter: float = 0.0

    @property
    def G(self) -> int:
        return len(self.gt_indices)

    @property
    def M(self) -> int:
        return 0 if self.sample_indices is None else len(self.sample_indices)


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    mode: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class AssignmentMatrix:
    X: np.ndarray

    @property
    def rows_for_columns(self) -> np.ndarray:
        return np.argmax(self.X, axis=0)

    def total(self, cost: CostMatrix) -> float:
        return float(np.sum(cost.values[self.X]))


@dataclass
class VertexTargetSet:
    vertices: np.ndarray
    labels: np.ndarray
    source_polygon_id: object = None
    mode: str = "index"
    extras: dict = field(default_factory=dict)

    @property
    def valid_vertices(self) -> np.ndarray:
        return self.vertices[self.labels]


def start_vertex(v: np.ndarray) -> int:
    """Index of the vertex minimizing (y, x)."""
    return int(np.lexsort((v[:, 0], v[:, 1]))[0])


def build_contour(p: PolygonLike, spacing: float = DEFAULT_SPACING) -> ContourSequence:
    """Dense CCW contour of a simple polygon, starting at its top-left vertex."""
    if not spacing > 0:
        raise EncodingError("spacing must be positive")
    poly = as_polygon(p)
    if not is_simple(poly):
        raise EncodingError("polygon is self-intersecting")
    v = ensure_ccw(poly).vertices
    v = np.roll(v, -start_vertex(v), axis=0)
    pts, vidx, arc = _dense_ring(v, spacing)
    return ContourSequence(
        points=pts,
        arc=arc,
        start_index=0,
        gt_indices=vidx,
        gt_vertices=v.copy(),
        perimeter=float(np.sum(np.hypot(*(np.roll(v, -1, axis=0) - v).T))),
    )


def _point_at(c: ContourSequence, s: float) -> np.ndarray:
    v = c.gt_vertices
    nxt = np.roll(v, -1, axis=0)
    seg = np.hypot(*(nxt - v).T)
    starts = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    e = int(np.searchsorted(starts, s, side="right") - 1)
    t = (s - starts[e]) / seg[e]
    return v[e] + t * (nxt[e] - v[e])


def sample_vertices(c: ContourSequence, M: int) -> ContourSequence:
    """Place M evenly spaced samples on the contour, first one on the start point.

    Samples missing from the dense sequence are inserted at their arc position,
    so the returned sequence may be longer than the input.
    """
    G = c.G
    if M < 3:
        raise EncodingError("M must be at least 3")
    if M < G:
        raise EncodingError(f"M={M} is smaller than the number of vertices G={G}")
    L = c.perimeter
    tol = 1e-9 * max(L, 1.0)
    s_arc = np.arange(M) * (L / M)
    pts = list(c.points)
    arc = list(c.arc)
    sample_pos = []
    for s in s_arc:
        k = int(np.searchsorted(arc, s - tol))
        if k < len(arc) and abs(arc[k] - s) <= tol:
            sample_pos.append(arc[k])
            continue
        pts.insert(k, _point_at(c, s))
        arc.insert(k, s)
        sample_pos.append(s)
    arc_a = np.array(arc)
    pts_a = np.array(pts)
    gt_idx = np.searchsorted(arc_a, c.arc[c.gt_indices])
    s_idx = np.searchsorted(arc_a, np.array(sample_pos))
    return replace(c, points=pts_a, arc=arc_a, gt_indices=gt_idx, sample_indices=s_idx)


def cost_matrix(c: ContourSequence, mode: Mode = "index", cyclic: bool = False) -> CostMatrix:
    """(M, G) matching cost between samples (rows) and corners (columns)."""
    if c.sample_indices is None:
        raise EncodingError("contour has no samples; call sample_vertices first")
    if mode == "euclidean":
        s = c.points[c.sample_indices]
        d = s[:, None, :] - c.gt_vertices[None, :, :]
        vals = np.hypot(d[..., 0], d[..., 1])
    elif mode == "index":
        diff = np.abs(c.sample_indices[:, None] - c.gt_indices[None, :]).astype(np.float64)
        if cyclic:
            diff = np.minimum(diff, len(c.points) - diff)
        vals = diff
    else:
        raise EncodingError(f"unknown cost mode {mode!r}")
    return CostMatrix(vals, mode)


def assign(cost: CostMatrix) -> AssignmentMatrix:
    vals = cost.values
    try:
        rows = solve_assignment(vals)
    except ValueError as exc:
        raise EncodingError(str(exc)) from exc
    X = np.zeros(vals.shape, dtype=bool)
    X[rows, np.arange(vals.shape[1])] = True
    return AssignmentMatrix(X)


def build_target(
    p: PolygonLike,
    M: int,
    mode: Mode = "index",
    spacing: float = DEFAULT_SPACING,
    cyclic: bool = False,
    source_polygon_id: object = None,
) -> VertexTargetSet:
    """Sample M slots along ``p`` and move the assigned ones onto the corners."""
    c = sample_vertices(build_contour(p, spacing), M)
    cm = cost_matrix(c, mode, cyclic=cyclic)
    X = assign(cm).X
    verts = c.points[c.sample_indices].copy()
    labels = X.any(axis=1)
    rows, cols = np.nonzero(X)
    verts[rows] = c.gt_vertices[cols]
    return VertexTargetSet(
        vertices=verts,
        labels=labels,
        source_polygon_id=source_polygon_id,
        mode=mode,
        extras={"slot_to_gt": dict(zip(rows.tolist(), cols.tolist())), "gt_vertices": c.gt_vertices},
    )


def slot_order(t: VertexTargetSet) -> list[int]:
    """Corner index of each valid slot, in slot order."""
    m = t.extras["slot_to_gt"]
    return [m[k] for k in sorted(m)]


def preserves_order(t: VertexTargetSet) -> bool:
    """True when valid slots visit the corners in contour order (any rotation)."""
    order = slot_order(t)
    G = len(order)
    if G == 0:
        return True
    k = order.index(0)
    return order[k:] + order[:k] == list(range(G))


def polygon_from_target(t: VertexTargetSet) -> Polygon:
    verts = t.valid_vertices
    if len(verts) < 3:
        raise GeometryError("fewer than 3 valid slots")
    return Polygon(verts)
