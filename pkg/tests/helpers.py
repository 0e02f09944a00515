"""Shared test helpers: random polygons and independent oracles."""

from __future__ import annotations

import functools
import itertools
import math

import numpy as np


def random_star_polygon(rng: np.random.Generator, G: int, center=(32.0, 32.0), r_lo=8.0, r_hi=24.0) -> np.ndarray:
    """Star-shaped (hence simple) ring with G vertices around ``center``."""
    while True:
        ang = np.sort(rng.uniform(0.0, 2 * np.pi, G))
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
        if gaps.min() > min(0.15, np.pi / G) and gaps.max() < 0.9 * np.pi:
            break
    r = rng.uniform(r_lo, r_hi, G)
    return np.stack([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)], axis=1)


def point_in_polygon_even_odd(x: float, y: float, verts) -> bool:
    """Crossing-number test for one point, half-open in y, crossings at or left of x."""
    inside = False
    n = len(verts)
    for k in range(n):
        x0, y0 = verts[k]
        x1, y1 = verts[(k + 1) % n]
        if (y0 <= y < y1) or (y1 <= y < y0):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if xc <= x:
                inside = not inside
    return inside


def brute_mask(verts, w: int, h: int) -> np.ndarray:
    out = np.zeros((h, w), dtype=bool)
    for j in range(h):
        for i in range(w):
            out[j, i] = point_in_polygon_even_odd(i + 0.5, j + 0.5, verts)
    return out


def dense_boundary_distance(q, verts, step: float = 1e-4) -> float:
    """Distance from q to the boundary by sampling every edge at ``step`` arc length."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(verts, dtype=np.float64)
    best = math.inf
    for k in range(len(v)):
        a, b = v[k], v[(k + 1) % len(v)]
        n = max(int(math.ceil(np.hypot(*(b - a)) / step)), 1)
        t = np.linspace(0.0, 1.0, n + 1)
        pts = a[None] + t[:, None] * (b - a)[None]
        best = min(best, float(np.min(np.hypot(*(pts - q[None]).T))))
    return best


@functools.lru_cache(maxsize=None)
def _injections(m: int, g: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(m), g)), dtype=np.int64).reshape(-1, g)


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum column-ordered total over every injection of columns into rows."""
    m, g = cost.shape
    rows = _injections(m, g)
    totals = np.zeros(len(rows))
    for j in range(g):
        totals = totals + cost[rows[:, j], j]
    return float(totals.min())


def rotate_screen(verts, theta: float, about=(0.0, 0.0)) -> np.ndarray:
    """Rotate by ``theta`` counterclockwise as seen on screen (y down)."""
    v = np.asarray(verts, dtype=np.float64) - np.asarray(about)
    c, s = math.cos(theta), math.sin(theta)
    x = v[:, 0] * c + v[:, 1] * s
    y = -v[:, 0] * s + v[:, 1] * c
    return np.stack([x, y], axis=1) + np.asarray(about)


def central_difference(f, x: np.ndarray, idx, h: float) -> float:
    xp = x.copy()
    xm = x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def refined_boundary_distance(q, verts, coarse: float = 1e-2, fine: float = 1e-6) -> float:
    """Dense-sampling distance to the boundary, refined around the best coarse sample.

    Distance along a segment is convex in the parameter, so searching a fine
    grid around the coarse minimum finds the true minimum to ~fine**2 / d.
    """
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(verts, dtype=np.float64)
    best = math.inf
    for k in range(len(v)):
        a, b = v[k], v[(k + 1) % len(v)]
        length = float(np.hypot(*(b - a)))
        n = max(int(math.ceil(length / coarse)), 1)
        t = np.linspace(0.0, 1.0, n + 1)
        d = np.hypot(*(a[None] + t[:, None] * (b - a)[None] - q[None]).T)
        i = int(np.argmin(d))
        lo, hi = t[max(i - 1, 0)], t[min(i + 1, n)]
        m = max(int(math.ceil((hi - lo) * length / fine)), 1)
        tt = np.linspace(lo, hi, m + 1)
        dd = np.hypot(*(a[None] + tt[:, None] * (b - a)[None] - q[None]).T)
        best = min(best, float(dd.min()))
    return best


def brute_boundary_band(mask: np.ndarray, d: float) -> np.ndarray:
    """Mask pixels within distance d of some background pixel center, the raster's outside included."""
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    bj, bi = np.nonzero(~padded)
    out = np.zeros_like(mask)
    for j, i in zip(*np.nonzero(mask)):
        dist2 = (bj - (j + 1)) ** 2 + (bi - (i + 1)) ** 2
        out[j, i] = math.sqrt(dist2.min()) <= d
    return out


def ccw_ring_samples(verts, spacing: float):
    """Samples every ``spacing`` of arc length from vertex 0 plus every vertex,
    each paired with the screen angle (y up) of the edge it lies on."""
    v = [tuple(map(float, p)) for p in verts]
    n = len(v)
    lengths = [math.hypot(v[(k + 1) % n][0] - v[k][0], v[(k + 1) % n][1] - v[k][1]) for k in range(n)]
    total = sum(lengths)
    tol = 1e-9 * max(total, 1.0)
    out = []
    start = 0.0
    k_s = 1
    for e in range(n):
        (x0, y0), (x1, y1) = v[e], v[(e + 1) % n]
        ang = math.atan2(-(y1 - y0), x1 - x0)
        out.append(((x0, y0), ang))
        end = start + lengths[e]
        while k_s * spacing < total - tol and k_s * spacing < end - tol:
            s = k_s * spacing
            if s > start + tol:
                t = (s - start) / lengths[e]
                out.append(((x0 + t * (x1 - x0), y0 + t * (y1 - y0)), ang))
            k_s += 1
        start = end
    return out


def brute_mta(pred_ccw, gt_ccw, spacing: float = 1.0) -> float:
    ps = ccw_ring_samples(pred_ccw, spacing)
    gs = ccw_ring_samples(gt_ccw, spacing)
    worst = 0.0
    for (px, py), pa in ps:
        best, ga = math.inf, None
        for (gx, gy), a in gs:
            dist = (px - gx) ** 2 + (py - gy) ** 2
            if dist < best:
                best, ga = dist, a
        diff = abs(pa - ga) % (2 * math.pi)
        worst = max(worst, min(diff, 2 * math.pi - diff))
    return math.degrees(worst)


def brute_coco_ap(scores_by_image, iou_by_image, n_gt_total: int, t: float) -> tuple[float, float]:
    """Single-threshold AP (101-point) and max recall, by a direct walk of the protocol.

    ``scores_by_image[i]`` lists detection scores, ``iou_by_image[i]`` is the
    (detections, gts) IoU table of image i.
    """
    records = []
    for img, (scores, ious) in enumerate(zip(scores_by_image, iou_by_image)):
        order = sorted(range(len(scores)), key=lambda k: -scores[k])
        taken = set()
        for k in order:
            best, best_g = t, None
            for g in range(ious.shape[1] if len(scores) else 0):
                if g in taken:
                    continue
                if ious[k, g] >= best:
                    best, best_g = ious[k, g], g
            if best_g is not None:
                taken.add(best_g)
            records.append((scores[k], best_g is not None))
    records.sort(key=lambda r: -r[0])
    tp = fp = 0
    prec, rec = [], []
    for _, hit in records:
        tp += hit
        fp += not hit
        prec.append(tp / (tp + fp))
        rec.append(tp / n_gt_total)
    grid = np.linspace(0.0, 1.0, 101)  # the COCO recall grid
    interp = []
    for r in grid:
        cands = [p for p, rr in zip(prec, rec) if rr >= r]
        interp.append(max(cands) if cands else 0.0)
    return float(np.mean(interp)), (rec[-1] if rec else 0.0)
