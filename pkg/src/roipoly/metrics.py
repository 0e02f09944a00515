"""Polygon evaluation: mask and boundary IoU, COCO AP/AR, PoLiS, MTA, C-IoU,
N-ratio and the room/corner/angle floorplan scores."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import (
    Polygon,
    PolygonLike,
    as_polygon,
    ensure_ccw,
    points_to_boundary_distance,
    rasterize,
    resample_by_arclength,
    signed_area,
    tangent_angles,
)

__all__ = [
    "Detection",
    "MetricReport",
    "mask_iou",
    "boundary_iou",
    "boundary_band",
    "default_boundary_width",
    "coco_ap",
    "polis",
    "mta",
    "complexity_aware_iou",
    "ciou_and_nratio",
    "floorplan_scores",
    "greedy_iou_matching",
    "evaluate",
    "COCO_IOU_THRESHOLDS",
    "COCO_AREA_BUCKETS",
]

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
COCO_RECALL_GRID = np.linspace(0.0, 1.0, 101)
# COCO small/medium/large. The training split threshold (96**2) is separate:
# see roipoly.config.SIZE_SPLIT_AREA.
COCO_AREA_BUCKETS: dict[str, tuple[float, float]] = {
    "all": (0.0, math.inf),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, math.inf),
}


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    polygon: Polygon
    score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "polygon", as_polygon(self.polygon))


def _iou_bits(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_iou(a: PolygonLike, b: PolygonLike, w: int, h: int) -> float:
    return _iou_bits(rasterize(a, w, h).bits, rasterize(b, w, h).bits)


def default_boundary_width(w: int, h: int, ratio: float = 0.02) -> float:
    return max(1.0, ratio * math.hypot(w, h))


def boundary_band(mask: np.ndarray, d: float) -> np.ndarray:
    """Mask pixels whose center lies within ``d`` of a background pixel center.

    Pixels outside the raster count as background.
    """
    padded = np.pad(mask, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    return mask & (dist <= d)


def boundary_iou(a: PolygonLike, b: PolygonLike, w: int, h: int, d: Optional[float] = None) -> float:
    if d is None:
        d = default_boundary_width(w, h)
    if d < 1:
        raise ValueError("boundary width must be >= 1 px")
    ba = boundary_band(rasterize(a, w, h).bits, d)
    bb = boundary_band(rasterize(b, w, h).bits, d)
    return _iou_bits(ba, bb)


def polis(a: PolygonLike, b: PolygonLike) -> float:
    """Symmetric mean vertex-to-boundary distance."""
    va = as_polygon(a).vertices
    vb = as_polygon(b).vertices
    da = points_to_boundary_distance(va, b).sum() / (2 * len(va))
    db = points_to_boundary_distance(vb, a).sum() / (2 * len(vb))
    return float(da + db)


def mta(pred: PolygonLike, gt: PolygonLike, spacing: float = 1.0) -> float:
    """Max tangent-angle error in degrees.

    Both rings are walked CCW at ``spacing`` px; every predicted sample is
    paired with its nearest ground-truth sample and their tangent directions
    are compared. The result is the largest difference, in [0, 180].
    """
    ps = resample_by_arclength(ensure_ccw(pred), spacing)
    gs = resample_by_arclength(ensure_ccw(gt), spacing)
    pa = tangent_angles(ps)
    ga = tangent_angles(gs)
    d2 = ((ps[:, None, :] - gs[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    diff = np.abs(np.angle(np.exp(1j * (pa - ga[nearest]))))
    return float(np.degrees(diff.max()))


def complexity_aware_iou(iou: float, n_pred: int, n_gt: int) -> float:
    """IoU scaled by ``1 - |n_pred - n_gt| / (n_pred + n_gt)``."""
    return iou * (2 * min(n_pred, n_gt)) / (n_pred + n_gt)


def greedy_iou_matching(iou: np.ndarray, thresh: float) -> list[tuple[int, int]]:
    """One-to-one pairs (pred, gt) taken by descending IoU while IoU >= thresh."""
    if iou.size == 0:
        return []
    order = np.argsort(-iou, axis=None, kind="stable")
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for flat in order:
        i, j = divmod(int(flat), iou.shape[1])
        if iou[i, j] < thresh:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs


def _iou_table(preds: Sequence[PolygonLike], gts: Sequence[PolygonLike], w: int, h: int) -> np.ndarray:
    pm = [rasterize(p, w, h).bits for p in preds]
    gm = [rasterize(g, w, h).bits for g in gts]
    out = np.zeros((len(pm), len(gm)))
    for i, a in enumerate(pm):
        for j, b in enumerate(gm):
            out[i, j] = _iou_bits(a, b)
    return out


def ciou_and_nratio(
    preds: Sequence[PolygonLike], gts: Sequence[PolygonLike], w: int, h: int, match_iou: float = 0.5
) -> Optional[dict]:
    """Mean per-pair C-IoU and the pooled vertex-count ratio over matched pairs.

    Returns None when nothing matches.
    """
    iou = _iou_table(preds, gts, w, h)
    pairs = greedy_iou_matching(iou, match_iou)
    if not pairs:
        return None
    n_p = [len(as_polygon(preds[i])) for i, _ in pairs]
    n_g = [len(as_polygon(gts[j])) for _, j in pairs]
    ciou = [complexity_aware_iou(iou[i, j], a, b) for (i, j), a, b in zip(pairs, n_p, n_g)]
    ratio = sum(n_p) / sum(n_g)
    return {
        "ciou": float(np.mean(ciou)),
        "n_ratio": ratio,
        "n_ratio_deviation": ratio - 1.0,
        "pairs": pairs,
    }


# ---------------------------------------------------------------------------
# COCO-style AP / AR


def _evaluate_image(ious, gt_areas, det_areas, thresholds, area_rng):
    """Greedy per-image matching. Detections must be sorted by descending score."""
    n_t = len(thresholds)
    n_d, n_g = ious.shape
    gt_ignore = np.array([not (area_rng[0] <= a < area_rng[1]) for a in gt_areas], dtype=bool)
    g_order = np.argsort(gt_ignore, kind="stable")
    gt_ignore = gt_ignore[g_order]
    ious = ious[:, g_order] if n_g else ious
    gt_matched = np.zeros((n_t, n_g), dtype=bool)
    det_matched = np.zeros((n_t, n_d), dtype=bool)
    det_ignore = np.zeros((n_t, n_d), dtype=bool)
    for ti, t in enumerate(thresholds):
        for di in range(n_d):
            best = min(t, 1 - 1e-10)
            m = -1
            for gi in range(n_g):
                if gt_matched[ti, gi]:
                    continue
                if m > -1 and not gt_ignore[m] and gt_ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best = ious[di, gi]
                m = gi
            if m == -1:
                continue
            det_ignore[ti, di] = gt_ignore[m]
            det_matched[ti, di] = True
            gt_matched[ti, m] = True
    outside = np.array([not (area_rng[0] <= a < area_rng[1]) for a in det_areas], dtype=bool)
    det_ignore |= (~det_matched) & outside[None, :]
    return det_matched, det_ignore, int(np.count_nonzero(~gt_ignore))


def coco_ap(
    dets: Sequence[Detection],
    gts: Mapping[Hashable, Sequence[PolygonLike]],
    iou_fn: Callable[[Polygon, Polygon], float],
    thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    area_buckets: Mapping[str, tuple[float, float]] = COCO_AREA_BUCKETS,
    max_dets: int = 100,
) -> dict:
    """COCO protocol AP and AR per threshold and per area bucket.

    ``result["ap"][bucket]`` is the AP averaged over thresholds (None when the
    bucket holds no ground truth), ``result["ap_at"][bucket][t]`` is AP at a
    single threshold; ``ar`` and ``ar_at`` likewise.
    """
    thresholds = list(thresholds)
    by_image: dict[Hashable, list[Detection]] = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)
    image_ids = list(gts.keys()) + [i for i in by_image if i not in gts]

    per_image = []
    for img in image_ids:
        g = [as_polygon(p) for p in gts.get(img, [])]
        dd = sorted(by_image.get(img, []), key=lambda d: -d.score)[:max_dets]
        ious = np.zeros((len(dd), len(g)))
        for i, d in enumerate(dd):
            for j, gp in enumerate(g):
                ious[i, j] = iou_fn(d.polygon, gp)
        per_image.append(
            (
                np.array([d.score for d in dd]),
                ious,
                [abs(signed_area(p)) for p in g],
                [abs(signed_area(d.polygon)) for d in dd],
            )
        )

    result: dict = {"ap": {}, "ar": {}, "ap_at": {}, "ar_at": {}}
    for name, rng in area_buckets.items():
        scores, matched, ignored = [], [], []
        n_pos = 0
        for sc, ious, ga, da in per_image:
            m, ig, npos = _evaluate_image(ious, ga, da, thresholds, rng)
            scores.append(sc)
            matched.append(m)
            ignored.append(ig)
            n_pos += npos
        ap_at, ar_at = {}, {}
        if n_pos == 0:
            result["ap"][name] = result["ar"][name] = None
            result["ap_at"][name] = {t: None for t in thresholds}
            result["ar_at"][name] = {t: None for t in thresholds}
            continue
        sc = np.concatenate(scores) if scores else np.zeros(0)
        order = np.argsort(-sc, kind="mergesort")
        for ti, t in enumerate(thresholds):
            tp_all = np.concatenate([m[ti] for m in matched])[order] if len(order) else np.zeros(0, bool)
            ig_all = np.concatenate([g[ti] for g in ignored])[order] if len(order) else np.zeros(0, bool)
            tp = np.cumsum(tp_all & ~ig_all).astype(float)
            fp = np.cumsum(~tp_all & ~ig_all).astype(float)
            recall = tp / n_pos
            with np.errstate(invalid="ignore", divide="ignore"):
                precision = tp / (tp + fp)
            precision = np.nan_to_num(precision)
            # precision envelope, non-increasing in recall
            env = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
            idx = np.searchsorted(recall, COCO_RECALL_GRID, side="left")
            q = np.array([env[k] if k < len(env) else 0.0 for k in idx])
            ap_at[t] = float(q.mean())
            ar_at[t] = float(recall[-1]) if len(recall) else 0.0
        result["ap_at"][name] = ap_at
        result["ar_at"][name] = ar_at
        result["ap"][name] = float(np.mean(list(ap_at.values())))
        result["ar"][name] = float(np.mean(list(ar_at.values())))
    return result


# ---------------------------------------------------------------------------
# Floorplan (room / corner / angle)


def _prf(tp: int, n_pred: int, n_gt: int) -> dict:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {"precision": p, "recall": r, "f1": f, "tp": tp, "n_pred": n_pred, "n_gt": n_gt}


def _edge_directions(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Directions (degrees) of the two edges leaving each corner."""
    nxt = np.roll(v, -1, axis=0) - v
    prv = np.roll(v, 1, axis=0) - v
    return np.degrees(np.arctan2(-nxt[:, 1], nxt[:, 0])), np.degrees(np.arctan2(-prv[:, 1], prv[:, 0]))


def _angle_gap(a: float, b: float) -> float:
    return abs((a - b + 180.0) % 360.0 - 180.0)


def floorplan_scores(
    pred_rooms: Sequence[PolygonLike],
    gt_rooms: Sequence[PolygonLike],
    iou_thresh: float = 0.5,
    corner_dist: float = 10.0,
    angle_tol: float = 5.0,
    size: int = 256,
) -> dict:
    """Room, corner and angle precision/recall/F1.

    Rooms are paired greedily by IoU (>= ``iou_thresh``). Corners are then
    paired inside each matched room, greedily by distance within
    ``corner_dist``. A paired corner is also an angle hit when both of its
    edge directions agree within ``angle_tol`` degrees.
    """
    preds = [ensure_ccw(p) for p in pred_rooms]
    gts = [ensure_ccw(g) for g in gt_rooms]
    iou = _iou_table(preds, gts, size, size)
    pairs = greedy_iou_matching(iou, iou_thresh)
    n_pc = sum(len(p) for p in preds)
    n_gc = sum(len(g) for g in gts)
    corner_tp = angle_tp = 0
    for i, j in pairs:
        pv, gv = preds[i].vertices, gts[j].vertices
        d = np.hypot(*(pv[:, None, :] - gv[None, :, :]).transpose(2, 0, 1))
        cand = sorted((d[a, b], a, b) for a in range(len(pv)) for b in range(len(gv)) if d[a, b] <= corner_dist)
        up, ug = set(), set()
        pn, pp = _edge_directions(pv)
        gn, gp = _edge_directions(gv)
        for _, a, b in cand:
            if a in up or b in ug:
                continue
            up.add(a)
            ug.add(b)
            corner_tp += 1
            if _angle_gap(pn[a], gn[b]) <= angle_tol and _angle_gap(pp[a], gp[b]) <= angle_tol:
                angle_tp += 1
    return {
        "room": _prf(len(pairs), len(preds), len(gts)),
        "corner": _prf(corner_tp, n_pc, n_gc),
        "angle": _prf(angle_tp, n_pc, n_gc),
    }


# ---------------------------------------------------------------------------
# Report


@dataclass
class MetricReport:
    ap: Optional[float] = None
    ap50: Optional[float] = None
    ap75: Optional[float] = None
    ap_s: Optional[float] = None
    ap_m: Optional[float] = None
    ap_l: Optional[float] = None
    ar: Optional[float] = None
    ar50: Optional[float] = None
    ar75: Optional[float] = None
    ar_s: Optional[float] = None
    ar_m: Optional[float] = None
    ar_l: Optional[float] = None
    ap_boundary: Optional[float] = None
    iou_mean: Optional[float] = None
    ciou_mean: Optional[float] = None
    n_ratio: Optional[float] = None
    n_ratio_deviation: Optional[float] = None
    mta_mean: Optional[float] = None
    polis_mean: Optional[float] = None
    room_precision: Optional[float] = None
    room_recall: Optional[float] = None
    room_f1: Optional[float] = None
    corner_precision: Optional[float] = None
    corner_recall: Optional[float] = None
    corner_f1: Optional[float] = None
    angle_precision: Optional[float] = None
    angle_recall: Optional[float] = None
    angle_f1: Optional[float] = None
    counts: dict = field(default_factory=dict)

    COLUMNS = (
        ("AP", "ap"), ("AP50", "ap50"), ("AP75", "ap75"), ("AP_S", "ap_s"), ("AP_M", "ap_m"),
        ("AP_L", "ap_l"), ("AR", "ar"), ("AR50", "ar50"), ("AR75", "ar75"), ("AR_S", "ar_s"),
        ("AR_M", "ar_m"), ("AR_L", "ar_l"), ("AP_boundary", "ap_boundary"), ("IoU", "iou_mean"),
        ("C-IoU", "ciou_mean"), ("N ratio", "n_ratio"), ("MTA", "mta_mean"), ("PoLiS", "polis_mean"),
    )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)

    def to_table(self) -> str:
        def fmt(v) -> str:
            return "-" if v is None else f"{v:.3f}"

        cols = [(name, fmt(getattr(self, key))) for name, key in self.COLUMNS]
        if self.room_f1 is not None:
            for kind in ("room", "corner", "angle"):
                for part in ("precision", "recall", "f1"):
                    cols.append((f"{kind}_{part[0].upper() if part != 'f1' else 'F1'}", fmt(getattr(self, f"{kind}_{part}"))))
        widths = [max(len(n), len(v)) for n, v in cols]
        head = "  ".join(n.rjust(w) for (n, _), w in zip(cols, widths))
        body = "  ".join(v.rjust(w) for (_, v), w in zip(cols, widths))
        return head + "\n" + body + "\n"


def evaluate(
    dets: Sequence[Detection],
    gts: Mapping[Hashable, Sequence[PolygonLike]],
    image_sizes: Mapping[Hashable, tuple[int, int]],
    match_iou: float = 0.5,
    boundary_ratio: float = 0.02,
    floorplan: bool = False,
    floorplan_kwargs: Optional[dict] = None,
) -> MetricReport:
    """Dataset-level report. ``image_sizes[image_id] = (width, height)``."""
    iou_cache: dict = {}

    def _wh(img):
        return image_sizes[img]

    def make_iou(boundary: bool):
        def fn(img):
            w, h = _wh(img)

            def inner(a, b):
                key = (boundary, img, id(a), id(b))
                if key not in iou_cache:
                    if boundary:
                        iou_cache[key] = boundary_iou(a, b, w, h, default_boundary_width(w, h, boundary_ratio))
                    else:
                        iou_cache[key] = mask_iou(a, b, w, h)
                return iou_cache[key]

            return inner

        return fn

    # iou_fn needs the image frame; run coco_ap image by image through a dispatching closure
    gts_poly = {img: [as_polygon(p) for p in ps] for img, ps in gts.items()}
    owner = {}
    for img, ps in gts_poly.items():
        for p in ps:
            owner[id(p)] = img
    mask_fn, bnd_fn = make_iou(False), make_iou(True)

    def dispatch(fn_factory):
        def iou_fn(a, b):
            return fn_factory(owner[id(b)])(a, b)

        return iou_fn

    coco = coco_ap(dets, gts_poly, dispatch(mask_fn))
    bcoco = coco_ap(dets, gts_poly, dispatch(bnd_fn))

    rep = MetricReport()
    rep.ap = coco["ap"]["all"]
    rep.ap50 = coco["ap_at"]["all"].get(0.5)
    rep.ap75 = coco["ap_at"]["all"].get(0.75)
    rep.ap_s, rep.ap_m, rep.ap_l = (coco["ap"][k] for k in ("small", "medium", "large"))
    rep.ar = coco["ar"]["all"]
    rep.ar50 = coco["ar_at"]["all"].get(0.5)
    rep.ar75 = coco["ar_at"]["all"].get(0.75)
    rep.ar_s, rep.ar_m, rep.ar_l = (coco["ar"][k] for k in ("small", "medium", "large"))
    rep.ap_boundary = bcoco["ap"]["all"]

    by_image: dict = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d.polygon)
    ious, cious, mtas, poliss = [], [], [], []
    n_pred = n_gt = 0
    for img, g in gts_poly.items():
        w, h = _wh(img)
        p = by_image.get(img, [])
        pm = np.zeros((h, w), bool)
        gm = np.zeros((h, w), bool)
        for poly in p:
            pm |= rasterize(poly, w, h).bits
        for poly in g:
            gm |= rasterize(poly, w, h).bits
        if pm.any() or gm.any():
            ious.append(_iou_bits(pm, gm))
        table = _iou_table(p, g, w, h)
        for i, j in greedy_iou_matching(table, match_iou):
            cious.append(complexity_aware_iou(table[i, j], len(p[i]), len(g[j])))
            n_pred += len(p[i])
            n_gt += len(g[j])
            mtas.append(mta(p[i], g[j]))
            poliss.append(polis(p[i], g[j]))
    rep.iou_mean = float(np.mean(ious)) if ious else None
    if cious:
        rep.ciou_mean = float(np.mean(cious))
        rep.n_ratio = n_pred / n_gt
        rep.n_ratio_deviation = rep.n_ratio - 1.0
        rep.mta_mean = float(np.mean(mtas))
        rep.polis_mean = float(np.mean(poliss))
    rep.counts = {
        "images": len(gts_poly),
        "detections": len(dets),
        "ground_truth": sum(len(v) for v in gts_poly.values()),
        "matched_pairs": len(cious),
    }
    if floorplan:
        tp = {"room": [0, 0, 0], "corner": [0, 0, 0], "angle": [0, 0, 0]}
        for img, g in gts_poly.items():
            s = floorplan_scores(by_image.get(img, []), g, **(floorplan_kwargs or {}))
            for kind in tp:
                tp[kind][0] += s[kind]["tp"]
                tp[kind][1] += s[kind]["n_pred"]
                tp[kind][2] += s[kind]["n_gt"]
        for kind, (t, n_p, n_g) in tp.items():
            prf = _prf(t, n_p, n_g)
            setattr(rep, f"{kind}_precision", prf["precision"])
            setattr(rep, f"{kind}_recall", prf["recall"])
            setattr(rep, f"{kind}_f1", prf["f1"])
    return rep
