import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roipoly.geometry import Polygon
from roipoly.metrics import (
    COCO_AREA_BUCKETS,
    COCO_IOU_THRESHOLDS,
    Detection,
    MetricReport,
    boundary_iou,
    ciou_and_nratio,
    coco_ap,
    complexity_aware_iou,
    default_boundary_width,
    evaluate,
    floorplan_scores,
    greedy_iou_matching,
    mask_iou,
    mta,
    polis,
)

from helpers import brute_coco_ap, random_star_polygon, rotate_screen

SQ = [(10, 10), (10, 30), (30, 30), (30, 10)]


def square(x, y, s):
    return [(x, y), (x, y + s), (x + s, y + s), (x + s, y)]


def test_mask_iou_examples():
    assert mask_iou(SQ, SQ, 64, 64) == 1.0
    assert mask_iou(SQ, square(40, 40, 5), 64, 64) == 0.0
    # unit squares offset by half a side, scaled up on a fine grid
    a, b = square(0, 0, 20), square(10, 0, 20)
    assert mask_iou(a, b, 64, 64) == pytest.approx(1 / 3, abs=1 / 20)
    assert mask_iou(square(100, 100, 5), square(100, 100, 5), 64, 64) == 0.0  # empty union


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_mask_iou_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = random_star_polygon(rng, 7), random_star_polygon(rng, 9)
    assert mask_iou(a, b, 64, 64) == mask_iou(b, a, 64, 64)


def test_boundary_iou_examples():
    assert boundary_iou(SQ, SQ, 64, 64) == 1.0
    assert boundary_iou(SQ, square(40, 40, 8), 64, 64) == 0.0
    a, b = square(5, 5, 30), square(12, 9, 33)
    assert boundary_iou(a, b, 64, 64, d=100.0) == mask_iou(a, b, 64, 64)
    with pytest.raises(ValueError):
        boundary_iou(a, b, 64, 64, d=0.5)


def test_default_boundary_width():
    assert default_boundary_width(64, 64) == 1.0 * max(1.0, 0.02 * math.hypot(64, 64))
    assert default_boundary_width(10, 10) == 1.0
    assert default_boundary_width(300, 300) == pytest.approx(0.02 * math.hypot(300, 300))


def test_polis_examples():
    assert polis(SQ, SQ) == 0.0
    t = 0.1
    unit = square(0, 0, 1)
    grown = square(-t, -t, 1 + 2 * t)
    # unit vertices lie t from the grown edges; grown corners lie t*sqrt(2) from the unit corners
    assert polis(unit, grown) == pytest.approx(t * (1 + math.sqrt(2)) / 2, abs=1e-12)
    assert polis(unit, grown) == polis(grown, unit)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_polis_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = random_star_polygon(rng, 5), random_star_polygon(rng, 8)
    assert polis(a, b) == pytest.approx(polis(b, a), abs=1e-12)


def test_mta_examples():
    assert mta(SQ, SQ) == 0.0
    rotated = rotate_screen(SQ, math.pi / 4, about=(20, 20))
    assert mta(rotated, SQ) == pytest.approx(45.0, abs=1e-9)


@given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(-50, 50))
@settings(max_examples=20, deadline=None)
def test_mta_translation_invariant(seed, dx, dy):
    rng = np.random.default_rng(seed)
    a, b = random_star_polygon(rng, 6), random_star_polygon(rng, 6)
    shift = np.array([dx, dy])
    got = mta(a + shift, b + shift)
    assert 0.0 <= got <= 180.0
    assert got == pytest.approx(mta(a, b), abs=1e-6)


def test_ciou_worked_example():
    assert complexity_aware_iou(0.9, 8, 4) == 0.6
    assert complexity_aware_iou(0.7, 5, 5) == 0.7
    gt = square(10, 10, 10)
    # 9 x 10 rectangle inside the GT with a collinear midpoint on every edge
    pred = [(10, 10), (10, 15), (10, 20), (14.5, 20), (19, 20), (19, 15), (19, 10), (14.5, 10)]
    res = ciou_and_nratio([pred], [gt], 64, 64)
    assert res["ciou"] == 0.6
    assert res["n_ratio"] == 2.0 and res["n_ratio_deviation"] == 1.0


def test_ciou_identity_and_absent():
    polys = [square(5, 5, 10), square(30, 30, 12)]
    res = ciou_and_nratio(polys, polys, 64, 64)
    assert res["ciou"] == 1.0 and res["n_ratio_deviation"] == 0.0
    assert ciou_and_nratio([square(0, 0, 5)], [square(40, 40, 5)], 64, 64) is None


def test_greedy_matching():
    iou = np.array([[0.6, 0.9], [0.8, 0.7]])
    assert greedy_iou_matching(iou, 0.5) == [(0, 1), (1, 0)]
    assert greedy_iou_matching(iou, 0.85) == [(0, 1)]
    assert greedy_iou_matching(np.zeros((0, 2)), 0.5) == []


def test_coco_ap_perfect_and_empty():
    gts = {0: [Polygon(square(5, 5, 10))], 1: [Polygon(square(20, 20, 40)), Polygon(square(1, 1, 3))]}
    dets = [Detection(i, p, 0.9) for i, ps in gts.items() for p in ps]
    fn = lambda a, b: mask_iou(a, b, 64, 64)
    res = coco_ap(dets, gts, fn)
    assert res["ap"]["all"] == 1.0 and res["ar"]["all"] == 1.0
    assert res["ap"]["large"] is None  # no GT that large on a 64 px image
    empty = coco_ap([], gts, fn)
    assert empty["ap"]["all"] == 0.0 and empty["ar"]["all"] == 0.0


def test_coco_ap_hand_walk():
    # image 0: one GT, a true positive (IoU 0.6, score 0.7)
    # image 1: one GT, a false positive (IoU 0.3, score 0.9)
    g0, g1 = Polygon(square(0, 0, 10)), Polygon(square(20, 20, 10))
    d_tp, d_fp = Polygon(square(1, 0, 10)), Polygon(square(21, 20, 10))
    table = {(id(d_tp), id(g0)): 0.6, (id(d_fp), id(g1)): 0.3}
    fn = lambda a, b: table.get((id(a), id(b)), 0.0)
    res = coco_ap([Detection(0, d_tp, 0.7), Detection(1, d_fp, 0.9)], {0: [g0], 1: [g1]}, fn, thresholds=[0.5])
    # ranked: FP (P=0, R=0), TP (P=1/2, R=1/2); interpolated precision is 1/2 for r <= 1/2 (51 grid points)
    assert res["ap_at"]["all"][0.5] == 0.5 * 51 / 101
    assert res["ar_at"]["all"][0.5] == 0.5
    want, _ = brute_coco_ap([[0.7], [0.9]], [np.array([[0.6]]), np.array([[0.3]])], 2, 0.5)
    assert res["ap_at"]["all"][0.5] == want


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_coco_ap_monotone_rescale_invariant(seed):
    rng = np.random.default_rng(seed)
    gts = {i: [Polygon(square(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(8, 20))) for _ in range(2)] for i in range(2)}
    dets = []
    for i in gts:
        for _ in range(3):
            dets.append(Detection(i, Polygon(square(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(8, 20))), rng.uniform()))
    fn = lambda a, b: mask_iou(a, b, 64, 64)
    base = coco_ap(dets, gts, fn)
    squashed = [Detection(d.image_id, d.polygon, d.score**3 * 0.5) for d in dets]
    assert coco_ap(squashed, gts, fn) == base


def test_coco_area_buckets_differ_from_split():
    from roipoly.config import SIZE_SPLIT_AREA

    assert COCO_AREA_BUCKETS["small"] == (0.0, 32.0**2)
    assert COCO_AREA_BUCKETS["medium"][1] == SIZE_SPLIT_AREA
    assert COCO_IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_floorplan_identity_and_empty():
    rooms = [square(10, 10, 60), [(80, 10), (80, 70), (140, 70), (140, 40), (110, 40), (110, 10)]]
    res = floorplan_scores(rooms, rooms)
    for kind in ("room", "corner", "angle"):
        assert res[kind]["f1"] == 1.0
    res = floorplan_scores([], rooms[:1])
    assert res["room"] == {"precision": 0.0, "recall": 0.0, "f1": 0.0, "tp": 0, "n_pred": 0, "n_gt": 1}


def test_floorplan_shift_below_threshold():
    gt = square(50, 50, 100)
    pred = square(93, 50, 100)
    assert mask_iou(pred, gt, 256, 256) == pytest.approx(57 / 143)  # about 0.399
    res = floorplan_scores([pred], [gt])
    assert (res["room"]["tp"], res["room"]["n_pred"], res["room"]["n_gt"]) == (0, 1, 1)
    assert res["corner"]["tp"] == 0 and res["angle"]["tp"] == 0


def test_floorplan_corner_and_angle_counts():
    gt = square(50, 50, 100)
    # one corner moved 3 px (matched), one moved 12 px (unmatched)
    pred = [(53, 50), (50, 150), (150, 150), (150, 62)]
    res = floorplan_scores([pred], [gt])
    assert res["room"]["tp"] == 1
    assert res["corner"]["tp"] == 3
    # (53, 50) has an edge tilted about 7 degrees; the other two matched corners stay within 5
    assert res["angle"]["tp"] == 2
    assert res["corner"]["precision"] == 3 / 4 and res["angle"]["recall"] == 2 / 4


def test_metric_report_table_and_json():
    rep = MetricReport(ap=0.5, ap50=1.0)
    table = rep.to_table().splitlines()
    assert table[0].split()[:3] == ["AP", "AP50", "AP75"]
    assert table[1].split()[:3] == ["0.500", "1.000", "-"]
    assert '"ap": 0.5' in rep.to_json()


def test_evaluate_identity():
    gts = {0: [square(5, 5, 20), square(35, 35, 20)], 1: [square(10, 30, 15)]}
    dets = [Detection(i, p, 1.0) for i, ps in gts.items() for p in ps]
    rep = evaluate(dets, gts, {0: (64, 64), 1: (64, 64)})
    assert rep.ap == rep.ap50 == rep.ar == rep.ap_boundary == 1.0
    assert rep.iou_mean == rep.ciou_mean == rep.n_ratio == 1.0
    assert rep.mta_mean == 0.0 and rep.polis_mean == 0.0
    assert rep.counts["images"] == 2


def test_evaluate_floorplan_fields():
    rooms = {0: [square(10, 10, 60)]}
    rep = evaluate([Detection(0, rooms[0][0], 1.0)], rooms, {0: (256, 256)}, floorplan=True)
    assert rep.room_f1 == rep.corner_f1 == rep.angle_f1 == 1.0
