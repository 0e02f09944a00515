import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roipoly.assignment import AssignmentError, assignment_cost, solve_assignment
from roipoly.encoding import (
    CostMatrix,
    EncodingError,
    assign,
    build_contour,
    build_target,
    cost_matrix,
    polygon_from_target,
    preserves_order,
    sample_vertices,
    slot_order,
)
from roipoly.metrics import mask_iou

from helpers import brute_force_assignment, random_star_polygon

SQUARE4 = [(0, 0), (4, 0), (4, 4), (0, 4)]
UNIT = [(0, 0), (1, 0), (1, 1), (0, 1)]
# Rectangle with a narrow slot cut into its top edge: two slot corners sit
# 0.4 px apart, closer to each other than to the samples on either side.
NOTCH = [(0, 0), (0, 10), (10, 10), (10, 0), (5.2, 0), (5.2, 3), (4.8, 3), (4.8, 0)]


def test_start_is_top_left():
    c = build_contour(UNIT, 0.5)
    assert np.array_equal(c.points[c.start_index], [0, 0])
    # two vertices share the minimum y: smaller x wins
    c = build_contour([(3, 2), (1, 2), (0, 5), (4, 5)], 0.5)
    assert np.array_equal(c.points[0], [1, 2])


def test_self_intersecting_rejected():
    with pytest.raises(EncodingError):
        build_contour([(0, 0), (4, 4), (4, 0), (0, 4)])
    with pytest.raises(EncodingError):
        build_contour(UNIT, 0.0)


@given(st.integers(0, 10_000), st.integers(3, 12))
@settings(max_examples=30, deadline=None)
def test_all_vertices_in_contour(seed, G):
    v = random_star_polygon(np.random.default_rng(seed), G)
    c = build_contour(v)
    for k, row in enumerate(c.gt_vertices):
        assert np.array_equal(c.points[c.gt_indices[k]], row)
    assert np.all(np.diff(c.gt_indices) > 0)
    assert sorted(map(tuple, c.gt_vertices)) == sorted(map(tuple, v))


def test_sample_square_corners_and_midpoints():
    c4 = sample_vertices(build_contour(UNIT, 0.5), 4)
    assert sorted(map(tuple, c4.points[c4.sample_indices])) == sorted(map(tuple, np.array(UNIT, float)))
    c8 = sample_vertices(build_contour(UNIT, 0.5), 8)
    got = sorted(map(tuple, c8.points[c8.sample_indices]))
    want = sorted(map(tuple, np.array(UNIT + [(0.5, 0), (1, 0.5), (0.5, 1), (0, 0.5)], float)))
    assert got == want


def test_sample_rejects_small_m():
    c = build_contour(UNIT)
    with pytest.raises(EncodingError):
        sample_vertices(c, 3)


@given(st.integers(0, 10_000), st.integers(3, 8), st.integers(0, 20))
@settings(max_examples=30, deadline=None)
def test_sample_gaps_equal(seed, G, extra):
    v = random_star_polygon(np.random.default_rng(seed), G)
    M = G + extra
    c = sample_vertices(build_contour(v, 0.5), M)
    assert np.all(np.diff(c.sample_indices) > 0)
    # arc length between consecutive samples measured by walking the dense sequence
    seg = np.hypot(*(np.roll(c.points, -1, axis=0) - c.points).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = cum[c.sample_indices]
    gaps = np.diff(np.concatenate([s, [cum[-1]]]))
    assert np.max(np.abs(gaps - cum[-1] / M)) < 1e-9 * max(cum[-1], 1)


def test_cost_matrix_zero_on_coincident_samples():
    c = sample_vertices(build_contour(UNIT, 0.5), 4)
    for mode in ("index", "euclidean"):
        vals = cost_matrix(c, mode).values
        assert np.array_equal(np.diag(vals), np.zeros(4))
    idx = cost_matrix(c, "index").values
    assert np.array_equal(idx, np.round(idx))


def test_cyclic_index_cost():
    c = sample_vertices(build_contour(UNIT, 0.5), 8)
    lin = cost_matrix(c, "index").values
    cyc = cost_matrix(c, "index", cyclic=True).values
    L = len(c.points)
    assert np.array_equal(cyc, np.minimum(lin, L - lin))
    assert lin[-1, 0] > cyc[-1, 0]


def test_assign_examples():
    X = assign(CostMatrix(np.array([[0.0, 5.0], [5.0, 0.0]]), "euclidean")).X
    assert np.array_equal(X, np.eye(2, dtype=bool))
    with pytest.raises(EncodingError):
        assign(CostMatrix(np.array([[0.0, np.inf], [1.0, 0.0]]), "euclidean"))
    with pytest.raises(AssignmentError):
        solve_assignment(np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(40))
def test_assign_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    G = int(rng.integers(1, 7))
    M = int(rng.integers(G, 11))
    C = rng.uniform(0, 10, (M, G)) if seed % 2 else rng.integers(0, 5, (M, G)).astype(float)
    rows = solve_assignment(C)
    assert len(set(rows.tolist())) == G
    assert assignment_cost(C, rows) == brute_force_assignment(C)
    # constant shift leaves the argmin unchanged
    assert np.array_equal(solve_assignment(C + 3.25), rows)


def test_assign_lexicographic_ties():
    C = np.zeros((4, 2))
    assert solve_assignment(C).tolist() == [0, 1]
    C = np.ones((3, 3))
    C[2, 0] = 0.0
    assert solve_assignment(C).tolist() == [2, 0, 1]


def test_build_target_square():
    t = build_target(SQUARE4, 8, "index")
    assert t.labels.tolist() == [True, False] * 4
    assert np.array_equal(t.valid_vertices, build_contour(SQUARE4).gt_vertices)


def test_notch_euclidean_permutes_index_does_not():
    e = build_target(NOTCH, 8, "euclidean")
    i = build_target(NOTCH, 8, "index")
    assert not preserves_order(e)
    assert preserves_order(i)
    assert slot_order(i) == list(range(8))


@pytest.mark.parametrize("seed", range(100))
def test_valid_count_and_exact_shift(seed):
    rng = np.random.default_rng(1000 + seed)
    G = int(rng.integers(3, 13))
    v = random_star_polygon(rng, G)
    mode = "index" if seed % 2 else "euclidean"
    t = build_target(v, G + int(rng.integers(0, 2 * G)), mode)
    assert int(t.labels.sum()) == G
    gt = t.extras["gt_vertices"]
    for slot, col in t.extras["slot_to_gt"].items():
        assert np.array_equal(t.vertices[slot], gt[col])


@given(st.integers(0, 100_000), st.integers(4, 12))
@settings(max_examples=60, deadline=None)
def test_index_mode_preserves_order_and_round_trips(seed, G):
    v = random_star_polygon(np.random.default_rng(seed), G)
    t = build_target(v, 3 * G, "index")
    assert slot_order(t) == list(range(G))
    assert mask_iou(polygon_from_target(t), v, 64, 64) == 1.0
