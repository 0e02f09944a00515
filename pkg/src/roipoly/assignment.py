"""Exact rectangular assignment with lexicographic tie-breaking.

Every column is assigned to a distinct row (rows >= columns) at minimum total
cost. Among all minimizers the one whose row vector ``rows[0], rows[1], ...``
is lexicographically smallest is returned, which makes the result
independent of floating-point accidents in the solver.

The tie-break is folded into the cost itself: costs are converted exactly to
integers, scaled by ``B**G`` and augmented with ``row * B**(G-1-col)``
(``B`` = number of rows). The shortest-augmenting-path Hungarian method then
runs on Python integers, so the optimum is exact.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

__all__ = ["AssignmentError", "solve_assignment", "assignment_cost"]


class AssignmentError(ValueError):
    pass


def _integerize(cost: np.ndarray) -> list[list[int]]:
    fr = [[Fraction(float(c)) for c in row] for row in cost]
    den = 1
    for row in fr:
        for f in row:
            den = den * f.denominator // math.gcd(den, f.denominator)
    lo = min(f for row in fr for f in row)
    return [[int((f - lo) * den) for f in row] for row in fr]


def _hungarian(a: list[list[int]], n: int, m: int) -> list[int]:
    """Min-cost matching of ``n`` left nodes into ``m >= n`` right nodes.

    ``a[i][j]`` is the cost of left ``i`` to right ``j``. Returns the right node
    of every left node. Potentials form the classic O(n^2 m) method.
    """
    INF = None  # unbounded sentinel; comparisons handle it explicitly
    u = [0] * (n + 1)
    v = [0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: left node matched to right j (1-based, 0 = free)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv: list = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = a[i0 - 1]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui0 - v[j]
                if minv[j] is None or cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if delta is None or minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    match = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            match[p[j] - 1] = j - 1
    return match


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Assign each column of an (M, G) cost matrix to a distinct row, M >= G.

    Returns ``rows`` with ``rows[j]`` the row given to column ``j``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise AssignmentError("cost must be a 2D matrix")
    m_rows, g_cols = cost.shape
    if g_cols == 0:
        return np.zeros(0, dtype=np.int64)
    if m_rows < g_cols:
        raise AssignmentError(f"need rows >= columns, got {m_rows} x {g_cols}")
    if not np.all(np.isfinite(cost)):
        raise AssignmentError("cost matrix must be finite")
    ints = _integerize(cost)
    base = m_rows
    scale = base**g_cols
    weights = [base ** (g_cols - 1 - j) for j in range(g_cols)]
    # Left nodes are columns, right nodes are rows.
    a = [[ints[r][j] * scale + r * weights[j] for r in range(m_rows)] for j in range(g_cols)]
    return np.array(_hungarian(a, g_cols, m_rows), dtype=np.int64)


def assignment_cost(cost: np.ndarray, rows: np.ndarray) -> float:
    """Total cost summed in column order."""
    total = 0.0
    for j, r in enumerate(rows):
        total += float(cost[r, j])
    return total
