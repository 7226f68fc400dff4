"""Minimum-cost bipartite assignment (Hungarian / Kuhn-Munkres with potentials)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MatchResult:
    """``pairs`` holds ``(prediction, ground_truth)`` sorted by ground truth.

    ``unmatched`` lists prediction indices that are assigned to no-object.
    """

    pairs: list
    unmatched: list = field(default_factory=list)
    cost: float = 0.0


def _solve_rows_le_cols(a):
    """Optimal assignment of every row of ``a`` (n <= m). Returns col index per row."""
    n, m = a.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
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
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _min_cost(cost_t):
    if cost_t.shape[0] == 0:
        return 0.0
    cols = _solve_rows_le_cols(cost_t)
    return float(cost_t[np.arange(cost_t.shape[0]), cols].sum())


def hungarian_assign(cost, canonical=True):
    """Assign every ground truth (column) to a distinct prediction (row).

    ``cost`` has shape (n_pred, n_gt) with n_pred >= n_gt. With ``canonical``
    the result among equal-cost optima is the one whose prediction indices,
    read in ground-truth order, are lexicographically smallest.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-d, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_pred < n_gt:
        raise ValueError(
            f"{n_pred} predictions cannot cover {n_gt} ground truths; pad with no-object rows"
        )
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    cost_t = cost.T  # rows = ground truths
    rows = _solve_rows_le_cols(cost_t) if n_gt else np.zeros(0, dtype=np.int64)
    best = float(cost_t[np.arange(n_gt), rows].sum()) if n_gt else 0.0

    if canonical and n_gt:
        tol = 1e-9 * max(1.0, abs(best))
        chosen = []
        free_rows = list(range(n_pred))
        remaining = best
        for g in range(n_gt):
            rest_gt = list(range(g + 1, n_gt))
            for r in free_rows:
                others = [x for x in free_rows if x != r]
                sub = cost_t[np.ix_(rest_gt, others)] if rest_gt else np.zeros((0, len(others)))
                total = cost_t[g, r] + _min_cost(sub)
                if total <= remaining + tol:
                    chosen.append(r)
                    free_rows = others
                    remaining = total - cost_t[g, r]
                    break
        rows = np.array(chosen, dtype=np.int64)

    pairs = [(int(rows[g]), g) for g in range(n_gt)]
    matched = {r for r, _ in pairs}
    unmatched = [i for i in range(n_pred) if i not in matched]
    total = float(sum(cost[r, g] for r, g in pairs))
    return MatchResult(pairs, unmatched, total)

