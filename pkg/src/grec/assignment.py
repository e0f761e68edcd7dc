"""Bipartite matching between object queries and ground-truth boxes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import permutations
from typing import Sequence

import numpy as np

from .boxes import pairwise_giou, to_xyxy
from .tensor import ContractError

log = logging.getLogger(__name__)

TIGHT_TOL = 1e-9


class AnnotationError(ValueError):
    """A phrase annotation refers to a ground-truth box that does not exist."""


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]
    unmatched_queries: set[int] = field(default_factory=set)

    @property
    def query_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[q, g] for q, g in self.pairs))


def matching_cost(pred_boxes, pred_obj_prob, gt_boxes, w_class=1.0, w_bbox=5.0, w_giou=2.0) -> np.ndarray:
    """``(N, G)`` cost between predicted and ground-truth center boxes.

    ``pred_obj_prob`` is the raw object probability of each query.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    prob = np.asarray(pred_obj_prob, dtype=np.float64).reshape(-1)
    if len(gt_boxes) == 0:
        return np.zeros((len(pred_boxes), 0))
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    g = pairwise_giou(to_xyxy(pred_boxes), to_xyxy(gt_boxes))
    return w_class * -prob[:, None] + w_bbox * l1 + w_giou * (1.0 - g)


def _solve_square(a: np.ndarray):
    """Shortest augmenting path with potentials on a square matrix.

    Returns ``(row_to_col, u, v)`` where ``a[i, j] - u[i] - v[j] >= 0`` with
    equality on every assigned edge.
    """
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_refine(tight: np.ndarray, row_to_col: np.ndarray) -> np.ndarray:
    """Smallest-index optimal assignment among those using only tight edges."""
    n = len(row_to_col)
    r2c = row_to_col.copy()
    c2r = np.empty(n, dtype=np.int64)
    c2r[r2c] = np.arange(n)
    for i in range(n):
        for c in np.flatnonzero(tight[i, : r2c[i]]):
            # free column r2c[i]; the owner of c must reach it through tight edges
            # using rows > i only
            target = r2c[i]
            start = c2r[c]
            if start <= i:
                continue
            parent: dict[int, tuple[int, int]] = {}
            seen_rows = {start}
            queue = [start]
            found = None
            while queue and found is None:
                r = queue.pop(0)
                for cc in np.flatnonzero(tight[r]):
                    if cc == r2c[r] or cc == c:
                        continue
                    if cc == target:
                        parent[-1] = (r, cc)
                        found = r
                        break
                    owner = c2r[cc]
                    if owner <= i or owner in seen_rows:
                        continue
                    seen_rows.add(owner)
                    parent[owner] = (r, cc)
                    queue.append(owner)
            if found is None:
                continue
            # unwind: each row on the path takes the column it pointed at
            r, cc = parent[-1]
            while True:
                r2c[r] = cc
                c2r[cc] = r
                if r == start:
                    break
                r, cc = parent[r]
            r2c[i] = c
            c2r[c] = i
            break
    return r2c


def hungarian(cost) -> MatchAssignment:
    """Minimum-cost injective assignment of rows (queries) to columns (GT boxes).

    Among optimal assignments the one with the lexicographically smallest
    sorted pair list is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-d, got shape {cost.shape}")
    rows, cols = cost.shape
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    if rows == 0 or cols == 0:
        return MatchAssignment([], set(range(rows)))
    if cols > rows:
        log.warning("only %d queries for %d ground-truth boxes; matching a subset", rows, cols)
    n = max(rows, cols)
    square = np.zeros((n, n))
    square[:rows, :cols] = cost
    r2c, u, v = _solve_square(square)
    scale = max(1.0, float(np.abs(square).max()))
    tight = np.abs(square - u[:, None] - v[None, :]) <= TIGHT_TOL * scale
    r2c = _lexicographic_refine(tight, r2c)
    pairs = [(i, int(r2c[i])) for i in range(rows) if r2c[i] < cols]
    matched = {q for q, _ in pairs}
    return MatchAssignment(pairs, set(range(rows)) - matched)


def brute_force_assignment(cost) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive minimum over all injections of the smaller side."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = cost.shape
    best = (np.inf, [])
    if rows >= cols:
        for perm in permutations(range(rows), cols):
            total = sum(cost[perm[g], g] for g in range(cols))
            pairs = sorted((perm[g], g) for g in range(cols))
            if total < best[0] - 1e-12 or (abs(total - best[0]) <= 1e-12 and pairs < best[1]):
                best = (total, pairs)
    else:
        for perm in permutations(range(cols), rows):
            total = sum(cost[q, perm[q]] for q in range(rows))
            pairs = [(q, perm[q]) for q in range(rows)]
            if total < best[0] - 1e-12 or (abs(total - best[0]) <= 1e-12 and pairs < best[1]):
                best = (total, pairs)
    return float(best[0]), best[1]


def build_phrase_gt_map(
    assignment: MatchAssignment,
    phrase_gts: Sequence[Sequence[int]],
    num_queries: int,
    num_gt: int,
) -> np.ndarray:
    """Binary ``(M, N)`` map: ``Y[i, j] = 1`` iff query ``j`` is matched to a box of phrase ``i``."""
    y = np.zeros((len(phrase_gts), num_queries))
    gt_to_query = {g: q for q, g in assignment.pairs}
    for i, gts in enumerate(phrase_gts):
        for g in gts:
            if not 0 <= g < num_gt:
                raise AnnotationError(f"phrase {i} refers to box {g}, but only {num_gt} exist")
            q = gt_to_query.get(g)
            if q is not None:
                y[i, q] = 1.0
    return y
