"""Minimum-cost one-to-one assignment of predictions to ground truth."""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .datamodel import Annotation, ImageRecord
from .geometry import BBox
from .losses import giou_loss, l1_box


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float
    unmatched_predictions: tuple[int, ...]
    unmatched_gts: tuple[int, ...] = ()


@dataclass(frozen=True, slots=True)
class MatchWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self) -> None:
        ws = (self.w_cls, self.w_l1, self.w_giou)
        if not all(math.isfinite(w) and w >= 0 for w in ws):
            raise ValueError("match weights must be finite and nonnegative")
        if not any(ws):
            raise ValueError("match weights must not all be zero")


@dataclass(frozen=True)
class ScoredPrediction:
    """A predicted box with a probability per category id."""

    bbox: BBox
    class_probs: Mapping[int, float] = field(default_factory=dict)


def _solve_square(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method.

    Returns ``(row_to_col, u, v)`` with ``u[i] + v[j] <= cost[i, j]`` and
    equality on every assigned pair.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)  # owner[j] = 1-based row holding column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lex_smallest(
    tight: np.ndarray, row_to_col: np.ndarray, n_real_rows: int, n_real_cols: int
) -> np.ndarray:
    """Among perfect matchings of the equality graph ``tight``, pick the lexicographically
    smallest over real rows, ranking every padding column above every real column.

    Starts from an optimal matching and, row by row, tries to move the row onto
    a smaller column via an alternating cycle through unfixed vertices.
    """
    n = tight.shape[0]
    r2c = row_to_col.copy()
    c2r = np.empty(n, dtype=int)
    c2r[r2c] = np.arange(n)
    fixed_rows = np.zeros(n, dtype=bool)
    fixed_cols = np.zeros(n, dtype=bool)

    for i in range(n_real_rows):
        current = r2c[i]
        for j in range(n_real_cols):
            if j == current:
                break
            if not tight[i, j] or fixed_cols[j]:
                continue
            # alternating path from the row holding j to the column i releases
            path = _alternating_path(tight, r2c, c2r, c2r[j], current, i, j, fixed_rows, fixed_cols)
            if path is None:
                continue
            for row, col in path:
                r2c[row] = col
                c2r[col] = row
            r2c[i] = j
            c2r[j] = i
            break
        fixed_rows[i] = True
        fixed_cols[r2c[i]] = True
    return r2c


def _alternating_path(tight, r2c, c2r, start_row, target_col, skip_row, skip_col, fixed_rows, fixed_cols):
    prev: dict[int, tuple[int, int | None]] = {start_row: (-1, None)}
    queue = deque([start_row])
    n = tight.shape[0]
    while queue:
        row = queue.popleft()
        for col in range(n):
            if not tight[row, col] or col == skip_col or fixed_cols[col] or col == r2c[row]:
                continue
            if col == target_col:
                # unwind: each row on the path moves to the column that led onward
                moves = [(row, col)]
                r, _ = row, col
                while prev[r][0] != -1:
                    parent_row, via_col = prev[r]
                    moves.append((parent_row, via_col))
                    r = parent_row
                return moves
            nxt = c2r[col]
            if nxt == skip_row or fixed_rows[nxt] or nxt in prev:
                continue
            prev[nxt] = (row, col)
            queue.append(nxt)
    return None


def hungarian(cost: Sequence[Sequence[float]] | np.ndarray) -> Assignment:
    """Optimal one-to-one assignment of rows (predictions) to columns (ground truth).

    Ties are broken toward the lexicographically smallest pair list.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim == 1 and c.size == 0:
        c = c.reshape(0, 0)
    if c.ndim != 2:
        raise MatchingError("cost matrix must be 2-D")
    if not np.all(np.isfinite(c)):
        bad = np.argwhere(~np.isfinite(c))[0].tolist()
        raise MatchingError(f"cost matrix has a non-finite entry at {tuple(bad)}")
    rows, cols = c.shape
    if rows == 0 or cols == 0:
        return Assignment((), 0.0, tuple(range(rows)), tuple(range(cols)))

    n = max(rows, cols)
    padded = np.zeros((n, n))
    padded[:rows, :cols] = c
    r2c, u, v = _solve_square(padded)
    scale = max(1.0, float(np.max(np.abs(c))))
    tight = (padded - u[:, None] - v[None, :]) <= 1e-9 * scale * n
    tight[np.arange(n), r2c] = True
    r2c = _lex_smallest(tight, r2c, rows, cols)

    pairs = tuple((i, int(r2c[i])) for i in range(rows) if r2c[i] < cols)
    total = float(sum(c[i, j] for i, j in pairs))
    matched_cols = {j for _, j in pairs}
    return Assignment(
        pairs,
        total,
        tuple(i for i in range(rows) if r2c[i] >= cols),
        tuple(j for j in range(cols) if j not in matched_cols),
    )


def match_cost(pred: ScoredPrediction, gt: Annotation, w: MatchWeights, norm: ImageRecord) -> float:
    try:
        p = pred.class_probs[gt.category_id]
    except KeyError:
        raise MatchingError(f"prediction has no probability for category {gt.category_id}") from None
    return (
        w.w_cls * (1.0 - p)
        + w.w_l1 * l1_box(gt.bbox, pred.bbox, norm)
        + w.w_giou * giou_loss(gt.bbox, pred.bbox)
    )


def cost_matrix(
    preds: Sequence[ScoredPrediction], gts: Sequence[Annotation], w: MatchWeights, norm: ImageRecord
) -> np.ndarray:
    out = np.empty((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = match_cost(p, g, w, norm)
    return out


def match_predictions(
    preds: Sequence[ScoredPrediction],
    gts: Sequence[Annotation],
    w: MatchWeights = MatchWeights(),
    norm: ImageRecord | None = None,
) -> Assignment:
    if not preds:
        raise MatchingError("at least one prediction is required")
    if norm is None:
        raise MatchingError("an image record is needed to normalize the L1 term")
    return hungarian(cost_matrix(preds, gts, w, norm).reshape(len(preds), len(gts)))
