"""Optimal bipartite assignment of predictions to ground-truth objects.

Cost matrices have one row per prediction slot and one column per target,
with at most as many targets as slots. Every target gets exactly one slot;
slots left over are the "no object" predictions.

Among several optimal assignments both solvers return the one whose
sequence of slot indices (read in target order) is lexicographically
smallest, so training is reproducible even on tied costs.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import cxcywh_to_xyxy, pairwise_giou

BRUTE_FORCE_LIMIT = 8


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    """``pred_for_target[j]`` is the prediction slot matched to target ``j``."""

    pred_for_target: tuple[int, ...]
    total_cost: float
    num_predictions: int

    def __post_init__(self):
        if len(set(self.pred_for_target)) != len(self.pred_for_target):
            raise MatchingError(f"assignment is not injective: {self.pred_for_target}")
        for r in self.pred_for_target:
            if not 0 <= r < self.num_predictions:
                raise MatchingError(f"slot index {r} out of range for {self.num_predictions} predictions")

    @property
    def num_targets(self) -> int:
        return len(self.pred_for_target)

    def pairs(self) -> list[tuple[int, int]]:
        """(prediction, target) pairs sorted by prediction index."""
        return sorted((r, j) for j, r in enumerate(self.pred_for_target))

    def unmatched(self) -> list[int]:
        used = set(self.pred_for_target)
        return [i for i in range(self.num_predictions) if i not in used]


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0


def assignment_cost(cost: np.ndarray, pred_for_target: Sequence[int]) -> float:
    """Sum of selected entries, accumulated in target order."""
    total = 0.0
    for j, r in enumerate(pred_for_target):
        total += float(cost[r, j])
    return total


def _validate(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if m > n:
        raise MatchingError(f"{m} targets but only {n} prediction slots; increase num_queries")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    return cost


def pairwise_cost(
    class_logits: np.ndarray,
    pred_boxes: np.ndarray,
    target_classes: Sequence[int],
    target_boxes: np.ndarray,
    weights: MatchWeights = MatchWeights(),
) -> np.ndarray:
    """Matching cost ``[N, M]`` between predicted slots and targets.

    ``-w_cls * p(class) + w_l1 * |b - b'|_1 + w_giou * (1 - GIoU)`` with the
    class probability taken from a softmax over the logits (last column is
    "no object"). Boxes are normalised centre form.
    """
    class_logits = np.asarray(class_logits, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    target_boxes = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    target_classes = np.asarray(target_classes, dtype=np.int64)
    n, m = pred_boxes.shape[0], target_boxes.shape[0]
    if m > n:
        raise MatchingError(f"{m} targets but only {n} prediction slots; increase num_queries")
    if m == 0:
        return np.zeros((n, 0))
    z = class_logits - class_logits.max(axis=-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=-1, keepdims=True)
    cost_class = -prob[:, target_classes]
    cost_l1 = np.abs(pred_boxes[:, None, :] - target_boxes[None, :, :]).sum(-1)
    cost_giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(target_boxes))
    return weights.cls * cost_class + weights.l1 * cost_l1 + weights.giou * cost_giou


def _solve(cost: np.ndarray) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method on ``cost.T``.

    Targets play the role of rows (m of them), slots the role of columns
    (n >= m). Returns the slot for each target together with the final
    dual potentials ``u`` (targets) and ``v`` (slots).
    """
    n, m = cost.shape
    a = cost.T
    inf = math.inf
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    owner = [0] * (n + 1)  # owner[col] = 1-based row matched to col, 0 = free
    way = [0] * (n + 1)
    for i in range(1, m + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            # reduced costs of row i0 against every column, vectorised
            red = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (red < minv[1:])
            idx = np.nonzero(better)[0] + 1
            minv[idx] = red[idx - 1]
            for j in idx:
                way[j] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    slot_for_target = [0] * m
    for j in range(1, n + 1):
        if owner[j]:
            slot_for_target[owner[j] - 1] = j - 1
    return slot_for_target, u[1:], v[1:]


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of every target column to a slot row."""
    cost = _validate(cost)
    n, m = cost.shape
    if m == 0:
        return Assignment((), 0.0, n)
    slots, u, v = _solve(cost)
    best = assignment_cost(cost, slots)
    slots = _lexicographic_refine(cost, slots, best, u, v)
    return Assignment(tuple(slots), assignment_cost(cost, slots), n)


def _lexicographic_refine(cost, slots, best, u, v) -> list[int]:
    # Any assignment using edge (r, j) costs at least best + reduced(r, j), so
    # only near-zero reduced-cost edges can lead to an alternative optimum.
    n, m = cost.shape
    reduced = cost - v[:, None] - u[None, :]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    fixed: list[int] = []
    for j in range(m):
        current = slots[j]
        for r in range(current):
            if r in fixed or reduced[r, j] > tol:
                continue
            trial = _forced(cost, fixed + [r])
            if trial is not None and assignment_cost(cost, trial) == best:
                slots = trial
                break
        fixed.append(slots[j])
    return slots


def _forced(cost: np.ndarray, prefix: list[int]) -> list[int] | None:
    """Optimal completion given the slots of the first ``len(prefix)`` targets."""
    n, m = cost.shape
    k = len(prefix)
    if k == m:
        return list(prefix)
    free_rows = [r for r in range(n) if r not in prefix]
    sub = cost[np.ix_(free_rows, list(range(k, m)))]
    sub_slots, _, _ = _solve(sub)
    return list(prefix) + [free_rows[s] for s in sub_slots]


def brute_force_match(cost) -> Assignment:
    """Exhaustive argmin over all injective target-to-slot maps (N <= 8)."""
    cost = _validate(cost)
    n, m = cost.shape
    if n > BRUTE_FORCE_LIMIT:
        raise MatchingError(f"brute force refuses N={n} > {BRUTE_FORCE_LIMIT} (factorial blow-up)")
    if m == 0:
        return Assignment((), 0.0, n)
    # permutations() yields in lexicographic order and argmin keeps the first
    # optimum; totals accumulate target by target like assignment_cost
    perms = _permutation_table(n, m)
    totals = np.zeros(len(perms))
    for j in range(m):
        totals += cost[perms[:, j], j]
    k = int(np.argmin(totals))
    best_slots = tuple(int(r) for r in perms[k])
    best = assignment_cost(cost, best_slots)
    return Assignment(tuple(best_slots), best, n)


@functools.lru_cache(maxsize=None)
def _permutation_table(n: int, m: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n), m)), dtype=np.int64).reshape(-1, m)


def parse_cost_grid(text: str) -> np.ndarray:
    """Parse a whitespace/comma separated numeric grid, one row per line."""
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        except ValueError as exc:
            raise MatchingError(f"cost grid line {line!r}: {exc}") from None
    if not rows:
        raise MatchingError("cost grid is empty")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise MatchingError(f"ragged cost grid: row lengths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)
