"""Minimum-cost bipartite assignment between predicted and target regions.

Cost matrices are indexed ``[prediction, target]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MatchingResult:
    assignment: dict  # target index -> prediction index
    total_cost: float

    @property
    def pairs(self):
        """``(pred_indices, target_indices)`` sorted by target."""
        targets = sorted(self.assignment)
        return np.array([self.assignment[t] for t in targets], dtype=int), np.array(targets, dtype=int)


def _validated(cost):
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    return cost


def _total(cost, assignment):
    return float(sum(cost[assignment[t], t] for t in sorted(assignment)))


def _shortest_augmenting_path(a):
    """Rows-to-columns assignment for ``a`` with n_rows <= n_cols (O(n^2 m))."""
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j] = row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows = {int(p[j]) - 1: j - 1 for j in range(1, m + 1) if p[j]}
    return rows


def hungarian(cost):
    """Optimal injective matching of min(n_pred, n_target) pairs."""
    cost = _validated(cost)
    n_pred, n_target = cost.shape
    if n_pred == 0 or n_target == 0:
        return MatchingResult({}, 0.0)
    if n_target <= n_pred:
        # rows are targets, columns are predictions
        rows = _shortest_augmenting_path(cost.T)
        assignment = {t: rows[t] for t in range(n_target)}
    else:
        rows = _shortest_augmenting_path(cost)
        assignment = {t: p for p, t in rows.items()}
    return MatchingResult(assignment, _total(cost, assignment))


def brute_force_assignment(cost, limit=10_000_000):
    """Exhaustive minimum over all injective assignments.

    Ties are broken toward the lexicographically smallest assignment vector,
    indexed over the smaller side (targets when n_target <= n_pred).
    """
    cost = _validated(cost)
    n_pred, n_target = cost.shape
    small, large = min(n_pred, n_target), max(n_pred, n_target)
    if small > 8 or math.perm(large, small) > limit:
        raise ValueError(f"brute force refused for a {n_pred}x{n_target} matrix")
    by_target = n_target <= n_pred
    best, best_vec = math.inf, None
    for vec in itertools.permutations(range(large), small):
        if by_target:
            total = sum(cost[vec[t], t] for t in range(small))
        else:
            total = sum(cost[p, vec[p]] for p in range(small))
        if total < best:
            best, best_vec = total, vec
    if best_vec is None:
        return MatchingResult({}, 0.0)
    if by_target:
        assignment = {t: best_vec[t] for t in range(small)}
    else:
        assignment = {t: p for p, t in enumerate(best_vec)}
    return MatchingResult(assignment, _total(cost, assignment))


def dice(a, b, eps=1e-8):
    return 2.0 * (a * b).sum() / (a.sum() + b.sum() + eps)


def matching_cost(pred_alphas, target_labels, n_targets=None, eps=1e-8):
    """``cost[i, j] = 1 - Dice(pred_alphas[i], target_labels == j)``.

    Works on numpy arrays and torch tensors; the result has the input's type.
    """
    if tuple(pred_alphas.shape[-2:]) != tuple(target_labels.shape[-2:]):
        raise ValueError(f"mask grid {tuple(pred_alphas.shape[-2:])} != label grid {tuple(target_labels.shape)}")
    if n_targets is None:
        n_targets = int(target_labels.max()) + 1
    if hasattr(pred_alphas, "detach"):
        import torch
        onehot = torch.nn.functional.one_hot(target_labels.long(), n_targets).movedim(-1, 0).to(pred_alphas.dtype)
        inter = torch.einsum("khw,jhw->kj", pred_alphas, onehot)
        denom = pred_alphas.sum((-2, -1))[:, None] + onehot.sum((-2, -1))[None, :] + eps
    else:
        onehot = (np.asarray(target_labels)[None] == np.arange(n_targets)[:, None, None]).astype(float)
        pred = np.asarray(pred_alphas, dtype=float)
        inter = np.einsum("khw,jhw->kj", pred, onehot)
        denom = pred.sum((-2, -1))[:, None] + onehot.sum((-2, -1))[None, :] + eps
    return 1.0 - 2.0 * inter / denom
