"""Set-matched segmentation scores: mBO, Hungarian mIoU and binary fg/bg IoU.

Ground-truth label 0 is background and is not averaged over. Scores are
averaged per image; dataset scores are means of per-image scores.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .matching import hungarian

log = logging.getLogger(__name__)

CONVENTION = "per-image mean over gt regions excluding background label 0, then mean over images"


def iou(region_a, region_b):
    region_a = np.asarray(region_a, dtype=bool)
    region_b = np.asarray(region_b, dtype=bool)
    if region_a.shape != region_b.shape:
        raise ValueError(f"region grids differ: {region_a.shape} vs {region_b.shape}")
    union = np.logical_or(region_a, region_b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(region_a, region_b).sum() / union)


def _iou_table(pred, gt, background=0, ignore_label=None):
    """IoU between every predicted region and every non-background gt region."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction grid {pred.shape} != ground truth grid {gt.shape}")
    valid = np.ones(gt.shape, bool) if ignore_label is None else gt != ignore_label
    gt_ids = [g for g in np.unique(gt[valid]) if g != background]
    if not gt_ids:
        raise ValueError("ground truth has no foreground region")
    pred_ids = np.unique(pred[valid])
    p = pred[valid]
    g = gt[valid]
    # contingency counts via a joint index
    p_idx = np.searchsorted(pred_ids, p)
    g_all = np.unique(g)
    g_idx = np.searchsorted(g_all, g)
    joint = np.bincount(p_idx * len(g_all) + g_idx, minlength=len(pred_ids) * len(g_all))
    inter = joint.reshape(len(pred_ids), len(g_all)).astype(float)
    p_area = inter.sum(1, keepdims=True)
    g_area = inter.sum(0, keepdims=True)
    table = inter / (p_area + g_area - inter)
    cols = np.searchsorted(g_all, gt_ids)
    return table[:, cols]


def mbo(pred, gt, background=0, ignore_label=None):
    """Mean over gt regions of the best IoU with any predicted region."""
    table = _iou_table(pred, gt, background, ignore_label)
    return float(table.max(axis=0).mean())


def miou_hungarian(pred, gt, background=0, ignore_label=None):
    """Mean IoU under a one-to-one matching; unmatched gt regions count as 0."""
    table = _iou_table(pred, gt, background, ignore_label)
    match = hungarian(1.0 - table)
    matched = sum(table[p, t] for t, p in match.assignment.items())
    return float(matched / table.shape[1])


def binary_fg_iou(pred_binary, gt_binary):
    """Best-overlap IoU between two binary maps, invariant to label polarity."""
    pred = np.asarray(pred_binary)
    gt = np.asarray(gt_binary)
    if not (np.isin(pred, (0, 1)).all() and np.isin(gt, (0, 1)).all()):
        raise ValueError("binary_fg_iou expects maps valued in {0, 1}")
    if pred.shape != gt.shape:
        raise ValueError(f"grids differ: {pred.shape} vs {gt.shape}")
    present = [c for c in (0, 1) if (gt == c).any()]
    best = 0.0
    for flip in (False, True):
        p = 1 - pred if flip else pred
        best = max(best, float(np.mean([iou(p == c, gt == c) for c in present])))
    return best


def score_image(pred_labels, gt_instances, gt_categories=None, pred_fg=None, gt_fg=None):
    row = dict(mbo_i=mbo(pred_labels, gt_instances), miou=miou_hungarian(pred_labels, gt_instances))
    if gt_categories is not None:
        row["mbo_c"] = mbo(pred_labels, gt_categories)
    if pred_fg is not None and gt_fg is not None:
        row["fg_iou"] = binary_fg_iou(pred_fg, gt_fg)
    return row


def aggregate(rows, keys=None):
    keys = keys or [k for k in rows[0] if isinstance(rows[0][k], float)]
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def write_scores_csv(path, rows, config_hash=None, extra_columns=None):
    """Write per-image rows then one ``mean`` row per group; a ``#`` line carries the config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0])
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n# convention: {CONVENTION}\n")
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def evaluate_directories(pred_dir, gt_dir, category_dir=None):
    """Score paired 8-bit label PNGs with matching file names."""
    from .scenegen import load_png

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no ground-truth PNGs in {gt_dir}")
    rows = []
    for name in names:
        pred_path = pred_dir / name
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        pred = load_png(pred_path)
        gt = load_png(gt_dir / name)
        cats = load_png(Path(category_dir) / name) if category_dir else None
        row = dict(image=name, **score_image(pred, gt, cats, (pred > 0).astype(np.uint8),
                                              (gt > 0).astype(np.uint8)))
        rows.append(row)
    return rows
