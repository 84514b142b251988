"""Overlap and topology metrics for binary mask pairs.

Empty-set conventions: with both masks empty every overlap metric is 1 and
the surface distance is 0; with exactly one empty mask the overlap metrics
are 0 and the surface distance is the image diagonal, flagged in the report.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation
from .topo import hard_skeleton

METRIC_NAMES = ("dice", "iou", "precision", "recall", "cl_dice", "asd")


@dataclass
class SampleMetrics:
    id: str
    dice: float
    iou: float
    precision: float
    recall: float
    cl_dice: float
    asd: float
    flag: str = ""

    def values(self):
        return tuple(getattr(self, k) for k in METRIC_NAMES)


@dataclass
class MetricsReport:
    rows: List[SampleMetrics]
    mean: dict
    se: dict


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shapes {pred.shape} and {gt.shape} differ")


def overlap_metrics(pred: np.ndarray, gt: np.ndarray):
    """(dice, iou, precision, recall) for a binary mask pair."""
    _check_pair(pred, gt)
    p = pred.astype(bool)
    g = gt.astype(bool)
    if not p.any() and not g.any():
        return 1.0, 1.0, 1.0, 1.0
    if not p.any() or not g.any():
        return 0.0, 0.0, 0.0, 0.0
    tp = float(np.count_nonzero(p & g))
    fp = float(np.count_nonzero(p & ~g))
    fn = float(np.count_nonzero(~p & g))
    dice = 2 * tp / (2 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return dice, iou, precision, recall


def cl_dice_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    """Harmonic mean of skeleton-vs-mask topology precision and sensitivity."""
    _check_pair(pred, gt)
    p = pred.astype(bool)
    g = gt.astype(bool)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    sp = hard_skeleton(p.astype(np.uint8)).astype(bool)
    sg = hard_skeleton(g.astype(np.uint8)).astype(bool)
    tprec = float(np.count_nonzero(sp & g)) / sp.sum() if sp.any() else 0.0
    tsens = float(np.count_nonzero(sg & p)) / sg.sum() if sg.any() else 0.0
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(k, 2) coords of foreground pixels with a background 4-neighbor.

    The image border counts as background."""
    m = mask.astype(bool)
    pad = np.pad(m, 1)
    h, w = m.shape
    interior = (pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:])
    return np.argwhere(m & ~interior)


def asd(pred: np.ndarray, gt: np.ndarray) -> float:
    """Average surface distance: mean of the two directed mean
    nearest-neighbor distances between boundary pixel sets."""
    _check_pair(pred, gt)
    p_empty = not pred.astype(bool).any()
    g_empty = not gt.astype(bool).any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        h, w = pred.shape
        return float(np.hypot(h, w))
    bp = boundary_pixels(pred).astype(np.float64)
    bg = boundary_pixels(gt).astype(np.float64)
    d_pg = cKDTree(bg).query(bp)[0]
    d_gp = cKDTree(bp).query(bg)[0]
    return 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, sample_id: str = "") -> SampleMetrics:
    _check_pair(pred, gt)
    p_empty = not pred.astype(bool).any()
    g_empty = not gt.astype(bool).any()
    flag = ""
    if p_empty and g_empty:
        flag = "both_empty"
    elif p_empty:
        flag = "pred_empty"
    elif g_empty:
        flag = "gt_empty"
    dice, iou, precision, recall = overlap_metrics(pred, gt)
    return SampleMetrics(sample_id, dice, iou, precision, recall,
                         cl_dice_metric(pred, gt), asd(pred, gt), flag)


def build_report(rows: Sequence[SampleMetrics]) -> MetricsReport:
    """Aggregates per-sample rows into mean and standard error per metric."""
    mean, se = {}, {}
    for k in METRIC_NAMES:
        vals = np.array([getattr(r, k) for r in rows], dtype=np.float64)
        mean[k] = float(vals.mean()) if len(vals) else float("nan")
        se[k] = (float(vals.std(ddof=1) / np.sqrt(len(vals)))
                 if len(vals) > 1 else 0.0)
    return MetricsReport(list(rows), mean, se)


def report_to_tsv(report: MetricsReport, path) -> None:
    cols = ["id", *METRIC_NAMES, "flag"]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(cols) + "\n")
        for r in report.rows:
            vals = "\t".join(f"{v:.6f}" for v in r.values())
            f.write(f"{r.id}\t{vals}\t{r.flag}\n")
        for label, stats in (("mean", report.mean), ("se", report.se)):
            vals = "\t".join(f"{stats[k]:.6f}" for k in METRIC_NAMES)
            f.write(f"{label}\t{vals}\t\n")
