"""Segmentation and lineage evaluation measures."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .track import LineageForest, iou_table


def label_iou(pred: np.ndarray, gt: np.ndarray, label: int) -> float:
    """IoU of the ``label`` masks; 1 when the label is absent from both."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("extents differ")
    a, b = pred == label, gt == label
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _dice_table(a: np.ndarray, b: np.ndarray):
    ids_a, ids_b, iou = iou_table(a, b)
    # dice = 2 iou / (1 + iou)
    return ids_a, ids_b, 2.0 * iou / (1.0 + iou)


def best_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over instances of ``a`` of the best Dice against any instance of ``b``."""
    ids_a, ids_b, dice = _dice_table(a, b)
    if len(ids_a) == 0:
        return 0.0
    if len(ids_b) == 0:
        return 0.0
    return float(dice.max(axis=1).mean())


def symmetric_best_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("extents differ")
    if not (pred > 0).any() and not (gt > 0).any():
        raise ValueError("no instances in either label map")
    return min(best_dice(pred, gt), best_dice(gt, pred))


def count_instances(labels: np.ndarray) -> int:
    ids = np.unique(labels)
    return int((ids != 0).sum())


def abs_diff_count(pred: np.ndarray, gt: np.ndarray) -> int:
    return abs(count_instances(pred) - count_instances(gt))


def _match_at(pred_frame: np.ndarray, gt_frame: np.ndarray, gt_id: int) -> int:
    """Predicted id overlapping ``gt_id`` with the highest IoU (0 if none)."""
    ids_g, ids_p, table = iou_table(gt_frame, pred_frame)
    hit = np.nonzero(ids_g == gt_id)[0]
    if len(hit) == 0 or len(ids_p) == 0:
        return 0
    row = table[hit[0]]
    j = int(np.argmax(row))
    return int(ids_p[j]) if row[j] > 0 else 0


def lineage_accuracy(pred: LineageForest, gt: LineageForest) -> float:
    """Fraction of ground-truth parent links recovered.

    A link (child c, parent p) counts when the prediction matched to c in
    c's first frame has, as its parent, the prediction matched to p in p's
    last frame. Returns 1.0 when the ground truth has no links.
    """
    if pred.n_frames != gt.n_frames:
        raise ValueError("forests cover different frame counts")
    ranges = gt.frame_ranges()
    links = [(c, p) for c, p in gt.parents.items() if p and c in ranges and p in ranges]
    if not links:
        return 1.0
    hits = 0
    for c, p in links:
        pc = _match_at(pred.labels[ranges[c][0]], gt.labels[ranges[c][0]], c)
        pp = _match_at(pred.labels[ranges[p][1]], gt.labels[ranges[p][1]], p)
        if pc and pp and pred.parents.get(pc, 0) == pp:
            hits += 1
    return hits / len(links)


@dataclass
class EvalReport:
    values: dict = field(default_factory=dict)  # metric -> list of per-frame/per-video values
    diagnostics: dict = field(default_factory=dict)

    def add(self, metric: str, value: float) -> None:
        self.values.setdefault(metric, []).append(float(value))

    def extend(self, other: "EvalReport") -> None:
        for k, vs in other.values.items():
            self.values.setdefault(k, []).extend(vs)

    def summary(self) -> dict[str, tuple[float, float]]:
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in self.values.items() if v}

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "mean", "std"])
            for k, (m, s) in self.summary().items():
                w.writerow([k, repr(m), repr(s)])

    def format(self) -> str:
        rows = [f"{k:>18s}: {m:.4f} +- {s:.4f}" for k, (m, s) in self.summary().items()]
        return "\n".join(rows)


def evaluate_video(pred: LineageForest, gt: LineageForest) -> EvalReport:
    """Per-frame SBD and |DiC|, plus one lineage-accuracy value for the video."""
    rep = EvalReport()
    for t in range(gt.n_frames):
        p, g = pred.labels[t], gt.labels[t]
        if (p > 0).any() or (g > 0).any():
            rep.add("sbd", symmetric_best_dice(p, g))
        rep.add("abs_dic", abs_diff_count(p, g))
    rep.add("lineage_accuracy", lineage_accuracy(pred, gt))
    return rep
