"""Pooled mIoU over novel classes and foreground-background IoU."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from svflab.validation import check_binary_mask, check_same_shape

FOREGROUND, BACKGROUND = 1, 0


@dataclass
class ConfusionTally:
    counts: dict = field(default_factory=dict)  # class id -> [TP, FP, FN]

    def get(self, class_id) -> tuple[int, int, int]:
        return tuple(self.counts.get(class_id, (0, 0, 0)))

    def merge(self, other: "ConfusionTally") -> "ConfusionTally":
        out = ConfusionTally({k: list(v) for k, v in self.counts.items()})
        for k, (tp, fp, fn) in other.counts.items():
            cur = out.counts.setdefault(k, [0, 0, 0])
            cur[0] += tp
            cur[1] += fp
            cur[2] += fn
        return out


def accumulate(tally: ConfusionTally, pred, gt, class_id) -> ConfusionTally:
    pred = check_binary_mask(pred, "pred")
    gt = check_binary_mask(gt, "gt")
    check_same_shape(pred, gt, "prediction and ground truth")
    cur = tally.counts.setdefault(class_id, [0, 0, 0])
    cur[0] += int(np.count_nonzero(pred & gt))
    cur[1] += int(np.count_nonzero(pred & ~gt))
    cur[2] += int(np.count_nonzero(~pred & gt))
    return tally


def iou(tally: ConfusionTally, class_id) -> float:
    tp, fp, fn = tally.get(class_id)
    denom = tp + fp + fn
    if denom == 0:
        raise ZeroDivisionError(f"IoU of class {class_id} is undefined (no predicted or true pixels)")
    return tp / denom


def miou(tally: ConfusionTally, class_set) -> float:
    classes = list(class_set)
    if not classes:
        raise ValueError("class set is empty")
    return float(np.mean([iou(tally, c) for c in classes]))


def accumulate_fb(tally: ConfusionTally, pred, gt) -> ConfusionTally:
    """Pool foreground and background counts of one prediction, ignoring class identity."""
    pred = check_binary_mask(pred, "pred")
    gt = check_binary_mask(gt, "gt")
    accumulate(tally, pred, gt, FOREGROUND)
    accumulate(tally, ~pred, ~gt, BACKGROUND)
    return tally


def fb_iou(tally: ConfusionTally) -> float:
    return 0.5 * (iou(tally, FOREGROUND) + iou(tally, BACKGROUND))


def write_results(path, rows) -> None:
    """``fold,strategy,k,miou,fb_iou`` rows; each row is a mapping with those keys."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "strategy", "k", "miou", "fb_iou"])
        for r in rows:
            w.writerow([r["fold"], r["strategy"], r["k"], f"{r['miou']:.4f}", f"{r['fb_iou']:.4f}"])


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
