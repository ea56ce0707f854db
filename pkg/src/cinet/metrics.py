"""Depth and segmentation evaluation over a pooled set of valid pixels."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

FIELDS = ("delta1", "delta2", "delta3", "rms", "rms_log", "abs_rel", "sq_rel", "pAcc", "mIoU")


@dataclass
class MetricsReport:
    delta1: float
    delta2: float
    delta3: float
    rms: float
    rms_log: float
    abs_rel: float
    sq_rel: float
    pAcc: float
    mIoU: float
    n_valid: int

    def to_dict(self):
        return asdict(self)


class DepthAccumulator:
    """Running sums for the depth metrics; shards combine with :meth:`merge`."""

    def __init__(self):
        self.n = 0
        self.within = np.zeros(3, dtype=np.int64)
        self.sq = 0.0
        self.sq_log = 0.0
        self.abs_rel = 0.0
        self.sq_rel = 0.0

    def update(self, pred, gt, mask=None):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        mask = gt > 0 if mask is None else np.asarray(mask, dtype=bool)
        d, p = gt[mask], pred[mask]
        if np.any(p <= 0) or np.any(d <= 0):
            raise ValueError("depth metrics need positive predictions and ground truth on valid pixels")
        ratio = np.maximum(p / d, d / p)
        self.n += d.size
        self.within += np.array([(ratio < 1.25 ** k).sum() for k in (1, 2, 3)])
        err = d - p
        self.sq += float((err ** 2).sum())
        self.sq_log += float(((np.log(d) - np.log(p)) ** 2).sum())
        self.abs_rel += float((np.abs(err) / d).sum())
        self.sq_rel += float((err ** 2 / d ** 2).sum())
        return self

    def merge(self, other):
        out = DepthAccumulator()
        out.n = self.n + other.n
        out.within = self.within + other.within
        for name in ("sq", "sq_log", "abs_rel", "sq_rel"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    def result(self):
        if self.n == 0:
            raise ValueError("no valid pixels to evaluate")
        n = self.n
        return {
            "delta1": self.within[0] / n,
            "delta2": self.within[1] / n,
            "delta3": self.within[2] / n,
            "rms": float(np.sqrt(self.sq / n)),
            "rms_log": float(np.sqrt(self.sq_log / n)),
            "abs_rel": self.abs_rel / n,
            "sq_rel": self.sq_rel / n,
            "n_valid": n,
        }


class SegAccumulator:
    """Confusion-matrix accumulator (rows: ground truth, columns: prediction)."""

    def __init__(self, n_classes):
        self.n_classes = n_classes
        self.confusion = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt):
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        c = self.n_classes
        if pred.size and (pred.min() < 0 or pred.max() >= c or gt.min() < 0 or gt.max() >= c):
            raise ValueError(f"labels must lie in [0, {c})")
        self.confusion += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        out = SegAccumulator(self.n_classes)
        out.confusion = self.confusion + other.confusion
        return out

    def result(self):
        cm = self.confusion
        total = cm.sum()
        if total == 0:
            raise ValueError("no labelled pixels to evaluate")
        inter = np.diag(cm)
        gt_count = cm.sum(axis=1)
        union = gt_count + cm.sum(axis=0) - inter
        present = gt_count > 0
        return float(inter.sum() / total), float((inter[present] / union[present]).mean())


def depth_metrics(pred, gt, mask):
    """Threshold accuracies and error statistics over valid pixels."""
    return DepthAccumulator().update(pred, gt, mask).result()


def seg_metrics(pred_labels, gt_labels, n_classes):
    """``(pAcc, mIoU)``; mIoU averages over classes present in the ground truth."""
    return SegAccumulator(n_classes).update(pred_labels, gt_labels).result()


def build_report(depth_acc, seg_acc):
    d = depth_acc.result()
    p_acc, miou = seg_acc.result()
    return MetricsReport(
        delta1=float(d["delta1"]), delta2=float(d["delta2"]), delta3=float(d["delta3"]),
        rms=d["rms"], rms_log=d["rms_log"], abs_rel=float(d["abs_rel"]), sq_rel=float(d["sq_rel"]),
        pAcc=p_acc, mIoU=miou, n_valid=int(d["n_valid"]),
    )
