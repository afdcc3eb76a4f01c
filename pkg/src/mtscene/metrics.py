"""Evaluation metrics: segmentation (mIoU, pixel accuracy) over confusion
counts, recognition (Top@k, mean class accuracy) over score batches.

Confusion accumulation is mergeable: partial matrices from parallel workers
sum exactly, and every scalar metric depends only on the summed counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def new_confusion(num_classes: int) -> np.ndarray:
    """K x K count matrix; entry (i, j) = pixels with truth i predicted j."""
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(confusion: np.ndarray, pred_map, truth_map,
               ignore_index: int | None = None) -> np.ndarray:
    pred = np.asarray(pred_map)
    truth = np.asarray(truth_map)
    if pred.shape != truth.shape:
        raise ValueError(
            f"prediction shape {pred.shape} does not match truth shape {truth.shape}"
        )
    k = confusion.shape[0]
    keep = np.ones(truth.shape, dtype=bool) if ignore_index is None \
        else truth != ignore_index
    t, p = truth[keep].astype(np.int64), pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k):
        raise ValueError(f"label values outside [0, {k})")
    counts = np.bincount(k * t + p, minlength=k * k).reshape(k, k)
    confusion += counts
    return confusion


def miou(confusion: np.ndarray) -> float:
    """Mean over classes with nonzero union of TP / (TP + FP + FN).

    Classes absent from both truth and prediction are excluded, so a perfect
    prediction scores 1.0 regardless of vocabulary size.
    """
    if confusion.sum() == 0:
        raise ValueError("empty confusion matrix")
    ious = per_class_iou(confusion)
    return float(np.nanmean(ious))


def per_class_iou(confusion: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from truth and prediction."""
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def pixel_accuracy(confusion: np.ndarray) -> float:
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(confusion) / total)


def _ranked_classes(logits: np.ndarray) -> np.ndarray:
    """Class order per row: descending score, ties broken by lowest index."""
    n, k = logits.shape
    idx = np.tile(np.arange(k), (n, 1))
    return np.lexsort((idx, -logits), axis=1)


def topk_accuracy(logits_batch, labels, k: int) -> float:
    logits = np.asarray(logits_batch, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.size == 0:
        raise ValueError("empty batch")
    if k > logits.shape[1]:
        raise ValueError(f"k={k} exceeds the {logits.shape[1]} classes")
    ranked = _ranked_classes(logits)[:, :k]
    hits = (ranked == labels[:, None]).any(axis=1)
    return float(hits.mean())


def per_class_top1(logits_batch, labels) -> dict[int, float]:
    """Top@1 accuracy grouped by ground-truth class (only classes present)."""
    logits = np.asarray(logits_batch, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.size == 0:
        raise ValueError("empty batch")
    top1 = _ranked_classes(logits)[:, 0]
    out = {}
    for cls in np.unique(labels):
        mask = labels == cls
        out[int(cls)] = float((top1[mask] == cls).mean())
    return out


def mca(logits_batch, labels) -> float:
    """Mean class accuracy: unweighted mean of per-class Top@1 over the
    classes present in the ground truth."""
    by_class = per_class_top1(logits_batch, labels)
    return float(np.mean(list(by_class.values())))


@dataclass
class MetricsReport:
    miou: float
    pixel_acc: float
    topk: dict[int, float]          # k in {1, 2, 5} when class count allows
    mca: float
    per_class_iou: list[float] = field(default_factory=list)
    per_class_top1: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"miou": self.miou, "pixel_acc": self.pixel_acc, "mca": self.mca}
        d.update({f"top{k}": v for k, v in sorted(self.topk.items())})
        d["per_class_iou"] = self.per_class_iou
        d["per_class_top1"] = {str(k): v for k, v in self.per_class_top1.items()}
        return d

    def to_text(self) -> str:
        lines = [f"miou: {self.miou:.6f}", f"pixel_acc: {self.pixel_acc:.6f}"]
        lines += [f"top{k}: {v:.6f}" for k, v in sorted(self.topk.items())]
        lines.append(f"mca: {self.mca:.6f}")
        return "\n".join(lines) + "\n"


def build_report(confusion: np.ndarray, scene_logits, scene_labels,
                 ks: tuple[int, ...] = (1, 2, 5)) -> MetricsReport:
    logits = np.asarray(scene_logits, dtype=np.float64)
    usable_ks = [k for k in ks if k <= logits.shape[1]]
    ious = per_class_iou(confusion)
    return MetricsReport(
        miou=miou(confusion),
        pixel_acc=pixel_accuracy(confusion),
        topk={k: topk_accuracy(logits, scene_labels, k) for k in usable_ks},
        mca=mca(logits, scene_labels),
        per_class_iou=[float(v) for v in ious],
        per_class_top1=per_class_top1(logits, scene_labels),
    )
