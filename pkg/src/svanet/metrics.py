"""Pixel metrics, ROC/AUC and object-size stratified evaluation.

Dice, IoU, sensitivity and F2 are macro averages over foreground classes
that have ground-truth pixels in the scored region. MAE compares the class
probability against the class indicator. A class with an undefined
denominator is left out of that metric's average and listed in ``excluded``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ConfigurationError
from .data.area import BUCKETS, EIGHT_CONNECTED, ObjectRecord, SizeBucket

METRICS = ("mdice", "miou", "mae", "sensitivity", "f2", "auc")
_trapezoid = getattr(np, "trapezoid", None) or np.trapz
RESTRICTION_NOTE = ("bucket rows score, per image and class, the in-bucket ground-truth components plus every "
                    "pixel predicted as that class, minus same-class components outside the bucket")
MAE_NOTE = ("mae is |p_c - [gt == c]| averaged over scored pixels for each foreground class with ground truth, "
            "then over those classes; background is not a term")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = lambda: np.zeros(num_classes, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"confusion: pred shape {pred.shape} != gt shape {gt.shape}")
    joint = np.bincount(gt.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64),
                        minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(joint).copy()
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), one point per distinct score, tied scores moving together."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1] if s.size else np.array([], dtype=np.int64)
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    p, n = labels.sum(), (~labels).sum()
    tpr = np.r_[0.0, tps / p] if p else np.r_[0.0, np.zeros_like(tps, dtype=np.float64)]
    fpr = np.r_[0.0, fps / n] if n else np.r_[0.0, np.zeros_like(fps, dtype=np.float64)]
    return fpr, tpr, np.r_[np.inf, s[last]] if s.size else np.array([np.inf])


def auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Trapezoidal area under the ROC curve; None without both label values."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        return None
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(_trapezoid(tpr, fpr))


@dataclass
class ClassScores:
    """Per-class probability scores and indicator labels over the scored pixels."""

    scores: list[np.ndarray] = field(default_factory=list)
    labels: list[np.ndarray] = field(default_factory=list)

    def add(self, s: np.ndarray, y: np.ndarray) -> None:
        self.scores.append(np.asarray(s, dtype=np.float64).ravel())
        self.labels.append(np.asarray(y, dtype=bool).ravel())

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.scores:
            return np.zeros(0), np.zeros(0, dtype=bool)
        return np.concatenate(self.scores), np.concatenate(self.labels)


@dataclass
class MetricResult:
    values: dict[str, float | None]
    per_class: dict[int, dict[str, float | None]]
    excluded: dict[str, list[int]]

    def __getitem__(self, key: str) -> float | None:
        return self.values[key]


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def metric_suite(counts: ConfusionCounts, class_scores: dict[int, ClassScores]) -> MetricResult:
    """Macro metrics from confusion counts and per-class score/label pixels."""
    k = len(counts.tp)
    per_class: dict[int, dict[str, float | None]] = {}
    excluded: dict[str, list[int]] = {m: [] for m in METRICS}
    for c in range(1, k):
        tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
        if tp + fn == 0:
            for m in METRICS:
                excluded[m].append(c)
            continue
        dice = _ratio(2 * tp, 2 * tp + fp + fn)
        iou = _ratio(tp, tp + fp + fn)
        sens = _ratio(tp, tp + fn)
        prec = _ratio(tp, tp + fp)
        if tp == 0:
            f2 = 0.0
        else:
            f2 = 5 * prec * sens / (4 * prec + sens)
        s, y = class_scores.get(c, ClassScores()).arrays()
        mae = float(np.abs(s - y).mean()) if s.size else None
        a = auc(s, y) if s.size else None
        row = {"mdice": dice, "miou": iou, "mae": mae, "sensitivity": sens, "f2": f2, "auc": a}
        for m, v in row.items():
            if v is None:
                excluded[m].append(c)
        per_class[c] = row
    values = {m: _mean(row[m] for row in per_class.values()) for m in METRICS}
    return MetricResult(values, per_class, excluded)


def evaluate(probs: np.ndarray, gt: np.ndarray, pred: np.ndarray | None = None) -> MetricResult:
    """Whole-image metrics for ``probs`` (N, K, H, W) against ``gt`` (N, H, W)."""
    probs, gt = np.asarray(probs), np.asarray(gt)
    if probs.ndim == 3:
        probs, gt = probs[None], gt[None]
    k = probs.shape[1]
    pred = probs.argmax(axis=1) if pred is None else np.asarray(pred).reshape(gt.shape)
    counts = confusion(pred, gt, k)
    scores = {}
    for c in range(1, k):
        cs = ClassScores()
        cs.add(probs[:, c], gt == c)
        scores[c] = cs
    return metric_suite(counts, scores)


# --------------------------------------------------------------------------
# stratified evaluation
# --------------------------------------------------------------------------

@dataclass
class BucketRow:
    bucket: str
    images: int
    objects: int
    metrics: dict[str, float | None] | None
    excluded: dict[str, list[int]] = field(default_factory=dict)


@dataclass
class StratifiedReport:
    rows: list[BucketRow]
    note: str = RESTRICTION_NOTE
    mae_note: str = MAE_NOTE

    def row(self, bucket: SizeBucket | str) -> BucketRow:
        name = bucket.value if isinstance(bucket, SizeBucket) else bucket
        return next(r for r in self.rows if r.bucket == name)

    def to_dict(self) -> dict:
        return {"note": self.note, "mae_note": self.mae_note,
                "rows": [{"bucket": r.bucket, "images": r.images, "objects": r.objects,
                          "metrics": r.metrics, "excluded": r.excluded} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self) -> str:
        head = f"{'bucket':<11}{'images':>7}{'objects':>8}" + "".join(f"{m:>12}" for m in METRICS)
        lines = [f"# {self.note}", head]
        for r in self.rows:
            cells = "".join(f"{'-':>12}" if r.metrics is None or r.metrics[m] is None else f"{r.metrics[m]:>12.4f}"
                            for m in METRICS)
            lines.append(f"{r.bucket:<11}{r.images:>7}{r.objects:>8}{cells}")
        return "\n".join(lines)


def _component_masks(gt: np.ndarray, c: int):
    labels, n = ndimage.label(gt == c, structure=EIGHT_CONNECTED)
    if not n:
        return labels, np.zeros(0, dtype=np.int64)
    return labels, np.bincount(labels.ravel(), minlength=n + 1)[1:]


def restricted_image(probs: np.ndarray, gt: np.ndarray, pred: np.ndarray, bucket: SizeBucket):
    """Per-class scored-pixel masks and in-bucket indicators for one image."""
    total = gt.size
    out = {}
    objects = 0
    for c in range(1, probs.shape[0]):
        labels, sizes = _component_masks(gt, c)
        if not sizes.size:
            continue
        inside = np.array([bucket.contains(s / total) for s in sizes])
        if not inside.any():
            continue
        objects += int(inside.sum())
        lut = np.r_[False, inside]
        in_b = lut[labels]
        out_b = (labels > 0) & ~in_b
        scored = (in_b | (pred == c)) & ~out_b
        out[c] = (scored, in_b)
    return out, objects


def stratified_eval(probs: np.ndarray, gt: np.ndarray, records: list[ObjectRecord] | None = None,
                    buckets=BUCKETS) -> StratifiedReport:
    """Metric rows per cumulative size bucket over a batch of images.

    ``records`` only checks consistency with ``gt``; components are relabelled
    here so that pixel membership is exact.
    """
    probs, gt = np.asarray(probs), np.asarray(gt)
    if probs.ndim == 3:
        probs, gt = probs[None], gt[None]
    n, k = probs.shape[:2]
    pred = probs.argmax(axis=1)
    if records is not None:
        expected = sum(1 for r in records if r.class_id > 0)
        found = sum(int(_component_masks(gt[i], c)[1].size) for i in range(n) for c in range(1, k))
        if expected != found:
            raise ConfigurationError(f"records list {expected} objects but ground truth has {found}")
    rows = []
    for bucket in buckets:
        counts = ConfusionCounts.zeros(k)
        scores = {c: ClassScores() for c in range(1, k)}
        images = objects = 0
        for i in range(n):
            restricted, m = restricted_image(probs[i], gt[i], pred[i], bucket)
            if not restricted:
                continue
            images += 1
            objects += m
            for c, (scored, label) in restricted.items():
                p = (pred[i] == c) & scored
                counts.tp[c] += int((p & label).sum())
                counts.fp[c] += int((p & ~label).sum())
                counts.fn[c] += int((~p & label).sum())
                counts.tn[c] += int((~p & ~label & scored).sum())
                scores[c].add(probs[i, c][scored], label[scored])
        if images == 0:
            rows.append(BucketRow(bucket.value, 0, 0, None))
            continue
        res = metric_suite(counts, scores)
        rows.append(BucketRow(bucket.value, images, objects, res.values, res.excluded))
    return StratifiedReport(rows)


def write_roc_csv(path, probs: np.ndarray, gt: np.ndarray, max_points: int = 2001) -> Path:
    """ROC points per foreground class as ``class,fpr,tpr,threshold`` rows."""
    probs, gt = np.asarray(probs), np.asarray(gt)
    if probs.ndim == 3:
        probs, gt = probs[None], gt[None]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "fpr", "tpr", "threshold"])
        for c in range(1, probs.shape[1]):
            labels = gt == c
            if labels.all() or not labels.any():
                continue
            fpr, tpr, thr = roc_curve(probs[:, c], labels)
            keep = np.unique(np.linspace(0, len(fpr) - 1, min(len(fpr), max_points)).round().astype(int))
            for j in keep:
                w.writerow([c, f"{fpr[j]:.6g}", f"{tpr[j]:.6g}", f"{thr[j]:.6g}"])
    return path
