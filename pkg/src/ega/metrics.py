"""Classification and localization scores: top-1, CorLoc, MaxBoxAccV2, PxAP.

Box criteria are decided with exact rational arithmetic on integer areas,
so results never depend on summation order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import CapabilityError, ContractError
from .localization import DEFAULT_TAU, TAU_GRID, BoundingBox

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
PXAP_THRESHOLDS = 256


@dataclass
class EvalRecord:
    """Everything needed to score one evaluated image.

    ``pred_box`` comes from the predicted class's CAM at the default
    threshold; ``boxes`` (one per threshold) and ``score_map`` come from
    the true class's CAM, for the class-agnostic metrics.
    """

    predicted: int
    true: int
    pred_box: BoundingBox
    boxes: Dict[float, BoundingBox]
    gt_box: BoundingBox
    score_map: Optional[np.ndarray] = None
    gt_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.score_map is not None and self.gt_mask is not None and self.score_map.shape != self.gt_mask.shape:
            raise ContractError(f"score map {self.score_map.shape} and mask {self.gt_mask.shape} differ in shape")

    def box_at(self, tau: float) -> BoundingBox:
        try:
            return self.boxes[tau]
        except KeyError:
            raise ContractError(f"record has no box for tau={tau}") from None


def intersection_union(a: BoundingBox, b: BoundingBox):
    iw = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    return inter, a.area + b.area - inter


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union = intersection_union(a, b)
    return inter / union


def iou_at_least(a: BoundingBox, b: BoundingBox, threshold: float) -> bool:
    inter, union = intersection_union(a, b)
    return Fraction(inter, union) >= Fraction(str(threshold))


def _check(records):
    if not records:
        raise ContractError("no records to score")


def top1_classification(records: Sequence[EvalRecord]) -> float:
    _check(records)
    return sum(r.predicted == r.true for r in records) / len(records)


def top1_localization(records: Sequence[EvalRecord], iou_threshold: float = 0.5) -> float:
    """Right class and predicted-class box overlapping the ground truth enough."""
    _check(records)
    hits = sum(r.predicted == r.true and iou_at_least(r.pred_box, r.gt_box, iou_threshold) for r in records)
    return hits / len(records)


def corloc(records: Sequence[EvalRecord], tau: float = DEFAULT_TAU, iou_threshold: float = 0.5) -> float:
    """Class-agnostic (ground-truth-known) localization accuracy."""
    _check(records)
    return sum(iou_at_least(r.box_at(tau), r.gt_box, iou_threshold) for r in records) / len(records)


def box_accuracy_table(records: Sequence[EvalRecord], iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
                       taus: Sequence[float] = TAU_GRID) -> np.ndarray:
    """Hit counts, shape (len(iou_thresholds), len(taus))."""
    _check(records)
    if not taus or not iou_thresholds:
        raise ContractError("empty threshold grid")
    table = np.zeros((len(iou_thresholds), len(taus)), dtype=np.int64)
    for r in records:
        for j, tau in enumerate(taus):
            inter, union = intersection_union(r.box_at(tau), r.gt_box)
            frac = Fraction(inter, union)
            for i, delta in enumerate(iou_thresholds):
                table[i, j] += frac >= Fraction(str(delta))
    return table


def max_box_acc_v2(records: Sequence[EvalRecord], iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
                   taus: Sequence[float] = TAU_GRID) -> float:
    """Mean over IoU thresholds of the best box accuracy over score thresholds."""
    table = box_accuracy_table(records, iou_thresholds, taus)
    best = table.max(axis=1)
    return float(Fraction(int(best.sum()), len(records) * len(iou_thresholds)))


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def pixel_pr_curve(records: Sequence[EvalRecord], num_thresholds: int = PXAP_THRESHOLDS) -> PRCurve:
    """Dataset-pooled pixel precision/recall at evenly spaced thresholds in [0, 1].

    A pixel is predicted foreground when its score is >= the threshold.
    AP sums (R_i - R_{i-1}) * P_i walking thresholds from high to low
    (recall non-decreasing), starting from R_0 = 0.
    """
    _check(records)
    if any(r.gt_mask is None or r.score_map is None for r in records):
        raise CapabilityError("PxAP needs a ground-truth mask and score map on every record")
    scores = np.concatenate([np.asarray(r.score_map, np.float64).ravel() for r in records])
    truth = np.concatenate([np.asarray(r.gt_mask, bool).ravel() for r in records])
    thresholds = np.linspace(0.0, 1.0, num_thresholds)
    pos_sorted = np.sort(scores[truth])
    neg_sorted = np.sort(scores[~truth])
    # counts of scores >= t
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg_sorted.size - np.searchsorted(neg_sorted, thresholds, side="left")
    n_pos = pos_sorted.size
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
    recall = tp / n_pos if n_pos else np.zeros_like(thresholds)
    order = np.argsort(-thresholds, kind="stable")
    r_sorted, p_sorted = recall[order], precision[order]
    prev = np.concatenate([[0.0], r_sorted[:-1]])
    ap = float(np.sum((r_sorted - prev) * p_sorted))
    return PRCurve(thresholds, precision, recall, ap)


def pxap(records: Sequence[EvalRecord], num_thresholds: int = PXAP_THRESHOLDS) -> float:
    return pixel_pr_curve(records, num_thresholds).ap


@dataclass
class MetricsReport:
    top1_cls_acc: float
    top1_loc_acc: float
    corloc: float
    maxboxaccv2: float
    pxap: Optional[float]
    num_samples: int
    tau: float = DEFAULT_TAU
    box_acc_per_iou: Dict[str, float] = field(default_factory=dict)
    box_acc_curve: List[List[float]] = field(default_factory=list)
    taus: List[float] = field(default_factory=list)
    iou_thresholds: List[float] = field(default_factory=list)
    pr_curve: Optional[Dict[str, List[float]]] = None

    SCORE_KEYS = ("top1_cls_acc", "top1_loc_acc", "corloc", "maxboxaccv2", "pxap")

    def errors(self) -> Dict[str, Optional[float]]:
        """Error-rate view: 100 * (1 - accuracy) per score."""
        out = {}
        for key in self.SCORE_KEYS:
            v = getattr(self, key)
            out[key.replace("_acc", "") + "_err"] = None if v is None else 100.0 * (1.0 - v)
        return out

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.SCORE_KEYS}
        d.update(
            num_samples=self.num_samples,
            tau=self.tau,
            box_acc_per_iou=self.box_acc_per_iou,
            box_acc_curve={"taus": self.taus, "iou_thresholds": self.iou_thresholds, "accuracy": self.box_acc_curve},
            errors=self.errors(),
        )
        if self.pr_curve is not None:
            d["pr_curve"] = self.pr_curve
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def curves_csv(self) -> str:
        """Box accuracy per (IoU threshold, tau) and the pixel PR curve as CSV rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["curve", "iou_threshold", "threshold", "value", "value2"])
        for i, delta in enumerate(self.iou_thresholds):
            for j, tau in enumerate(self.taus):
                w.writerow(["box_acc", delta, tau, repr(self.box_acc_curve[i][j]), ""])
        if self.pr_curve is not None:
            for t, p, r in zip(self.pr_curve["thresholds"], self.pr_curve["precision"], self.pr_curve["recall"]):
                w.writerow(["pixel_pr", "", repr(t), repr(p), repr(r)])
        return buf.getvalue()


def build_report(records: Sequence[EvalRecord], tau: float = DEFAULT_TAU, taus: Sequence[float] = TAU_GRID,
                 iou_thresholds: Sequence[float] = IOU_THRESHOLDS, with_pxap: bool = True) -> MetricsReport:
    _check(records)
    taus = list(taus)
    table = box_accuracy_table(records, iou_thresholds, taus)
    n = len(records)
    curve = (table / n).tolist()
    per_iou = {str(d): float(table[i].max() / n) for i, d in enumerate(iou_thresholds)}
    pr = None
    px = None
    if with_pxap:
        pc = pixel_pr_curve(records)
        px = pc.ap
        pr = {"thresholds": pc.thresholds.tolist(), "precision": pc.precision.tolist(), "recall": pc.recall.tolist()}
    return MetricsReport(
        top1_cls_acc=top1_classification(records),
        top1_loc_acc=top1_localization(records),
        corloc=corloc(records, tau),
        maxboxaccv2=float(Fraction(int(table.max(axis=1).sum()), n * len(iou_thresholds))),
        pxap=px,
        num_samples=n,
        tau=tau,
        box_acc_per_iou=per_iou,
        box_acc_curve=curve,
        taus=taus,
        iou_thresholds=list(iou_thresholds),
        pr_curve=pr,
    )
