"""Evaluation: pixel accuracy, mean IoU, and panoptic quality with SQ/RQ.

Both accumulators are mergeable, so images can be scored in parallel and
the partial results combined deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .grids import PANOPTIC_DIVISOR, ClassCatalog, PanopticMap, SemanticMap

_VOID_KEY = -1
_MATCH_IOU = 0.5


class ConfusionMatrix:
    """(gt class, predicted class) pixel counts; void ground truth is excluded.

    Predicted-void pixels under a labeled ground-truth pixel cannot occupy a
    class column; they are tracked in a separate per-class column so they
    still count against accuracy and as false negatives in the IoU.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValidationError("need at least one class")
        self.num_classes = num_classes
        # Column num_classes holds predicted-void counts per gt class.
        self._table = np.zeros((num_classes, num_classes + 1), dtype=np.int64)

    @property
    def counts(self) -> np.ndarray:
        """The c x c (gt, pred) block."""
        return self._table[:, : self.num_classes]

    def accumulate(self, pred: SemanticMap, gt: SemanticMap, void_id: int = 255) -> "ConfusionMatrix":
        pred_ids = pred.ids if isinstance(pred, SemanticMap) else np.asarray(pred)
        gt_ids = gt.ids if isinstance(gt, SemanticMap) else np.asarray(gt)
        if pred_ids.shape != gt_ids.shape:
            raise ValidationError("prediction and ground truth disagree on shape")
        keep = gt_ids.reshape(-1) != void_id
        g = gt_ids.reshape(-1)[keep].astype(np.int64)
        p = pred_ids.reshape(-1)[keep].astype(np.int64)
        if g.size and g.max() >= self.num_classes:
            raise ValidationError("ground truth contains ids outside the catalog")
        if p.size:
            bad = (p >= self.num_classes) & (p != void_id)
            if bad.any():
                raise ValidationError("prediction contains ids outside the catalog")
        p = np.where(p == void_id, self.num_classes, p)
        width = self.num_classes + 1
        flat = np.bincount(g * width + p, minlength=self.num_classes * width)
        self._table += flat.reshape(self.num_classes, width)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValidationError("cannot merge confusion matrices of different sizes")
        self._table += other._table
        return self

    def accuracy(self) -> float:
        total = int(self._table.sum())
        if total == 0:
            raise ValidationError("no labeled pixels accumulated")
        return float(np.trace(self.counts)) / total

    def iou_per_class(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - np.diag(self.counts)
        fn = self._table.sum(axis=1) - np.diag(self.counts)
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def mean_iou(self) -> float:
        present = (self._table.sum(axis=1) > 0) | (self.counts.sum(axis=0) > 0)
        if not present.any():
            raise ValidationError("no classes present in GT or prediction")
        return float(np.nanmean(self.iou_per_class()[present]))


def accumulate(cm: ConfusionMatrix, pred, gt, void_id: int = 255) -> ConfusionMatrix:
    return cm.accumulate(pred, gt, void_id)


def acc(cm: ConfusionMatrix) -> float:
    return cm.accuracy()


def miou(cm: ConfusionMatrix) -> float:
    return cm.mean_iou()


# ---------------------------------------------------------------------------
# Panoptic quality
# ---------------------------------------------------------------------------


@dataclass
class PqClassStats:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    matched_ious: list[float]


@dataclass
class PqReport:
    per_class: dict[int, PqClassStats]
    pq: float
    sq: float
    rq: float

    def csv_rows(self, catalog: ClassCatalog) -> list[str]:
        """Rows in the documented column order: class, PQ, SQ, RQ, TP, FP, FN."""
        rows = ["class,pq,sq,rq,tp,fp,fn"]
        for cid in sorted(self.per_class):
            s = self.per_class[cid]
            rows.append(f"{catalog.name(cid)},{s.pq!r},{s.sq!r},{s.rq!r},{s.tp},{s.fp},{s.fn}")
        rows.append(f"all,{self.pq!r},{self.sq!r},{self.rq!r},,,")
        return rows


def _segments(pan: PanopticMap, catalog: ClassCatalog) -> np.ndarray:
    """Per-pixel segment keys: class * divisor + instance for things, class
    for stuff (instance forced to 0), -1 for void."""
    sem, inst = pan.split()
    keys = sem.ids.astype(np.int64) * PANOPTIC_DIVISOR + inst.ids.astype(np.int64)
    thing_lookup = np.zeros(65536, dtype=bool)
    for cid in catalog.thing_ids():
        thing_lookup[cid] = True
    stuff = ~thing_lookup[sem.ids]
    keys[stuff] = sem.ids[stuff].astype(np.int64) * PANOPTIC_DIVISOR
    keys[sem.ids == catalog.void_id] = _VOID_KEY
    return keys.reshape(-1)


class PqAccumulator:
    """Accumulates PQ statistics over image pairs; mergeable."""

    def __init__(self, catalog: ClassCatalog):
        self.catalog = catalog
        n = catalog.num_classes
        self.tp = np.zeros(n, dtype=np.int64)
        self.fp = np.zeros(n, dtype=np.int64)
        self.fn = np.zeros(n, dtype=np.int64)
        self.iou_sum = np.zeros(n, dtype=np.float64)
        self.matched: dict[int, list[float]] = {c: [] for c in range(n)}

    def accumulate(self, pred: PanopticMap, gt: PanopticMap) -> "PqAccumulator":
        if pred.entries.shape != gt.entries.shape:
            raise ValidationError("prediction and ground truth disagree on shape")
        pred_keys = _segments(pred, self.catalog)
        gt_keys = _segments(gt, self.catalog)

        gt_areas = _key_areas(gt_keys)
        pred_areas = _key_areas(pred_keys)
        gt_areas.pop(_VOID_KEY, None)

        offset = 2 ** 32
        inter_ids, inter_counts = np.unique(
            (gt_keys + 1) * offset + (pred_keys + 1), return_counts=True
        )
        intersections: dict[tuple[int, int], int] = {}
        for combo, count in zip(inter_ids, inter_counts):
            gkey = int(combo // offset) - 1
            pkey = int(combo % offset) - 1
            intersections[(gkey, pkey)] = int(count)

        matched_gt: set[int] = set()
        matched_pred: set[int] = set()
        for (gkey, pkey), inter in sorted(intersections.items()):
            if gkey == _VOID_KEY or pkey == _VOID_KEY:
                continue
            if gkey // PANOPTIC_DIVISOR != pkey // PANOPTIC_DIVISOR:
                continue
            # Per the cited matching rule, a prediction's overlap with gt
            # void does not count against its union.
            union = gt_areas[gkey] + pred_areas[pkey] - inter - _void_part(intersections, pkey)
            iou = inter / union
            if iou > _MATCH_IOU:
                cls = gkey // PANOPTIC_DIVISOR
                self.tp[cls] += 1
                self.iou_sum[cls] += iou
                self.matched[cls].append(float(iou))
                matched_gt.add(gkey)
                matched_pred.add(pkey)

        for gkey in gt_areas:
            if gkey not in matched_gt:
                self.fn[gkey // PANOPTIC_DIVISOR] += 1
        for pkey, area in pred_areas.items():
            if pkey == _VOID_KEY or pkey in matched_pred:
                continue
            if _void_part(intersections, pkey) / area > 0.5:
                continue
            self.fp[pkey // PANOPTIC_DIVISOR] += 1
        return self

    def merge(self, other: "PqAccumulator") -> "PqAccumulator":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum
        for c, lst in other.matched.items():
            self.matched[c].extend(lst)
        return self

    def report(self) -> PqReport:
        per_class = {}
        for c in range(self.catalog.num_classes):
            tp, fp, fn = int(self.tp[c]), int(self.fp[c]), int(self.fn[c])
            if tp + fp + fn == 0:
                continue
            denom = tp + 0.5 * fp + 0.5 * fn
            pq = self.iou_sum[c] / denom
            sq = self.iou_sum[c] / tp if tp else 0.0
            rq = tp / denom
            per_class[c] = PqClassStats(pq, sq, rq, tp, fp, fn, list(self.matched[c]))
        if per_class:
            mean = lambda vals: float(np.mean(vals))
            agg_pq = mean([s.pq for s in per_class.values()])
            agg_sq = mean([s.sq for s in per_class.values()])
            agg_rq = mean([s.rq for s in per_class.values()])
        else:
            agg_pq = agg_sq = agg_rq = 0.0
        return PqReport(per_class, agg_pq, agg_sq, agg_rq)


def _key_areas(keys: np.ndarray) -> dict[int, int]:
    ids, counts = np.unique(keys, return_counts=True)
    return {int(k): int(c) for k, c in zip(ids, counts)}


def _void_part(intersections: dict[tuple[int, int], int], pkey: int) -> int:
    return intersections.get((_VOID_KEY, pkey), 0)


def panoptic_quality(pred: PanopticMap, gt: PanopticMap, catalog: ClassCatalog) -> PqReport:
    """PQ/SQ/RQ for one image pair."""
    return PqAccumulator(catalog).accumulate(pred, gt).report()
