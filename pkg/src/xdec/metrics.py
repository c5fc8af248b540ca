"""Evaluation metrics: PQ/SQ/RQ, mIoU, AP50, retrieval recall, caption
accuracy, cumulative IoU. Pure numpy, no model dependencies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class PQResult:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int


def _segment_masks(seg_map: np.ndarray, segments) -> dict[int, np.ndarray]:
    ids = [sid for sid, _ in segments]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate segment ids")
    present = set(np.unique(seg_map).tolist()) - {0}
    if not present <= set(ids):
        raise InputError(f"map ids {sorted(present - set(ids))} missing from segment list")
    return {sid: seg_map == sid for sid, _ in segments}


def panoptic_quality(pred_map, pred_segments, gt_map, gt_segments) -> PQResult:
    """Standard panoptic quality. Segments are (id, category) lists; id 0 in
    a map means void. Matches are same-category pairs with IoU > 0.5, which
    makes the matching provably unique."""
    pred_map = np.asarray(pred_map)
    gt_map = np.asarray(gt_map)
    if pred_map.shape != gt_map.shape:
        raise InputError(f"resolution mismatch: {pred_map.shape} vs {gt_map.shape}")
    pred_cat = dict(pred_segments)
    gt_cat = dict(gt_segments)
    pred_masks = _segment_masks(pred_map, pred_segments)
    gt_masks = _segment_masks(gt_map, gt_segments)
    # drop segments with no pixels on the gt side only if annotated empty
    tp_ious = []
    matched_pred, matched_gt = set(), set()
    for pid, pmask in pred_masks.items():
        for gid, gmask in gt_masks.items():
            if gid in matched_gt or pred_cat[pid] != gt_cat[gid]:
                continue
            inter = int(np.count_nonzero(pmask & gmask))
            if inter == 0:
                continue
            union = int(np.count_nonzero(pmask | gmask))
            iou = inter / union
            if iou > 0.5:
                tp_ious.append(iou)
                matched_pred.add(pid)
                matched_gt.add(gid)
                break
    tp = len(tp_ious)
    fp = len(pred_masks) - tp
    fn = len(gt_masks) - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return PQResult(pq=1.0, sq=1.0, rq=1.0, tp=0, fp=0, fn=0)
    sq = float(np.mean(tp_ious)) if tp else 0.0
    rq = tp / denom
    return PQResult(pq=float(sum(tp_ious) / denom), sq=sq, rq=float(rq), tp=tp, fp=fp, fn=fn)


def mean_iou(pred_map, gt_map, categories) -> float:
    """Mean per-category IoU over the given categories, skipping those
    absent from both maps. Vacuously 1.0 if nothing is present."""
    pred_map = np.asarray(pred_map)
    gt_map = np.asarray(gt_map)
    if pred_map.shape != gt_map.shape:
        raise InputError(f"resolution mismatch: {pred_map.shape} vs {gt_map.shape}")
    ious = []
    for cat in categories:
        p = pred_map == cat
        g = gt_map == cat
        union = int(np.count_nonzero(p | g))
        if union == 0:
            continue
        ious.append(int(np.count_nonzero(p & g)) / union)
    return float(np.mean(ious)) if ious else 1.0


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def mask_ap(preds, gts, iou_threshold: float = 0.5) -> float:
    """Average precision at one IoU threshold with all-point interpolation.

    preds: list of (mask, category, score); gts: list of (mask, category).
    Predictions are matched greedily in score order (ties by input order) to
    the unmatched same-category gt with the highest IoU >= threshold.
    """
    num_gt = len(gts)
    preds = list(preds)
    for _, _, score in preds:
        if not np.isfinite(score):
            raise InputError("prediction scores must be finite")
    if num_gt == 0:
        return 1.0 if not preds else 0.0
    if not preds:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
    gt_taken = [False] * num_gt
    hits = []
    for i in order:
        mask, cat, _ = preds[i]
        best_iou, best_j = 0.0, -1
        for j, (gmask, gcat) in enumerate(gts):
            if gt_taken[j] or gcat != cat:
                continue
            iou = _mask_iou(np.asarray(mask), np.asarray(gmask))
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            gt_taken[best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    tp_cum = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / num_gt
    # precision envelope, then area under the recall steps
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(hits)):
        if hits[k]:
            ap += (recall[k] - prev_recall) * float(precision[k:].max())
            prev_recall = recall[k]
    return float(ap)


def recall_at_k(affinity, k: int) -> tuple[float, float]:
    """(IR@k, TR@k) with the true match on the diagonal; ties rank the lower
    index first."""
    affinity = np.asarray(affinity, dtype=np.float64)
    if affinity.ndim != 2 or affinity.shape[0] != affinity.shape[1]:
        raise InputError(
            f"diagonal pairing needs a square affinity, got {affinity.shape}"
        )
    if k < 1:
        raise InputError("k must be >= 1")
    n = affinity.shape[0]
    ir_hits = 0
    tr_hits = 0
    for t in range(n):
        order = np.lexsort((np.arange(n), -affinity[:, t]))
        if t in order[:k]:
            ir_hits += 1
    for i in range(n):
        order = np.lexsort((np.arange(n), -affinity[i, :]))
        if i in order[:k]:
            tr_hits += 1
    return ir_hits / n, tr_hits / n


def caption_metrics(pred: str, refs) -> tuple[float, float]:
    """(exact_match, token_accuracy) against the best of the references."""
    refs = list(refs)
    if not refs:
        raise InputError("need at least one reference caption")
    exact = 1.0 if pred in refs else 0.0
    pred_tokens = pred.split()
    best = 0.0
    for ref in refs:
        ref_tokens = ref.split()
        width = max(len(pred_tokens), len(ref_tokens))
        if width == 0:
            best = 1.0
            continue
        matched = sum(
            1 for a, b in zip(pred_tokens, ref_tokens) if a == b
        )
        best = max(best, matched / width)
    return exact, best


def cumulative_iou(pairs) -> float:
    """Dataset-level sum of intersections over sum of unions."""
    inter_total = 0
    union_total = 0
    for pred, gt in pairs:
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        inter_total += int(np.count_nonzero(pred & gt))
        union_total += int(np.count_nonzero(pred | gt))
    if union_total == 0:
        if inter_total != 0:
            raise InputError("zero union with nonzero intersection")
        return 1.0
    return inter_total / union_total


REPORT_FIELDS = (
    "pq",
    "sq",
    "rq",
    "miou",
    "map50",
    "ir_at_1",
    "tr_at_1",
    "caption_exact",
    "caption_token_acc",
    "ciou",
)


@dataclass
class MetricReport:
    """Scalar metrics in [0, 1] plus evaluated-sample counts. Fields left as
    None were not evaluated and are omitted from serialization."""

    pq: float | None = None
    sq: float | None = None
    rq: float | None = None
    miou: float | None = None
    map50: float | None = None
    ir_at_1: float | None = None
    tr_at_1: float | None = None
    caption_exact: float | None = None
    caption_token_acc: float | None = None
    ciou: float | None = None
    counts: dict | None = None

    def validate(self) -> None:
        for name in REPORT_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            if not (0.0 <= value <= 1.0):
                raise InputError(f"metric {name}={value} outside [0, 1]")
            if self.counts is not None and not any(v > 0 for v in self.counts.values()):
                raise InputError("reported metrics require a positive sample count")

    def to_dict(self) -> dict:
        out = {}
        for name in REPORT_FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        out["counts"] = dict(self.counts or {})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
