"""GREC box metrics and GRES mask metrics.

Pr@(F1=1, IoU>=0.5): a sample passes when its predicted box set matches the
ground truth one-to-one at IoU >= 0.5 with no misses and no extras. Matching
is greedy by descending IoU with index tie-breaking. A no-target sample passes
only with an empty prediction.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import pairwise_iou, rasterize_union, to_xyxy


class DataError(ValueError):
    """Predictions and dataset do not line up."""


def greedy_match(pred_boxes, gt_boxes, iou_thresh: float = 0.5) -> list[tuple[int, int, float]]:
    """One-to-one ``(pred, gt, iou)`` pairs taken in order of decreasing IoU."""
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(pred) == 0 or len(gt) == 0:
        return []
    ious = pairwise_iou(to_xyxy(pred), to_xyxy(gt))
    cand = [(-ious[p, g], p, g) for p in range(len(pred)) for g in range(len(gt)) if ious[p, g] >= iou_thresh]
    cand.sort()
    used_p, used_g, pairs = set(), set(), []
    for neg, p, g in cand:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, -neg))
    return pairs


def sample_f1(pred_boxes, gt_boxes, iou_thresh: float = 0.5) -> tuple[float, bool]:
    """F1 of one prediction set and whether it is perfect."""
    n_pred = len(np.asarray(pred_boxes).reshape(-1, 4))
    n_gt = len(np.asarray(gt_boxes).reshape(-1, 4))
    if n_gt == 0:
        return (1.0, True) if n_pred == 0 else (0.0, False)
    if n_pred == 0:
        return 0.0, False
    tp = len(greedy_match(pred_boxes, gt_boxes, iou_thresh))
    fp, fn = n_pred - tp, n_gt - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    return f1, tp == n_pred == n_gt


@dataclass
class MetricReport:
    n_samples: int = 0
    precision_f1: float | None = None
    n_acc: float | None = None
    t_acc: float | None = None
    ciou: float | None = None
    giou_metric: float | None = None
    count_acc: float | None = None
    per_kind: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_text(self) -> str:
        lines = [f"samples: {self.n_samples}"]
        for name in ("precision_f1", "n_acc", "t_acc", "ciou", "giou_metric", "count_acc"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name}: {value:.4f}")
        for kind, stats in sorted(self.per_kind.items()):
            body = ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(stats.items()))
            lines.append(f"  [{kind}] {body}")
        return "\n".join(lines)


def _fraction(hits: int, total: int) -> float | None:
    return hits / total if total else None


def _by_id(predictions) -> dict:
    out = {}
    for p in predictions:
        pid = p["id"] if isinstance(p, Mapping) else p.id
        out[pid] = p
    return out


def _boxes_of(p) -> np.ndarray:
    boxes = p["boxes"] if isinstance(p, Mapping) else p.boxes
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def _aligned(predictions, dataset):
    preds = _by_id(predictions)
    ids = [inst.id for inst in dataset]
    if not ids:
        raise DataError("dataset is empty")
    missing = [i for i in ids if i not in preds]
    extra = set(preds) - set(ids)
    if missing or extra:
        raise DataError(f"prediction ids do not match dataset: {len(missing)} missing, {len(extra)} unknown")
    return [(inst, preds[inst.id]) for inst in dataset]


def grec_report(predictions: Sequence, dataset: Sequence, iou_thresh: float = 0.5) -> MetricReport:
    """Pr@(F1=1, IoU>=0.5), N-acc. and T-acc. over box predictions."""
    pairs = _aligned(predictions, dataset)
    passed = 0
    no_target = no_target_ok = target = target_nonempty = 0
    kinds: dict[str, list[bool]] = defaultdict(list)
    for inst, p in pairs:
        boxes = _boxes_of(p)
        _, ok = sample_f1(boxes, inst.gt_boxes, iou_thresh)
        passed += ok
        kinds[inst.expression.kind].append(ok)
        if len(inst.expression.target_indices) == 0:
            no_target += 1
            no_target_ok += len(boxes) == 0
        else:
            target += 1
            target_nonempty += len(boxes) > 0
    return MetricReport(
        n_samples=len(pairs),
        precision_f1=passed / len(pairs),
        n_acc=_fraction(no_target_ok, no_target),
        t_acc=_fraction(target_nonempty, target),
        per_kind={k: {"n": len(v), "precision_f1": float(np.mean(v))} for k, v in kinds.items()},
    )


def gres_report(pred_masks: Mapping[str, np.ndarray] | Sequence, dataset: Sequence,
                mask_size: int = 32) -> MetricReport:
    """cIoU, gIoU, N-acc. and T-acc. over binary masks.

    ``pred_masks`` maps instance id to a boolean mask (or is a sequence of
    predictions carrying ``mask``). Ground truth is the union of the target
    boxes rasterized at ``mask_size``.
    """
    if not isinstance(pred_masks, Mapping):
        pred_masks = {p.id: p.mask for p in pred_masks}
    ids = [inst.id for inst in dataset]
    if not ids:
        raise DataError("dataset is empty")
    if set(ids) != set(pred_masks):
        raise DataError("mask ids do not match dataset")
    inter_sum = union_sum = 0
    per_sample = []
    no_target = no_target_ok = target = target_nonempty = 0
    for inst in dataset:
        pred = np.asarray(pred_masks[inst.id], dtype=bool)
        gt = rasterize_union(inst.gt_boxes, mask_size)
        if pred.shape != gt.shape:
            raise DataError(f"mask shape {pred.shape} != {gt.shape} for {inst.id}")
        empty_pred = not pred.any()
        if len(inst.expression.target_indices) == 0:
            no_target += 1
            no_target_ok += empty_pred
            per_sample.append(1.0 if empty_pred else 0.0)
            continue
        target += 1
        target_nonempty += not empty_pred
        inter = int((pred & gt).sum())
        union = int((pred | gt).sum())
        inter_sum += inter
        union_sum += union
        per_sample.append(inter / union if union else 0.0)
    return MetricReport(
        n_samples=len(ids),
        ciou=inter_sum / union_sum if union_sum else None,
        giou_metric=float(np.mean(per_sample)),
        n_acc=_fraction(no_target_ok, no_target),
        t_acc=_fraction(target_nonempty, target),
    )
