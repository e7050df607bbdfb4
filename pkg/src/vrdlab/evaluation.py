"""Triplet matching, Recall@N, average precision, AP_role and HICO-style mAP.

AP uses all-point interpolation: the exact area under the precision envelope.
Matching is greedy in score order; each ground-truth triplet is credited at
most once per metric computation, and ties resolve by original index.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, iou, union_box
from .pipeline import TripletPrediction
from .proposals import Scene

AP_CONVENTION = "all-point"


class Task(str, Enum):
    RELATIONSHIP = "relationship"
    PHRASE = "phrase"


class MapMode(str, Enum):
    DEFAULT = "default"
    KNOWN_OBJECTS = "known_objects"


@dataclass(frozen=True)
class GTTriplet:
    subject_box: Box
    object_box: Box
    predicate: int
    subject_class: int = -1
    object_class: int = -1


@dataclass(frozen=True)
class EvalConfig:
    task: Task = Task.RELATIONSHIP
    n: int = 50
    predicate_top_k: int = 1
    mode: MapMode = MapMode.DEFAULT
    iou_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "mode", MapMode(self.mode))
        if self.n < 1:
            raise ValueError("N must be >= 1")
        if self.predicate_top_k < 1:
            raise ValueError("predicate top-k must be >= 1")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou threshold must lie in (0, 1]")

    def to_json(self) -> dict:
        return {"task": self.task.value, "n": self.n, "predicate_top_k": self.predicate_top_k,
                "mode": self.mode.value, "iou_threshold": self.iou_threshold}


@dataclass(frozen=True)
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def gt_triplets(scene: Scene) -> list[GTTriplet]:
    gt = scene.ground_truth
    return [GTTriplet(gt.boxes[r.subject], gt.boxes[r.object], r.predicate,
                      gt.classes[r.subject], gt.classes[r.object]) for r in gt.relationships]


def _overlap(pred, gt: GTTriplet, task: Task) -> float:
    """Match quality; the pair matches when this reaches the IoU threshold."""
    if task is Task.PHRASE:
        return iou(union_box(pred.subject_box, pred.object_box), union_box(gt.subject_box, gt.object_box))
    return min(iou(pred.subject_box, gt.subject_box), iou(pred.object_box, gt.object_box))


def match_triplet(pred: TripletPrediction, gt: GTTriplet, task: Task = Task.RELATIONSHIP,
                  iou_threshold: float = 0.5) -> bool:
    task = Task(task)
    return pred.predicate == gt.predicate and _overlap(pred, gt, task) >= iou_threshold


def _claim(p, gts: Sequence[GTTriplet], used: np.ndarray, task: Task, thr: float) -> bool:
    """Mark the best-overlapping unclaimed GT matched by ``p``; lowest index wins ties."""
    best, best_j = -1.0, -1
    for j, g in enumerate(gts):
        if used[j] or g.predicate != p.predicate:
            continue
        q = _overlap(p, g, task)
        if q >= thr and q > best:
            best, best_j = q, j
    if best_j < 0:
        return False
    used[best_j] = True
    return True


def _score_order(preds: Sequence) -> list:
    return [preds[i] for i in sorted(range(len(preds)), key=lambda i: -preds[i].score)]


def filter_predicate_top_k(preds: Sequence[TripletPrediction], k: int) -> list[TripletPrediction]:
    """Keep the ``k`` highest-scored predicates of each (image, subject, object) pair."""
    if k < 1:
        raise ValueError("k must be >= 1")
    seen: dict[tuple, int] = defaultdict(int)
    out = []
    for p in _score_order(preds):
        key = (p.image_id, p.subject_index, p.object_index,
               p.subject_box.as_tuple(), p.object_box.as_tuple())
        if seen[key] < k:
            seen[key] += 1
            out.append(p)
    return out


def recall_at_n(preds_per_image: Mapping[str, Sequence[TripletPrediction]],
                gts_per_image: Mapping[str, Sequence[GTTriplet]], n: int,
                task: Task = Task.RELATIONSHIP, iou_threshold: float = 0.5) -> float:
    """Matched GT triplets over all GT triplets, using the top ``n`` predictions per image."""
    if n < 1:
        raise ValueError("N must be >= 1")
    task = Task(task)
    total = sum(len(g) for g in gts_per_image.values())
    if total == 0:
        return 0.0
    matched = 0
    for image_id, gts in gts_per_image.items():
        top = _score_order(list(preds_per_image.get(image_id, ())))[:n]
        used = np.zeros(len(gts), dtype=bool)
        matched += sum(_claim(p, gts, used, task, iou_threshold) for p in top)
    return matched / total


def pr_curve(preds: Iterable[TripletPrediction], gts_per_image: Mapping[str, Sequence[GTTriplet]],
             task: Task = Task.RELATIONSHIP, iou_threshold: float = 0.5) -> PRCurve:
    task = Task(task)
    ordered = _score_order(list(preds))
    npos = sum(len(g) for g in gts_per_image.values())
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts_per_image.items()}
    tp = np.zeros(len(ordered))
    for i, p in enumerate(ordered):
        if p.image_id in used:
            tp[i] = _claim(p, gts_per_image[p.image_id], used[p.image_id], task, iou_threshold)
    if npos == 0 or len(ordered) == 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0)
    ctp = np.cumsum(tp)
    recall = ctp / npos
    precision = ctp / np.arange(1, len(ordered) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))
    return PRCurve(precision, recall, ap)


def average_precision(preds: Iterable[TripletPrediction], gts_per_image: Mapping[str, Sequence[GTTriplet]],
                      task: Task = Task.RELATIONSHIP, iou_threshold: float = 0.5) -> float:
    return pr_curve(preds, gts_per_image, task, iou_threshold).ap


@dataclass(frozen=True)
class MeanAP:
    per_class: dict
    mean: float
    excluded: tuple = ()


def _group_mean(keys, ap_of: Callable) -> tuple[dict, float]:
    per = {k: ap_of(k) for k in sorted(keys)}
    return per, (float(np.mean(list(per.values()))) if per else 0.0)


def ap_role(preds: Sequence[TripletPrediction], gts_per_image: Mapping[str, Sequence[GTTriplet]],
            iou_threshold: float = 0.5) -> MeanAP:
    """Per-verb AP averaged over verbs that occur in the ground truth.

    Verbs that only occur in predictions are listed in ``excluded``.
    """
    gt_verbs = {g.predicate for gts in gts_per_image.values() for g in gts}
    pred_verbs = {p.predicate for p in preds}

    def ap_of(v):
        return average_precision([p for p in preds if p.predicate == v],
                                 {k: [g for g in gts if g.predicate == v] for k, gts in gts_per_image.items()},
                                 Task.RELATIONSHIP, iou_threshold)

    per, mean = _group_mean(gt_verbs, ap_of)
    return MeanAP(per, mean, tuple(sorted(pred_verbs - gt_verbs)))


def hico_map(preds: Sequence[TripletPrediction], gts_per_image: Mapping[str, Sequence[GTTriplet]],
             mode: MapMode = MapMode.DEFAULT, iou_threshold: float = 0.5) -> MeanAP:
    """AP per (verb, object category) pair present in the ground truth.

    DEFAULT scores each pair over every image. KNOWN_OBJECTS only keeps images
    whose annotation contains an object of the pair's category, so detections
    of that category in other images no longer count as false positives.
    """
    mode = MapMode(mode)
    pairs = {(g.predicate, g.object_class) for gts in gts_per_image.values() for g in gts}
    categories_in = {k: {g.object_class for g in gts} for k, gts in gts_per_image.items()}

    def ap_of(pair):
        v, c = pair
        images = [k for k in gts_per_image
                  if mode is MapMode.DEFAULT or c in categories_in[k]]
        allowed = set(images)
        cand = [p for p in preds if p.predicate == v and p.object_class == c
                and (mode is MapMode.DEFAULT or p.image_id in allowed)]
        gts = {k: [g for g in gts_per_image[k] if g.predicate == v and g.object_class == c] for k in images}
        return average_precision(cand, gts, Task.RELATIONSHIP, iou_threshold)

    per, mean = _group_mean(pairs, ap_of)
    return MeanAP(per, mean)


def group_by_image(preds: Iterable[TripletPrediction]) -> dict[str, list[TripletPrediction]]:
    out: dict[str, list[TripletPrediction]] = defaultdict(list)
    for p in preds:
        out[p.image_id].append(p)
    return dict(out)


def metrics_report(metric: str, config: EvalConfig | dict, value, **extra) -> dict:
    cfg = config.to_json() if isinstance(config, EvalConfig) else dict(config)
    return {"metric": metric, "config": cfg, "value": value, "convention": AP_CONVENTION, **extra}
