"""Annotation files, dataset preprocessing rules and the synthetic scene generator.

Annotation file layout (``version`` 1)::

    {
      "version": 1,
      "mode": "general" | "hoi",
      "human_class_id": 0,            # required for hoi
      "num_classes": 10,              # optional metadata
      "num_predicates": 3,
      "images": [
        {"id": "000001",
         "gt_boxes": [[x1, y1, x2, y2, class_id], ...],
         "gt_relationships": [[subject_idx, object_idx, predicate_id], ...],
         "detections": [[x1, y1, x2, y2, class_id, score], ...]}
      ]
    }

In hoi files ``object_idx`` may be ``null`` for an invisible object; the
loader rewrites such triplets to ``(subject, subject, predicate)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, InvalidBoxError, boxes_to_array, iou, iou_matrix
from .proposals import (
    ClassDistribution,
    Detection,
    GroundTruth,
    Mode,
    Relationship,
    Scene,
    distribution,
)

SCHEMA_VERSION = 1


class AnnotationError(ValueError):
    """Malformed annotation content; the message names the offending record."""


# -- preprocessing rules --------------------------------------------------------

def vcoco_fill_invisible(triplets: Sequence[tuple]) -> list[tuple]:
    """Replace a missing object (``None``) by the subject: ``(s, None, p) -> (s, s, p)``.

    Works on index triplets or box triplets alike; other entries pass through.
    """
    return [(s, s if o is None else o, p) for s, o, p in triplets]


def merge_hico_boxes(boxes: Sequence[tuple[Box, int]], relationships: Sequence[tuple[int, int, int]],
                     threshold: float = 0.5):
    """Merge duplicate same-class boxes and remap relationship indices.

    Boxes of the same class with IoU >= ``threshold`` are linked and each
    connected component becomes one box at the component's coordinate mean.
    Because averaged boxes can end up overlapping each other, the merge is
    repeated until nothing changes; the result is a fixed point, so merging
    again is a no-op. Duplicate triplets created by the remap are dropped.

    Returns ``(merged_boxes, remap, relationships)`` where ``remap[i]`` is the
    new index of input box ``i``.
    """
    cur = list(boxes)
    remap = list(range(len(cur)))
    while True:
        merged, step = _merge_once(cur, threshold)
        remap = [step[r] for r in remap]
        if len(merged) == len(cur):
            cur = merged
            break
        cur = merged
    rels = list(dict.fromkeys((remap[s], remap[o], p) for s, o, p in relationships))
    return cur, remap, rels


def _merge_once(boxes, threshold):
    n = len(boxes)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if n:
        ious = iou_matrix(boxes_to_array(b for b, _ in boxes), boxes_to_array(b for b, _ in boxes))
        for i in range(n):
            for j in range(i + 1, n):
                if boxes[i][1] == boxes[j][1] and ious[i, j] >= threshold:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
    roots = sorted({find(i) for i in range(n)})
    new_index = {r: k for k, r in enumerate(roots)}
    merged = []
    for r in roots:
        members = [i for i in range(n) if find(i) == r]
        if len(members) == 1:
            merged.append(boxes[r])
        else:
            coords = boxes_to_array(boxes[i][0] for i in members).mean(axis=0)
            merged.append((Box.from_seq(coords), boxes[r][1]))
    return merged, [new_index[find(i)] for i in range(n)]


# -- annotation files -------------------------------------------------------------

def scene_to_record(scene: Scene) -> dict:
    gt = scene.ground_truth
    return {
        "id": scene.image_id,
        "gt_boxes": [[*b.as_tuple(), c] for b, c in zip(gt.boxes, gt.classes)],
        "gt_relationships": [[r.subject, r.object, r.predicate] for r in gt.relationships],
        "detections": [[*d.box.as_tuple(), d.class_id, d.score] for d in scene.detections],
    }


def scenes_to_json(scenes: Sequence[Scene], meta: Optional[dict] = None) -> dict:
    first = scenes[0] if scenes else None
    doc = {
        "version": SCHEMA_VERSION,
        "mode": first.mode.value if first else Mode.GENERAL.value,
        "human_class_id": first.human_class_id if first else None,
    }
    doc.update(meta or {})
    doc["images"] = [scene_to_record(s) for s in scenes]
    return doc


def save_annotations(path, scenes: Sequence[Scene], meta: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        json.dump(scenes_to_json(scenes, meta), fh, indent=1)
        fh.write("\n")


def _box(seq, where: str) -> Box:
    try:
        return Box.from_seq(seq)
    except (InvalidBoxError, TypeError, ValueError) as exc:
        raise AnnotationError(f"{where}: invalid box {seq!r} ({exc})") from None


def scenes_from_json(doc: dict) -> list[Scene]:
    if not isinstance(doc, dict) or doc.get("version") != SCHEMA_VERSION:
        raise AnnotationError(f"unsupported annotation version {doc.get('version') if isinstance(doc, dict) else doc!r}")
    try:
        mode = Mode(doc.get("mode", "general"))
    except ValueError:
        raise AnnotationError(f"unknown mode {doc.get('mode')!r}") from None
    human = doc.get("human_class_id")
    if mode is Mode.HOI and human is None:
        raise AnnotationError("hoi annotations need human_class_id")
    scenes = []
    for k, img in enumerate(doc.get("images", [])):
        where = f"images[{k}]"
        try:
            raw_boxes = img["gt_boxes"]
            raw_rels = img["gt_relationships"]
            raw_dets = img["detections"]
        except (KeyError, TypeError):
            raise AnnotationError(f"{where}: missing gt_boxes / gt_relationships / detections") from None
        boxes, classes = [], []
        for j, rec in enumerate(raw_boxes):
            if len(rec) != 5:
                raise AnnotationError(f"{where}.gt_boxes[{j}]: expected 5 fields, got {len(rec)}")
            boxes.append(_box(rec[:4], f"{where}.gt_boxes[{j}]"))
            classes.append(int(rec[4]))
        triplets = []
        for j, rec in enumerate(raw_rels):
            if len(rec) != 3:
                raise AnnotationError(f"{where}.gt_relationships[{j}]: expected 3 fields, got {len(rec)}")
            s, o, p = rec
            if o is None and mode is not Mode.HOI:
                raise AnnotationError(f"{where}.gt_relationships[{j}]: missing object outside hoi mode")
            triplets.append((s, o, p))
        triplets = vcoco_fill_invisible(triplets)
        rels = []
        for j, (s, o, p) in enumerate(triplets):
            if not all(isinstance(v, int) for v in (s, o, p)):
                raise AnnotationError(f"{where}.gt_relationships[{j}]: indices must be integers")
            if not (0 <= s < len(boxes) and 0 <= o < len(boxes)):
                raise AnnotationError(f"{where}.gt_relationships[{j}]: dangling box index in {[s, o, p]}")
            if p < 0:
                raise AnnotationError(f"{where}.gt_relationships[{j}]: negative predicate {p}")
            rels.append(Relationship(s, o, p))
        dets = []
        for j, rec in enumerate(raw_dets):
            if len(rec) != 6:
                raise AnnotationError(f"{where}.detections[{j}]: expected 6 fields, got {len(rec)}")
            box = _box(rec[:4], f"{where}.detections[{j}]")
            try:
                dets.append(Detection(box, int(rec[4]), float(rec[5])))
            except ValueError as exc:
                raise AnnotationError(f"{where}.detections[{j}]: {exc}") from None
        scenes.append(Scene(dets, GroundTruth(boxes, classes, rels), mode, human,
                            image_id=str(img.get("id", k))))
    return scenes


def load_annotations(path) -> list[Scene]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON (line {exc.lineno}: {exc.msg})") from None
    return scenes_from_json(doc)


def read_meta(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    return {k: v for k, v in doc.items() if k != "images"}


# -- synthetic scenes ---------------------------------------------------------------

TOP_K_PRESETS = (20, 30, 40, 50, 100)


@dataclass
class SyntheticConfig:
    """Knobs for the detector stand-in.

    ``jitter`` is the coordinate noise as a fraction of box size,
    ``drop_prob`` the chance a GT object gets no detection, and
    ``spurious_rate`` the fraction of the remaining detector budget
    (``max_detections`` minus true detections) filled with random boxes.
    """

    scenes: int = 100
    objects: tuple[int, int] = (14, 24)
    relationships: tuple[int, int] = (1, 3)
    num_classes: int = 10
    num_predicates: int = 3
    jitter: float = 0.05
    drop_prob: float = 0.05
    spurious_rate: float = 0.9
    max_detections: int = 130
    top_k: int = 100
    image_size: tuple[float, float] = (640.0, 480.0)
    mode: Mode = Mode.GENERAL
    human_class_id: int = 0
    seed: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.objects = tuple(self.objects)
        self.relationships = tuple(self.relationships)
        self.image_size = tuple(self.image_size)
        for name in ("jitter", "drop_prob", "spurious_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        lo, hi = self.objects
        rlo, rhi = self.relationships
        if lo < 1 or hi < lo:
            raise ValueError(f"object range {self.objects} is empty or non-positive")
        if rlo < 0 or rhi < rlo:
            raise ValueError(f"relationship range {self.relationships} is empty")
        if 2 * rhi > hi:
            raise ValueError("object range too small for the requested relationships")
        if self.num_classes < 2 or self.num_predicates < 1 or self.scenes < 0:
            raise ValueError("need >= 2 classes, >= 1 predicate, >= 0 scenes")

    def to_json(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def _random_box(rng, img_w, img_h, lo=40.0, hi=140.0) -> tuple[float, float, float, float]:
    w, h = rng.uniform(lo, hi, size=2)
    x = rng.uniform(0, img_w - w)
    y = rng.uniform(0, img_h - h)
    return (x, y, x + w, y + h)


def _clip(box, img_w, img_h):
    x1, y1, x2, y2 = box
    x1, x2 = max(0.0, x1), min(img_w, x2)
    y1, y2 = max(0.0, y1), min(img_h, y2)
    if x2 - x1 < 4.0 or y2 - y1 < 4.0:
        return None
    return (x1, y1, x2, y2)


def _contains(a, b) -> bool:
    return (a[0] <= b[0] and a[1] <= b[1] and a[2] >= b[2] and a[3] >= b[3]) or \
           (b[0] <= a[0] and b[1] <= a[1] and b[2] >= a[2] and b[3] >= a[3])


def _place(rng, placed, propose, tries=50):
    for _ in range(tries):
        cand = propose()
        if cand is not None and not any(_contains(cand, p) for p in placed):
            return cand
    return None


def _object_near(rng, subj, predicate, num_predicates, img_w, img_h):
    # each predicate is a direction; the object sits next to the subject along it
    w, h = rng.uniform(40.0, 120.0, size=2)
    theta = 2 * np.pi * predicate / num_predicates + rng.normal(0.0, 0.15)
    cx = 0.5 * (subj[0] + subj[2])
    cy = 0.5 * (subj[1] + subj[3])
    reach = 0.45 * (subj[2] - subj[0] + subj[3] - subj[1] + w + h) / 2
    ox, oy = cx + reach * np.cos(theta), cy + reach * np.sin(theta)
    return _clip((ox - w / 2, oy - h / 2, ox + w / 2, oy + h / 2), img_w, img_h)


def generate_scene(config: SyntheticConfig, rng: np.random.Generator, image_id: str = "") -> Scene:
    img_w, img_h = config.image_size
    hoi = config.mode is Mode.HOI
    human = config.human_class_id
    object_classes = [c for c in range(config.num_classes) if not (hoi and c == human)]

    n_obj = int(rng.integers(config.objects[0], config.objects[1] + 1))
    n_rel = int(rng.integers(config.relationships[0], config.relationships[1] + 1))
    boxes, classes, rels = [], [], []
    for _ in range(n_rel):
        subj = _place(rng, boxes, lambda: _random_box(rng, img_w, img_h, 60.0, 160.0))
        if subj is None:
            continue
        pred = int(rng.integers(config.num_predicates))
        obj = _place(rng, boxes + [subj],
                     lambda: _object_near(rng, subj, pred, config.num_predicates, img_w, img_h))
        if obj is None:
            continue
        s_cls = human if hoi else int(rng.integers(config.num_classes))
        o_cls = int(rng.choice(object_classes))
        boxes += [subj, obj]
        classes += [s_cls, o_cls]
        rels.append(Relationship(len(boxes) - 2, len(boxes) - 1, pred))
    while len(boxes) < n_obj:
        b = _place(rng, boxes, lambda: _random_box(rng, img_w, img_h))
        if b is None:
            break
        boxes.append(b)
        classes.append(int(rng.integers(config.num_classes)))

    dets = []
    for b, c in zip(boxes, classes):
        if rng.random() < config.drop_prob:
            continue
        bw, bh = b[2] - b[0], b[3] - b[1]
        noise = rng.normal(0.0, config.jitter, size=4) * np.array([bw, bh, bw, bh])
        jb = _clip(tuple(np.add(b, noise)), img_w, img_h) or b
        quality = iou(Box(*jb), Box(*b))
        score = float(np.clip(0.35 + 0.6 * quality + rng.normal(0.0, 0.05), 0.01, 0.999))
        dets.append(Detection(Box(*jb), c, score))
    n_true = len(dets)
    n_spurious = int(rng.binomial(max(config.max_detections - n_true, 0), config.spurious_rate))
    if n_spurious:
        cap = float(np.median([d.score for d in dets])) if dets else 0.5
        for _ in range(n_spurious):
            b = _random_box(rng, img_w, img_h, 20.0, 200.0)
            dets.append(Detection(Box(*b), int(rng.integers(config.num_classes)),
                                  float(rng.uniform(0.01, max(cap, 0.02)))))
    order = rng.permutation(len(dets))
    dets = [dets[i] for i in order]
    gt = GroundTruth([Box(*b) for b in boxes], classes, rels)
    return Scene(dets, gt, config.mode, human if hoi else None, image_id=image_id)


def generate_synthetic(config: SyntheticConfig) -> list[Scene]:
    """Deterministic list of synthetic scenes; scene ``i`` depends only on ``(seed, i)``."""
    return [generate_scene(config, np.random.default_rng([config.seed, i]), image_id=f"syn{i:05d}")
            for i in range(config.scenes)]


# -- statistics -------------------------------------------------------------------

def stats_report(scenes: Sequence[Scene], top_k: int) -> dict:
    per_scene = [distribution(s, top_k) for s in scenes]
    total = ClassDistribution.empty()
    for d in per_scene:
        total = total + d
    return {
        "top_k": top_k,
        "num_scenes": len(scenes),
        "aggregate": total.to_json(),
        "per_scene": [dict(image_id=s.image_id, **d.to_json()) for s, d in zip(scenes, per_scene)],
    }


def histogram_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "count"])
    for name, count in report["aggregate"]["counts"].items():
        writer.writerow([name, count])
    return buf.getvalue()
