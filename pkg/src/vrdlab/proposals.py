"""Relationship proposals and the six-way positive / negative taxonomy.

A proposal is an ordered ``(subject_index, object_index)`` pair of
detections. Every proposal falls in exactly one :class:`ProposalClass`:

* ``POS``  - both boxes hit the two boxes of some ground-truth pair
* ``NEG1`` - neither box is an accurate detection
* ``NEG2`` - exactly one box is an accurate detection
* ``NEG3`` - both accurate, neither takes part in any relationship
* ``NEG4`` - both accurate, exactly one takes part in a relationship
* ``NEG5`` - both take part in relationships, but not this one

"Accurate" is ``f_box`` (IoU >= threshold with any GT box) and "takes part
in a relationship" is ``f_rel`` (IoU >= threshold with either box of any GT
relationship). ``f_rel`` implies ``f_box`` because relationship boxes are GT
boxes, which is what makes the six classes exhaustive.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, boxes_to_array, iou, iou_matrix, max_iou_pair

IOU_THRESHOLD = 0.5


class Mode(str, enum.Enum):
    GENERAL = "general"
    HOI = "hoi"


class ProposalClass(enum.IntEnum):
    POS = 0
    NEG1 = 1
    NEG2 = 2
    NEG3 = 3
    NEG4 = 4
    NEG5 = 5


NEGATIVE_CLASSES = (ProposalClass.NEG1, ProposalClass.NEG2, ProposalClass.NEG3,
                    ProposalClass.NEG4, ProposalClass.NEG5)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class Relationship:
    subject: int
    object: int
    predicate: int


@dataclass
class GroundTruth:
    boxes: list[Box]
    classes: list[int]
    relationships: list[Relationship] = field(default_factory=list)

    def __post_init__(self):
        if len(self.boxes) != len(self.classes):
            raise ValueError("gt boxes and classes differ in length")
        n = len(self.boxes)
        for k, rel in enumerate(self.relationships):
            if not (0 <= rel.subject < n and 0 <= rel.object < n):
                raise IndexError(f"relationship {k} references a missing gt box: {rel}")
            if rel.predicate < 0:
                raise ValueError(f"relationship {k} has negative predicate {rel.predicate}")

    @property
    def asso(self) -> list[tuple[int, int]]:
        """Distinct ``(subject, object)`` GT index pairs, in first-seen order."""
        return list(dict.fromkeys((r.subject, r.object) for r in self.relationships))


@dataclass
class Scene:
    detections: list[Detection]
    ground_truth: GroundTruth
    mode: Mode = Mode.GENERAL
    human_class_id: Optional[int] = None
    image_id: str = ""

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.mode is Mode.HOI and self.human_class_id is None:
            raise ValueError("HOI scenes need a human_class_id")

    def is_subject_candidate(self, det: Detection) -> bool:
        return self.mode is Mode.GENERAL or det.class_id == self.human_class_id


def ranked_indices(scene: Scene, candidates: Optional[Sequence[int]] = None) -> list[int]:
    """Detection indices ordered by score, highest first; ties keep input order."""
    idx = range(len(scene.detections)) if candidates is None else candidates
    return sorted(idx, key=lambda i: -scene.detections[i].score)


def generate_proposals(scene: Scene, top_k: int) -> list[tuple[int, int]]:
    """All (subject, object) pairs over the top-``top_k`` candidates.

    Subjects and objects are truncated separately. In general mode both
    roles draw from all detections and self-pairs are dropped; in HOI mode
    subjects are the human detections and self-pairs are kept so that
    invisible-object triplets ``(b, b, predicate)`` stay representable.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    objects = ranked_indices(scene)[:top_k]
    if scene.mode is Mode.GENERAL:
        subjects = objects
    else:
        humans = [i for i, d in enumerate(scene.detections) if d.class_id == scene.human_class_id]
        subjects = ranked_indices(scene, humans)[:top_k]
    allow_self = scene.mode is Mode.HOI
    return [(s, o) for s in subjects for o in objects if allow_self or s != o]


def f_box(b: Box, gt: GroundTruth, threshold: float = IOU_THRESHOLD) -> bool:
    return any(iou(b, g) >= threshold for g in gt.boxes)


def f_rel(b: Box, gt: GroundTruth, threshold: float = IOU_THRESHOLD) -> bool:
    return any(max_iou_pair(b, (gt.boxes[r.subject], gt.boxes[r.object])) >= threshold
               for r in gt.relationships)


class SceneIndex:
    """Per-detection predicates for one scene, computed once then read-only.

    ``match[d, g]`` says detection ``d`` hits GT box ``g``; ``fbox`` and
    ``frel`` are the per-detection helper predicates.
    """

    def __init__(self, scene: Scene, threshold: float = IOU_THRESHOLD):
        self.scene = scene
        self.threshold = threshold
        gt = scene.ground_truth
        det_arr = boxes_to_array(d.box for d in scene.detections)
        gt_arr = boxes_to_array(gt.boxes)
        if len(det_arr) and len(gt_arr):
            self.match = iou_matrix(det_arr, gt_arr) >= threshold
        else:
            self.match = np.zeros((len(det_arr), len(gt_arr)), dtype=bool)
        self.fbox = self.match.any(axis=1)
        in_rel = np.zeros(len(gt.boxes), dtype=bool)
        for r in gt.relationships:
            in_rel[r.subject] = True
            in_rel[r.object] = True
        self.frel = (self.match & in_rel[None, :]).any(axis=1)
        self.asso = gt.asso
        if self.asso:
            self._asso_s = np.array([a for a, _ in self.asso])
            self._asso_o = np.array([b for _, b in self.asso])

    def is_positive(self, s: int, o: int) -> bool:
        if not self.asso:
            return False
        return bool(np.any(self.match[s, self._asso_s] & self.match[o, self._asso_o]))

    def matched_relationships(self, s: int, o: int) -> list[Relationship]:
        """GT relationships whose box pair this proposal hits."""
        return [r for r in self.scene.ground_truth.relationships
                if self.match[s, r.subject] and self.match[o, r.object]]

    def classify(self, s: int, o: int) -> ProposalClass:
        if self.is_positive(s, o):
            return ProposalClass.POS
        return _negative_class(self.fbox[s], self.frel[s], self.fbox[o], self.frel[o])

    def classify_many(self, proposals: Sequence[tuple[int, int]]) -> np.ndarray:
        """Vectorised :meth:`classify` over a proposal list; returns int8 labels."""
        if not proposals:
            return np.zeros(0, dtype=np.int8)
        p = np.asarray(proposals, dtype=np.int64)
        s, o = p[:, 0], p[:, 1]
        fb1, fb2 = self.fbox[s], self.fbox[o]
        fr1, fr2 = self.frel[s], self.frel[o]
        out = np.full(len(p), -1, dtype=np.int8)
        out[~fb1 & ~fb2] = ProposalClass.NEG1
        out[fb1 ^ fb2] = ProposalClass.NEG2
        both = fb1 & fb2
        out[both & ~fr1 & ~fr2] = ProposalClass.NEG3
        out[both & (fr1 ^ fr2)] = ProposalClass.NEG4
        out[fr1 & fr2] = ProposalClass.NEG5
        if self.asso:
            pos = np.any(self.match[s][:, self._asso_s] & self.match[o][:, self._asso_o], axis=1)
            out[pos] = ProposalClass.POS
        assert (out >= 0).all()
        return out


def _negative_class(fb1, fr1, fb2, fr2) -> ProposalClass:
    if not fb1 and not fb2:
        return ProposalClass.NEG1
    if fb1 != fb2:
        return ProposalClass.NEG2
    if fr1 and fr2:
        return ProposalClass.NEG5
    if fr1 or fr2:
        return ProposalClass.NEG4
    return ProposalClass.NEG3


def classify(proposal: tuple[int, int], scene: Scene, index: Optional[SceneIndex] = None,
             threshold: float = IOU_THRESHOLD) -> ProposalClass:
    if index is None:
        index = SceneIndex(scene, threshold)
    return index.classify(*proposal)


def classify_oracle(proposal: tuple[int, int], scene: Scene,
                    threshold: float = IOU_THRESHOLD) -> ProposalClass:
    """Reference classifier: evaluates all six set definitions literally.

    No caching and no vectorisation - each predicate re-scans the ground
    truth with the scalar IoU. Raises ``AssertionError`` if the sets do not
    partition the proposal, which would mean the taxonomy itself is broken.
    """
    gt = scene.ground_truth
    b1 = scene.detections[proposal[0]].box
    b2 = scene.detections[proposal[1]].box
    pos = any(min(iou(b1, gt.boxes[g1]), iou(b2, gt.boxes[g2])) >= threshold
              for g1, g2 in {(r.subject, r.object) for r in gt.relationships})
    fb1, fb2 = f_box(b1, gt, threshold), f_box(b2, gt, threshold)
    fr1, fr2 = f_rel(b1, gt, threshold), f_rel(b2, gt, threshold)
    member = {
        ProposalClass.POS: pos,
        ProposalClass.NEG1: not fb1 and not fb2,
        ProposalClass.NEG2: (not fb1 and fb2) or (fb1 and not fb2),
        ProposalClass.NEG3: fb1 and not fr1 and fb2 and not fr2,
        ProposalClass.NEG4: (fr1 and fb2 and not fr2) or (fb1 and not fr1 and fr2),
        ProposalClass.NEG5: fr1 and fr2 and not pos,
    }
    hits = [c for c, m in member.items() if m]
    assert len(hits) == 1, f"proposal {proposal} lands in {hits}"
    return hits[0]


@dataclass
class ClassDistribution:
    counts: dict[ProposalClass, int]
    num_dpos: int
    num_drel: int
    num_proposals: int

    @property
    def pos_ratio(self) -> float:
        return self.counts[ProposalClass.POS] / self.num_proposals if self.num_proposals else 0.0

    @property
    def rel_ratio(self) -> float:
        return self.num_drel / self.num_dpos if self.num_dpos else 0.0

    def __add__(self, other: "ClassDistribution") -> "ClassDistribution":
        return ClassDistribution(
            {c: self.counts[c] + other.counts[c] for c in ProposalClass},
            self.num_dpos + other.num_dpos,
            self.num_drel + other.num_drel,
            self.num_proposals + other.num_proposals,
        )

    @classmethod
    def empty(cls) -> "ClassDistribution":
        return cls({c: 0 for c in ProposalClass}, 0, 0, 0)

    def to_json(self) -> dict:
        return {
            "counts": {c.name: self.counts[c] for c in ProposalClass},
            "num_proposals": self.num_proposals,
            "num_dpos": self.num_dpos,
            "num_drel": self.num_drel,
            "pos_ratio": self.pos_ratio,
            "drel_over_dpos": self.rel_ratio,
        }


def distribution(scene: Scene, top_k: int, index: Optional[SceneIndex] = None) -> ClassDistribution:
    """Exact per-class proposal counts plus the |D_pos| and |D_rel| sizes.

    ``D_pos`` counts every detection with ``f_box`` true; ``D_rel`` counts
    the detections that appear in at least one positive proposal.
    """
    index = index or SceneIndex(scene)
    proposals = generate_proposals(scene, top_k)
    labels = index.classify_many(proposals)
    tally = np.bincount(labels, minlength=len(ProposalClass)) if len(labels) else np.zeros(6, int)
    pos = np.asarray(proposals, dtype=np.int64).reshape(-1, 2)[labels == ProposalClass.POS]
    return ClassDistribution(
        {c: int(tally[c]) for c in ProposalClass},
        int(index.fbox.sum()),
        len(np.unique(pos)),
        len(proposals),
    )
