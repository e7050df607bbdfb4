"""Toy end-to-end relationship model: features -> MH-GAT -> predicate + mask heads.

The CNN backbone is replaced by :func:`extract_toy_features`, which turns box
geometry, class ids and detection scores into fixed-size vectors through a
fixed random projection. Everything after that is trainable: a node and an
edge encoder, one MH-GAT layer, a 3-layer predicate classifier (one sigmoid
per predicate) and the spatial mask decoder, all fed with
``[subject', object', union]`` for each proposal.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import numeric as nc
from .geometry import Box
from .mhgat import MHGATParams, SceneGraph, message_pass
from .numeric import LinearLayer, OptimizerState, Tensor
from .proposals import (
    NEGATIVE_CLASSES,
    ProposalClass,
    Scene,
    SceneIndex,
    generate_proposals,
)
from .sampling import (
    NoPositivesError,
    SamplerConfig,
    Strategy,
    assign_weights,
    ohem_select,
    sample_batch,
)
from .smd import SMDHead, mask_target, predict_mask

log = logging.getLogger(__name__)

FEATURE_SEED = 20210517  # fixes the projection so features mean the same in every scene
NOISE_SCALE = 0.05


@dataclass
class ModelConfig:
    feature_dim: int = 32
    heads: int = 4
    head_dim: int = 8
    hidden_dim: int = 64
    num_predicates: int = 3
    num_classes: int = 10
    lp: int = 7
    use_gnn: bool = True


@dataclass
class TrainConfig:
    epochs: int = 2
    lr: float = 0.05
    momentum: float = 0.9
    decay_epochs: tuple[int, ...] = ()
    decay_rate: float = 0.1
    top_k: int = 100
    loss: str = "bce"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    init_seed: int = 0
    feature_seed: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(self.decay_epochs)
        if self.loss not in ("bce", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")


# -- toy features ----------------------------------------------------------------

_GEO_DIM = 6
_EDGE_DIM = 17


def _projection(rows: int, cols: int, salt: int) -> np.ndarray:
    rng = np.random.default_rng([FEATURE_SEED, salt])
    return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))


def _class_embedding(class_ids: np.ndarray, dim: int) -> np.ndarray:
    return np.stack([np.random.default_rng([FEATURE_SEED, 1000 + int(c)]).normal(0.0, 0.5, dim)
                     for c in class_ids]) if len(class_ids) else np.zeros((0, dim))


@dataclass
class RelationshipFeatures:
    """Node features for a set of detections and union features for every
    ordered pair of them (self-pairs included)."""

    det_ids: np.ndarray   # (N,) detection index of each node
    nodes: np.ndarray     # (N, d)
    edges: np.ndarray     # (N, N, d)

    def node_of(self) -> dict[int, int]:
        return {int(d): k for k, d in enumerate(self.det_ids)}

    def pair_feature(self, s_node: int, o_node: int) -> np.ndarray:
        return np.concatenate([self.nodes[s_node], self.nodes[o_node], self.edges[s_node, o_node]])


def extract_toy_features(scene: Scene, seed: int = 0, dim: int = 32,
                         det_ids: Optional[Sequence[int]] = None) -> RelationshipFeatures:
    """Deterministic stand-in for backbone features.

    Node vector: projected normalised geometry and score, plus a class
    embedding, plus Gaussian noise drawn from ``(seed, detection index)``.
    Edge vector: projected geometry of the pair's union box and of each box
    relative to it and to the other box.
    """
    if det_ids is None:
        det_ids = np.arange(len(scene.detections))
    det_ids = np.asarray(det_ids, dtype=np.int64)
    dets = [scene.detections[i] for i in det_ids]
    n = len(dets)
    boxes = np.array([d.box.as_tuple() for d in dets]).reshape(n, 4)
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    extent = max(float(boxes[:, 2:].max()) if n else 1.0, 1.0)
    b = boxes / extent
    w, h = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    cx, cy = 0.5 * (b[:, 0] + b[:, 2]), 0.5 * (b[:, 1] + b[:, 3])

    geo = np.stack([cx, cy, w, h, np.log(w / h), 2 * scores - 1], axis=1)
    nodes = np.tanh(geo @ _projection(dim, _GEO_DIM, 1).T) + _class_embedding(classes, dim)
    noise = np.stack([np.random.default_rng([seed, int(i)]).normal(0.0, NOISE_SCALE, dim)
                      for i in det_ids]) if n else np.zeros((0, dim))
    nodes = nodes + noise

    ux1 = np.minimum(b[:, None, 0], b[None, :, 0])
    uy1 = np.minimum(b[:, None, 1], b[None, :, 1])
    ux2 = np.maximum(b[:, None, 2], b[None, :, 2])
    uy2 = np.maximum(b[:, None, 3], b[None, :, 3])
    uw, uh = ux2 - ux1, uy2 - uy1
    iw = np.clip(np.minimum(b[:, None, 2], b[None, :, 2]) - np.maximum(b[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(b[:, None, 3], b[None, :, 3]) - np.maximum(b[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area = w * h
    pair_iou = inter / (area[:, None] + area[None, :] - inter)
    ones = np.ones((n, n))
    desc = np.stack([
        0.5 * (ux1 + ux2), 0.5 * (uy1 + uy2), uw, uh,
        (cx[None, :] - cx[:, None]) / w[:, None],
        (cy[None, :] - cy[:, None]) / h[:, None],
        np.log(w[None, :] / w[:, None]), np.log(h[None, :] / h[:, None]),
        pair_iou,
        (b[:, None, 0] - ux1) / uw, (b[:, None, 1] - uy1) / uh,
        (b[:, None, 2] - ux1) / uw, (b[:, None, 3] - uy1) / uh,
        (b[None, :, 0] - ux1) / uw, (b[None, :, 1] - uy1) / uh,
        (b[None, :, 2] - ux1) / uw, (b[None, :, 3] - uy1) / uh,
    ], axis=-1) * ones[..., None]
    edges = np.tanh(desc @ _projection(dim, _EDGE_DIM, 2).T)
    return RelationshipFeatures(det_ids, nodes, edges)


# -- model -----------------------------------------------------------------------

@dataclass
class RelationModel:
    config: ModelConfig
    node_enc: LinearLayer
    edge_enc: LinearLayer
    gat: MHGATParams
    cls1: LinearLayer
    cls2: LinearLayer
    cls3: LinearLayer
    smd: SMDHead

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "RelationModel":
        rng = np.random.default_rng([seed, 7])
        d, hd = config.feature_dim, config.hidden_dim
        return cls(
            config,
            node_enc=LinearLayer.init(rng, d, d),
            edge_enc=LinearLayer.init(rng, d, d),
            gat=MHGATParams.init(rng, d, d, config.heads, config.head_dim),
            cls1=LinearLayer.init(rng, 3 * d, hd),
            cls2=LinearLayer.init(rng, hd, hd),
            cls3=LinearLayer.init(rng, hd, config.num_predicates),
            smd=SMDHead.init(rng, 3 * d, hd, config.lp),
        )

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.node_enc.params("node_enc"))
        out.update(self.edge_enc.params("edge_enc"))
        out.update(self.gat.params("gat"))
        out.update(self.cls1.params("cls1"))
        out.update(self.cls2.params("cls2"))
        out.update(self.cls3.params("cls3"))
        out.update(self.smd.params("smd"))
        return out

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {"format": "vrdlab-checkpoint/1", "model": asdict(self.config)}
        meta.update(extra_meta or {})
        nc.save_arrays(path, {k: t.data for k, t in self.params().items()}, meta)

    @classmethod
    def load(cls, path) -> "RelationModel":
        arrays, meta = nc.load_arrays(path)
        model = cls.init(ModelConfig(**meta["model"]))
        params = model.params()
        if set(arrays) != set(params):
            raise ValueError(f"checkpoint {path} does not match the model layout")
        for k, t in params.items():
            t.data = np.array(arrays[k], dtype=np.float64)
        return model


def forward(model: RelationModel, feats: RelationshipFeatures, pairs: np.ndarray):
    """Predicate probabilities ``(B, P)`` and mask probabilities ``(B, 2, lp, lp)``.

    ``pairs`` holds node indices into ``feats``, one ``(subject, object)`` row
    per proposal.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    x = nc.relu(model.node_enc(Tensor(feats.nodes)))
    e = nc.relu(model.edge_enc(Tensor(feats.edges)))
    if model.config.use_gnn:
        x = message_pass(model.gat, SceneGraph(x, e))
    s, o = pairs[:, 0], pairs[:, 1]
    feat = nc.concat([nc.gather(x, s), nc.gather(x, o), nc.gather(e, (s, o))], axis=-1)
    h = nc.relu(model.cls1(feat))
    h = nc.relu(model.cls2(h))
    probs = nc.sigmoid(model.cls3(h))
    masks = predict_mask(model.smd, feat)
    return probs, masks


def total_loss(probs: Tensor, masks: Tensor, cls_targets: np.ndarray, mask_targets: np.ndarray,
               loss: str = "bce", focal_alpha: float = 0.25, focal_gamma: float = 2.0):
    """Classification term + mask term; returns ``(total, cls_term, mask_term)``.

    The mask term is always BCE. ``loss="focal"`` swaps only the
    classification term.
    """
    if loss == "focal":
        cls_term = nc.focal_loss_tensor(probs, cls_targets, focal_alpha, focal_gamma)
    else:
        cls_term = nc.bce_loss(probs, cls_targets)
    mask_term = nc.bce_loss(masks, mask_targets)
    return nc.add(cls_term, mask_term), cls_term, mask_term


# -- per-scene bookkeeping ----------------------------------------------------------

@dataclass
class PreparedScene:
    scene: Scene
    index: SceneIndex
    proposals: np.ndarray      # (S, 2) detection indices
    labels: np.ndarray         # (S,) ProposalClass values
    node_of: dict[int, int]
    det_ids: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == ProposalClass.POS).sum())

    def node_pairs(self, rows: np.ndarray) -> np.ndarray:
        p = self.proposals[rows]
        return np.array([[self.node_of[int(s)], self.node_of[int(o)]] for s, o in p],
                        dtype=np.int64).reshape(-1, 2)

    def cls_targets(self, rows: np.ndarray, num_predicates: int) -> np.ndarray:
        """Multi-hot: 1 at the predicates of every GT relationship a positive hits."""
        y = np.zeros((len(rows), num_predicates))
        for k, r in enumerate(rows):
            if self.labels[r] == ProposalClass.POS:
                s, o = self.proposals[r]
                for rel in self.index.matched_relationships(int(s), int(o)):
                    if rel.predicate < num_predicates:
                        y[k, rel.predicate] = 1.0
        return y

    def mask_targets(self, rows: np.ndarray, lp: int) -> np.ndarray:
        dets = self.scene.detections
        return np.stack([mask_target(dets[s].box, dets[o].box, lp)
                         for s, o in self.proposals[rows]]).astype(np.float64)

    def features(self, seed: int, dim: int) -> RelationshipFeatures:
        return extract_toy_features(self.scene, seed, dim, self.det_ids)


def prepare_scene(scene: Scene, top_k: int) -> PreparedScene:
    index = SceneIndex(scene)
    proposals = generate_proposals(scene, top_k)
    props = np.asarray(proposals, dtype=np.int64).reshape(-1, 2)
    labels = index.classify_many(proposals)
    det_ids = np.unique(props) if len(props) else np.zeros(0, dtype=np.int64)
    node_of = {int(d): k for k, d in enumerate(det_ids)}
    return PreparedScene(scene, index, props, labels, node_of, det_ids)


def _predict_rows(model, prep: PreparedScene, feats, rows, chunk=4096):
    out = []
    for start in range(0, len(rows), chunk):
        probs, _ = forward(model, feats, prep.node_pairs(rows[start:start + chunk]))
        out.append(probs.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_predicates))


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RelationModel
    losses: list[float]
    skipped_scenes: int
    steps: int


def train(scenes: Sequence[Scene], sampler: SamplerConfig, config: TrainConfig,
          model_config: Optional[ModelConfig] = None, model: Optional[RelationModel] = None,
          max_steps: Optional[int] = None) -> TrainResult:
    """Epochs over ``scenes``; one sampled mini-batch and one update per scene.

    Scenes without a positive proposal are skipped and counted. The sampler
    stream for a step is its global index, so a run is a pure function of
    the configs and seeds.
    """
    model = model or RelationModel.init(model_config or ModelConfig(), config.init_seed)
    mc = model.config
    params = model.params()
    opt = OptimizerState(config.lr, config.momentum, config.decay_epochs, config.decay_rate)
    prepared = [prepare_scene(s, config.top_k) for s in scenes]
    losses, skipped, step = [], 0, 0
    for epoch in range(config.epochs):
        for si, prep in enumerate(prepared):
            if max_steps is not None and step >= max_steps:
                break
            if prep.num_positive == 0:
                skipped += 1
                continue
            stream = epoch * len(prepared) + si
            feats = prep.features(config.feature_seed, mc.feature_dim)
            if sampler.strategy is Strategy.OHEM:
                rows = _ohem_rows(model, prep, feats, sampler, config, stream)
            else:
                try:
                    pw = assign_weights(prep.labels, sampler.strategy, sampler.positive_ratio)
                except NoPositivesError:  # pragma: no cover - filtered above
                    skipped += 1
                    continue
                rows = sample_batch(pw, sampler, stream)
            probs, masks = forward(model, feats, prep.node_pairs(rows))
            loss, _, _ = total_loss(probs, masks, prep.cls_targets(rows, mc.num_predicates),
                                    prep.mask_targets(rows, mc.lp), config.loss,
                                    config.focal_alpha, config.focal_gamma)
            grads = nc.grad(loss, params)
            nc.optimizer_step(params, grads, opt, epoch)
            losses.append(loss.item())
            step += 1
    if skipped:
        log.warning("skipped %d scene visits without positive proposals", skipped)
    return TrainResult(model, losses, skipped, step)


def _ohem_rows(model, prep, feats, sampler, config, stream):
    rows = np.arange(len(prep.proposals))
    probs = _predict_rows(model, prep, feats, rows)
    y = prep.cls_targets(rows, model.config.num_predicates)
    per_prop = nc.bce_elementwise(probs, y).mean(axis=1)
    return ohem_select(prep.labels == ProposalClass.POS, per_prop, sampler.batch_size,
                       sampler.positive_ratio, seed=sampler.seed + stream)


# -- inference ----------------------------------------------------------------------

@dataclass
class TripletPrediction:
    subject_box: Box
    object_box: Box
    predicate: int
    score: float
    s1: float
    s2: float
    s_cls: float
    subject_class: int = -1
    object_class: int = -1
    subject_index: int = -1
    object_index: int = -1
    image_id: str = ""

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "subject_box": list(self.subject_box.as_tuple()),
            "object_box": list(self.object_box.as_tuple()),
            "subject_class": self.subject_class,
            "object_class": self.object_class,
            "subject_index": self.subject_index,
            "object_index": self.object_index,
            "predicate": self.predicate,
            "score": self.score,
            "s1": self.s1,
            "s2": self.s2,
            "s_cls": self.s_cls,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TripletPrediction":
        return cls(Box.from_seq(d["subject_box"]), Box.from_seq(d["object_box"]), int(d["predicate"]),
                   float(d["score"]), float(d["s1"]), float(d["s2"]), float(d["s_cls"]),
                   int(d.get("subject_class", -1)), int(d.get("object_class", -1)),
                   int(d.get("subject_index", -1)), int(d.get("object_index", -1)),
                   str(d.get("image_id", "")))


def infer(model: RelationModel, scene: Scene, predicate_top_k: int = 1, top_k: int = 100,
          feature_seed: int = 0) -> list[TripletPrediction]:
    """Score every proposal of the scene, keeping the ``predicate_top_k`` best
    predicates of each; sorted by ``s1 * s2 * s_cls`` descending (stable)."""
    prep = prepare_scene(scene, top_k)
    if len(prep.proposals) == 0:
        return []
    feats = prep.features(feature_seed, model.config.feature_dim)
    probs = _predict_rows(model, prep, feats, np.arange(len(prep.proposals)))
    k = min(predicate_top_k, probs.shape[1])
    dets = scene.detections
    out = []
    for (s, o), row in zip(prep.proposals, probs):
        s1, s2 = dets[s].score, dets[o].score
        for p in np.argsort(-row, kind="stable")[:k]:
            s_cls = float(row[p])
            out.append(TripletPrediction(dets[s].box, dets[o].box, int(p), s1 * s2 * s_cls, s1, s2, s_cls,
                                         dets[s].class_id, dets[o].class_id, int(s), int(o),
                                         scene.image_id))
    order = sorted(range(len(out)), key=lambda i: -out[i].score)
    return [out[i] for i in order]


def false_positive_report(model: RelationModel, scenes: Sequence[Scene], threshold: float = 0.5,
                          top_k: int = 100, feature_seed: int = 0) -> dict[str, float]:
    """Average per-image count of negatives with any predicate probability >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    totals = {c: 0 for c in NEGATIVE_CLASSES}
    for scene in scenes:
        prep = prepare_scene(scene, top_k)
        if len(prep.proposals) == 0:
            continue
        feats = prep.features(feature_seed, model.config.feature_dim)
        probs = _predict_rows(model, prep, feats, np.arange(len(prep.proposals)))
        confident = probs.max(axis=1) >= threshold
        for c in NEGATIVE_CLASSES:
            totals[c] += int((confident & (prep.labels == c)).sum())
    n = max(len(scenes), 1)
    return {c.name: totals[c] / n for c in NEGATIVE_CLASSES}


def hard_negative_fp(report: dict[str, float]) -> float:
    return report["NEG3"] + report["NEG4"] + report["NEG5"]
