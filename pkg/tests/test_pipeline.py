import dataclasses

import numpy as np
import pytest

from conftest import B1, B2, B3, make_six_class_scene
from vrdlab import numeric as nc
from vrdlab import pipeline as pl
from vrdlab.data_io import SyntheticConfig, generate_synthetic
from vrdlab.geometry import Box
from vrdlab.numeric import Tensor, check_gradients
from vrdlab.proposals import Detection, GroundTruth, ProposalClass as PC, Relationship, Scene
from vrdlab.sampling import SamplerConfig

TINY = pl.ModelConfig(feature_dim=6, heads=2, head_dim=3, hidden_dim=5, num_predicates=3, lp=3)


def small_scenes(n, seed=0, **kw):
    cfg = dict(scenes=n, objects=(4, 8), relationships=(1, 2), max_detections=14, seed=seed)
    cfg.update(kw)
    return generate_synthetic(SyntheticConfig(**cfg))


def batch_of(scene, model_cfg, top_k=10, rows=None, feature_seed=0):
    prep = pl.prepare_scene(scene, top_k)
    rows = np.arange(len(prep.proposals)) if rows is None else rows
    feats = prep.features(feature_seed, model_cfg.feature_dim)
    return prep, feats, rows


class TestFeatures:
    def test_deterministic_and_shaped(self):
        scene = small_scenes(1)[0]
        a = pl.extract_toy_features(scene, seed=3, dim=12)
        b = pl.extract_toy_features(scene, seed=3, dim=12)
        n = len(scene.detections)
        assert a.nodes.shape == (n, 12) and a.edges.shape == (n, n, 12)
        assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.edges, b.edges)
        c = pl.extract_toy_features(scene, seed=4, dim=12)
        assert not np.array_equal(a.nodes, c.nodes)
        assert np.array_equal(a.edges, c.edges)

    def test_identical_detections_identical_features(self, monkeypatch):
        monkeypatch.setattr(pl, "NOISE_SCALE", 0.0)
        d = Detection(Box(10, 10, 50, 40), 3, 0.7)
        scene = Scene([d, d, Detection(Box(0, 0, 5, 5), 1, 0.2)], GroundTruth([], []))
        f = pl.extract_toy_features(scene, dim=8)
        assert np.array_equal(f.nodes[0], f.nodes[1])
        assert np.array_equal(f.edges[0, 2], f.edges[1, 2])

    def test_subset_keeps_requested_ids(self):
        scene = small_scenes(1)[0]
        full = pl.extract_toy_features(scene, dim=8)
        ids = [1, 3]
        sub = pl.extract_toy_features(scene, dim=8, det_ids=ids)
        # geometry is normalised by the kept boxes, noise by detection index
        assert sub.nodes.shape == (2, 8)
        assert np.array_equal(sub.det_ids, ids)
        assert full.nodes.shape[0] == len(scene.detections)


class TestForward:
    def test_probability_ranges(self):
        model = pl.RelationModel.init(TINY, seed=1)
        prep, feats, rows = batch_of(small_scenes(1)[0], TINY)
        probs, masks = pl.forward(model, feats, prep.node_pairs(rows))
        assert probs.shape == (len(rows), 3) and masks.shape == (len(rows), 2, 3, 3)
        assert np.all((probs.data > 0) & (probs.data < 1))

    def test_zero_message_equals_no_gnn(self):
        model = pl.RelationModel.init(TINY, seed=2)
        model.gat.message.weight.data[:] = 0.0
        model.gat.message.bias.data[:] = 0.0
        plain = dataclasses.replace(model, config=dataclasses.replace(TINY, use_gnn=False))
        prep, feats, rows = batch_of(small_scenes(1, seed=5)[0], TINY)
        a, ma = pl.forward(model, feats, prep.node_pairs(rows))
        b, mb = pl.forward(plain, feats, prep.node_pairs(rows))
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(ma.data, mb.data, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("loss", ["bce", "focal"])
    def test_full_model_gradcheck(self, loss):
        model = pl.RelationModel.init(TINY, seed=3)
        prep, feats, _ = batch_of(small_scenes(1, seed=6)[0], TINY, top_k=5)
        rows = np.arange(min(6, len(prep.proposals)))
        pairs = prep.node_pairs(rows)
        y = prep.cls_targets(rows, 3)
        m = prep.mask_targets(rows, 3)

        def f():
            p, k = pl.forward(model, feats, pairs)
            return pl.total_loss(p, k, y, m, loss)[0]

        res = check_gradients(f, model.params(), max_per_param=6, rng=np.random.default_rng(0))
        assert res.ok, res.failures[:3]


class TestTotalLoss:
    def test_additive_and_recomposed(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, (4, 3))
        k = rng.uniform(0.05, 0.95, (4, 2, 3, 3))
        y = (rng.random((4, 3)) < 0.3).astype(float)
        m = (rng.random((4, 2, 3, 3)) < 0.5).astype(float)
        total, c, s = pl.total_loss(Tensor(p), Tensor(k), y, m)
        assert total.item() == c.item() + s.item()
        assert c.item() == pytest.approx(nc.bce_elementwise(p, y).mean(), rel=1e-14)
        assert s.item() == pytest.approx(nc.bce_elementwise(k, m).mean(), rel=1e-14)

    def test_perfect_prediction_floor(self):
        y = np.array([[1.0, 0.0, 1.0]])
        m = np.ones((1, 2, 3, 3))
        total, _, _ = pl.total_loss(Tensor(y), Tensor(m), y, m)
        assert total.item() <= 2 * -np.log(1 - 1e-7) + 1e-15


class TestTargets:
    def test_multi_hot(self):
        gts = [Box(0, 0, 10, 10), Box(20, 0, 30, 10), Box(40, 0, 50, 10)]
        gt = GroundTruth(gts, [1, 2, 3], [Relationship(0, 1, 0), Relationship(0, 1, 2)])
        scene = Scene([Detection(b, c, 0.9) for b, c in zip(gts, [1, 2, 3])], gt)
        prep = pl.prepare_scene(scene, 10)
        rows = np.arange(len(prep.proposals))
        y = prep.cls_targets(rows, 3)
        for r, (s, o) in enumerate(prep.proposals):
            if (s, o) == (0, 1):
                assert prep.labels[r] == PC.POS
                np.testing.assert_array_equal(y[r], [1, 0, 1])
            else:
                assert prep.labels[r] != PC.POS
                assert not y[r].any()

    def test_six_class_fixture_targets(self):
        prep = pl.prepare_scene(make_six_class_scene(), 10)
        pos = [r for r, (s, o) in enumerate(prep.proposals) if (s, o) == (B1, B2)]
        neg = [r for r, (s, o) in enumerate(prep.proposals) if (s, o) == (B1, B3)]
        y = prep.cls_targets(np.array(pos + neg), 3)
        np.testing.assert_array_equal(y, [[1, 0, 0], [0, 0, 0]])


class TestTrain:
    def test_zero_lr_keeps_params_and_loss(self):
        scene = small_scenes(1, seed=8)[0]
        cfg = pl.TrainConfig(epochs=4, lr=0.0, top_k=10)
        # OHEM with few positives selects the same batch every visit
        r = pl.train([scene], SamplerConfig("ohem", batch_size=8), cfg, TINY)
        assert len(r.losses) == 4 and len(set(r.losses)) == 1
        init = pl.RelationModel.init(TINY, cfg.init_seed)
        r2 = pl.train(small_scenes(3), SamplerConfig("bnps", batch_size=8), cfg, TINY)
        for k, t in r2.model.params().items():
            assert np.array_equal(t.data, init.params()[k].data)

    def test_deterministic(self, tmp_path):
        scenes = small_scenes(6, seed=9)
        cfg = pl.TrainConfig(epochs=2, lr=0.05, top_k=10, init_seed=4)
        a = pl.train(scenes, SamplerConfig("bnps", batch_size=8, seed=7), cfg, TINY)
        b = pl.train(scenes, SamplerConfig("bnps", batch_size=8, seed=7), cfg, TINY)
        assert a.losses == b.losses
        a.model.save(tmp_path / "a.ckpt")
        b.model.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_skips_scenes_without_positives(self):
        empty = small_scenes(1, relationships=(0, 0))[0]
        r = pl.train([empty] + small_scenes(2), SamplerConfig("rs", batch_size=8),
                     pl.TrainConfig(epochs=1, top_k=10), TINY)
        assert r.skipped_scenes == 1 and r.steps == 2

    def test_loss_decreases(self):
        scenes = small_scenes(60, seed=10)
        cfg = pl.TrainConfig(epochs=3, lr=0.05, top_k=20)
        r = pl.train(scenes, SamplerConfig("bnps", batch_size=32), cfg, pl.ModelConfig(feature_dim=16))
        assert np.mean(r.losses[-30:]) < np.mean(r.losses[:30])

    def test_focal_variant_runs(self):
        r = pl.train(small_scenes(3), SamplerConfig("bnps_3cls_hn", batch_size=8),
                     pl.TrainConfig(epochs=1, top_k=10, loss="focal"), TINY)
        assert r.steps == 3 and all(np.isfinite(r.losses))

    def test_checkpoint_roundtrip(self, tmp_path):
        model = pl.RelationModel.init(TINY, seed=5)
        model.save(tmp_path / "m.ckpt")
        back = pl.RelationModel.load(tmp_path / "m.ckpt")
        assert back.config == TINY
        for k, t in model.params().items():
            assert np.array_equal(back.params()[k].data, t.data)


class TestInfer:
    def test_score_product_and_count(self):
        scene = small_scenes(1, seed=11)[0]
        model = pl.RelationModel.init(TINY, seed=1)
        n_props = len(pl.prepare_scene(scene, 10).proposals)
        one = pl.infer(model, scene, predicate_top_k=1, top_k=10)
        three = pl.infer(model, scene, predicate_top_k=3, top_k=10)
        assert len(one) == n_props and len(three) == 3 * n_props
        for p in three:
            assert abs(p.score - p.s1 * p.s2 * p.s_cls) <= 1e-12
        scores = [p.score for p in three]
        assert scores == sorted(scores, reverse=True)

    def test_known_product(self):
        dets = [Detection(Box(0, 0, 10, 10), 1, 0.8), Detection(Box(20, 0, 30, 10), 2, 0.5)]
        scene = Scene(dets, GroundTruth([], []))
        model = pl.RelationModel.init(TINY)
        model.cls3.weight.data[:] = 0.0
        model.cls3.bias.data[:] = 0.0
        preds = pl.infer(model, scene, top_k=10)
        first = [p for p in preds if (p.subject_index, p.object_index) == (0, 1)][0]
        assert (first.s1, first.s2, first.s_cls) == (0.8, 0.5, 0.5)
        assert first.score == pytest.approx(0.2, abs=1e-15)

    def test_json_roundtrip(self):
        p = pl.infer(pl.RelationModel.init(TINY), small_scenes(1)[0], top_k=5)[0]
        assert pl.TripletPrediction.from_json(p.to_json()) == p


class TestFalsePositives:
    def test_suppressed_model_has_none(self):
        model = pl.RelationModel.init(TINY)
        model.cls3.weight.data[:] = 0.0
        model.cls3.bias.data[:] = -10.0
        rep = pl.false_positive_report(model, small_scenes(3), top_k=10)
        assert rep == {f"NEG{i}": 0.0 for i in range(1, 6)}

    def test_always_confident_counts_all_negatives(self):
        model = pl.RelationModel.init(TINY)
        model.cls3.weight.data[:] = 0.0
        model.cls3.bias.data[:] = 10.0
        scenes = small_scenes(2)
        rep = pl.false_positive_report(model, scenes, top_k=10)
        labels = np.concatenate([pl.prepare_scene(s, 10).labels for s in scenes])
        for i in range(1, 6):
            assert rep[f"NEG{i}"] == (labels == i).sum() / 2

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            pl.false_positive_report(pl.RelationModel.init(TINY), [], threshold=1.0)
