import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrdlab.evaluation import (
    EvalConfig,
    GTTriplet,
    MapMode,
    Task,
    ap_role,
    average_precision,
    filter_predicate_top_k,
    group_by_image,
    hico_map,
    match_triplet,
    metrics_report,
    recall_at_n,
)
from vrdlab.geometry import Box
from vrdlab.pipeline import TripletPrediction

S = Box(0, 0, 10, 10)
O = Box(20, 0, 30, 10)
FAR = Box(100, 100, 110, 110)


def pred(sb, ob, p, score, image="a", ocls=-1, si=0, oi=1):
    return TripletPrediction(sb, ob, p, score, 1.0, 1.0, score, -1, ocls, si, oi, image)


def gt(sb=S, ob=O, p=0, ocls=-1):
    return GTTriplet(sb, ob, p, -1, ocls)


class TestMatch:
    def test_exact(self):
        assert match_triplet(pred(S, O, 0, 1.0), gt())

    def test_predicate_differs(self):
        assert not match_triplet(pred(S, O, 1, 1.0), gt())

    def test_object_miss_but_phrase_hit(self):
        # subject IoU 60/100, object IoU 40/100, union boxes 240/300
        p = pred(Box(0, 0, 10, 6), Box(20, 0, 24, 10), 0, 1.0)
        assert not match_triplet(p, gt(), Task.RELATIONSHIP)
        assert match_triplet(p, gt(), Task.PHRASE)

    def test_both_boxes_at_threshold(self):
        p = pred(Box(0, 0, 10, 5), Box(20, 0, 30, 5), 0, 1.0)
        assert match_triplet(p, gt())


class TestRecall:
    def test_all_matched(self):
        assert recall_at_n({"a": [pred(S, O, 0, 0.9)]}, {"a": [gt()]}, 50) == 1.0

    def test_no_predictions(self):
        assert recall_at_n({}, {"a": [gt()]}, 50) == 0.0

    def test_half(self):
        gts = {"a": [gt(p=0), gt(p=1)]}
        preds = {"a": [pred(S, O, 0, 0.9), pred(S, O, 2, 0.8)]}
        assert recall_at_n(preds, gts, 2) == 0.5

    def test_cut_at_n(self):
        gts = {"a": [gt(p=0), gt(p=1)]}
        preds = {"a": [pred(FAR, O, 0, 0.9), pred(S, O, 0, 0.8), pred(S, O, 1, 0.7)]}
        assert recall_at_n(preds, gts, 1) == 0.0
        assert recall_at_n(preds, gts, 2) == 0.5
        assert recall_at_n(preds, gts, 3) == 1.0

    def test_each_gt_credited_once(self):
        preds = {"a": [pred(S, O, 0, 0.9), pred(S, O, 0, 0.8)]}
        assert recall_at_n(preds, {"a": [gt()]}, 10) == 1.0
        assert recall_at_n(preds, {"a": [gt(), gt(p=3)]}, 10) == 0.5

    def test_pools_across_images(self):
        gts = {"a": [gt()], "b": [gt(), gt(p=1)]}
        preds = {"a": [pred(S, O, 0, 0.5, "a")], "b": [pred(S, O, 1, 0.5, "b")]}
        assert recall_at_n(preds, gts, 5) == pytest.approx(2 / 3)


class TestAP:
    def test_single_correct(self):
        assert average_precision([pred(S, O, 0, 0.9)], {"a": [gt()]}) == 1.0

    def test_wrong_then_right(self):
        preds = [pred(FAR, O, 0, 0.9), pred(S, O, 0, 0.5)]
        assert average_precision(preds, {"a": [gt()]}) == 0.5

    def test_nothing_correct(self):
        assert average_precision([pred(FAR, O, 0, 0.9)], {"a": [gt()]}) == 0.0

    def test_duplicate_is_false_positive(self):
        # second copy finds the GT consumed: precision 1 at recall 1 already reached
        preds = [pred(S, O, 0, 0.9), pred(S, O, 0, 0.8)]
        assert average_precision(preds, {"a": [gt()]}) == 1.0
        gts = {"a": [gt(), gt(FAR, FAR)]}
        # TP, FP: recall .5 at precision 1, never reaches 1
        assert average_precision(preds, gts) == 0.5

    def test_interpolated_envelope(self):
        # TP, FP, TP over 2 GTs: precision 1, .5, 2/3 -> 0.5 * 1 + 0.5 * 2/3
        gts = {"a": [gt(), gt(FAR, FAR)]}
        preds = [pred(S, O, 0, 0.9), pred(O, S, 0, 0.8), pred(FAR, FAR, 0, 0.7)]
        assert average_precision(preds, gts) == pytest.approx(5 / 6, abs=1e-15)


class TestAPRole:
    def test_perfect(self):
        assert ap_role([pred(S, O, 0, 0.9)], {"a": [gt()]}).mean == 1.0

    def test_two_verbs(self):
        r = ap_role([pred(S, O, 0, 0.9)], {"a": [gt(p=0), gt(p=1)]})
        assert r.per_class == {0: 1.0, 1: 0.0}
        assert r.mean == 0.5

    def test_three_verb_micro_case(self):
        gts = {"a": [gt(p=0), gt(p=1), gt(p=2)], "b": [gt(p=1)]}
        preds = [
            pred(S, O, 0, 0.95, "a"),
            pred(S, O, 1, 0.9, "a"),
            pred(FAR, O, 1, 0.8, "b"),
            pred(S, O, 1, 0.7, "b"),
            pred(FAR, O, 2, 0.6, "a"),
            pred(S, O, 9, 0.6, "a"),
        ]
        r = ap_role(preds, gts)
        assert r.per_class[0] == 1.0
        assert r.per_class[1] == pytest.approx(5 / 6, abs=1e-15)
        assert r.per_class[2] == 0.0
        assert r.mean == pytest.approx(11 / 18, abs=1e-15)
        assert r.excluded == (9,)


class TestHico:
    def test_single_category_modes_agree(self):
        gts = {"a": [gt(ocls=1)], "b": [gt(ocls=1)]}
        preds = [pred(S, O, 0, 0.9, "a", 1), pred(FAR, O, 0, 0.8, "b", 1), pred(S, O, 0, 0.7, "b", 1)]
        d = hico_map(preds, gts, MapMode.DEFAULT)
        k = hico_map(preds, gts, MapMode.KNOWN_OBJECTS)
        assert d.mean == k.mean

    def test_known_objects_drops_wrong_category_images(self):
        gts = {"a": [gt(ocls=1)], "b": [gt(ocls=2)]}
        preds = [
            pred(S, O, 0, 0.9, "b", 1),  # image b holds no category-1 object
            pred(S, O, 0, 0.8, "a", 1),
            pred(S, O, 0, 0.7, "b", 2),
        ]
        d = hico_map(preds, gts, MapMode.DEFAULT)
        k = hico_map(preds, gts, MapMode.KNOWN_OBJECTS)
        assert d.per_class == {(0, 1): 0.5, (0, 2): 1.0}
        assert k.per_class == {(0, 1): 1.0, (0, 2): 1.0}
        assert d.mean == 0.75 and k.mean == 1.0

    def test_empty_predictions(self):
        assert hico_map([], {"a": [gt(ocls=1)]}).mean == 0.0


def test_predicate_top_k():
    preds = [pred(S, O, p, 1.0 - p / 100) for p in range(70)]
    assert len(filter_predicate_top_k(preds, 70)) == 70
    kept = filter_predicate_top_k(preds, 1)
    assert [p.predicate for p in kept] == [0]


def test_report_shape():
    r = metrics_report("recall@50", EvalConfig(n=50), 0.25)
    assert r["convention"] == "all-point"
    assert r["config"]["n"] == 50 and r["value"] == 0.25
    with pytest.raises(ValueError):
        EvalConfig(n=0)


@st.composite
def eval_case(draw):
    n_img = draw(st.integers(1, 3))
    gts, preds = {}, []
    for i in range(n_img):
        k = str(i)
        gts[k] = [gt(p=draw(st.integers(0, 2))) for _ in range(draw(st.integers(0, 3)))]
        for _ in range(draw(st.integers(0, 6))):
            sb = S if draw(st.booleans()) else FAR
            preds.append(pred(sb, O, draw(st.integers(0, 2)),
                              draw(st.floats(0.01, 1.0)), k))
    return gts, preds


@settings(max_examples=60, deadline=None)
@given(eval_case())
def test_recall_monotone_in_n(case):
    gts, preds = case
    by = group_by_image(preds)
    rs = [recall_at_n(by, gts, n) for n in (1, 2, 5, 50, 100)]
    assert all(a <= b for a, b in zip(rs, rs[1:]))
    assert 0.0 <= rs[-1] <= 1.0


@settings(max_examples=60, deadline=None)
@given(eval_case())
def test_ap_rank_only(case):
    gts, preds = case
    ap = average_precision(preds, gts)
    assert 0.0 <= ap <= 1.0
    warped = [pred(p.subject_box, p.object_box, p.predicate, np.exp(3 * p.score) - 0.5, p.image_id)
              for p in preds]
    assert average_precision(warped, gts) == ap
