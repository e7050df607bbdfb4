import numpy as np
import pytest
from scipy import stats

from vrdlab.proposals import ProposalClass as PC
from vrdlab.sampling import (
    NoPositivesError,
    SamplerConfig,
    Strategy,
    assign_weights,
    ohem_select,
    sample_batch,
)


def labels_from_counts(counts):
    return np.concatenate([np.full(n, c, dtype=np.int8) for c, n in enumerate(counts)])


FIXTURE_COUNTS = (4, 300, 120, 40, 20, 6)


def draw_classes(labels, strategy, draws, batch_size=64, seed=0):
    pw = assign_weights(labels, strategy)
    cfg = SamplerConfig(strategy, batch_size=batch_size, seed=seed)
    idx = np.concatenate([sample_batch(pw, cfg, stream=k) for k in range(draws // batch_size)])
    return labels[idx]


class TestAssignWeights:
    def test_bnps_constants(self):
        labels = labels_from_counts(FIXTURE_COUNTS)
        w = assign_weights(labels, Strategy.BNPS).weights
        assert np.all(w[labels == PC.POS] == pytest.approx(0.0625))
        assert np.all(w[labels == PC.NEG1] == pytest.approx(0.0005))
        assert np.all(w[labels == PC.NEG5] == pytest.approx(0.15 / 6))
        assert w.sum() == pytest.approx(1.0)

    def test_rs_uniform_negatives(self):
        labels = labels_from_counts((5, 40, 30, 20, 8, 2))
        w = assign_weights(labels, Strategy.RS).weights
        assert np.all(w[labels != PC.POS] == pytest.approx(0.0075))
        assert np.all(w[labels == PC.POS] == pytest.approx(0.05))

    @pytest.mark.parametrize("strategy,masses", [
        (Strategy.RS, [0.25, 0.75]),
        (Strategy.BNPS, [0.25] + [0.15] * 5),
        (Strategy.BNPS_2CLS, [0.25, 0.375, 0.375]),
        (Strategy.BNPS_3CLS, [0.25, 0.25, 0.25, 0.25]),
        (Strategy.BNPS_3CLS_HN, [0.25, 0.15, 0.15, 0.45]),
    ])
    def test_group_masses(self, strategy, masses):
        pw = assign_weights(labels_from_counts(FIXTURE_COUNTS), strategy)
        np.testing.assert_allclose(pw.group_masses, masses, atol=1e-12)

    def test_equal_weights_within_class(self):
        labels = labels_from_counts(FIXTURE_COUNTS)
        w = assign_weights(labels, Strategy.BNPS_2CLS).weights
        for c in PC:
            assert np.ptp(w[labels == c]) == 0

    def test_empty_negative_class_redistributed(self):
        labels = labels_from_counts((3, 50, 0, 10, 5, 0))
        pw = assign_weights(labels, Strategy.BNPS)
        cm = pw.class_masses(labels)
        assert cm[PC.POS] == pytest.approx(0.25)
        for c in (PC.NEG1, PC.NEG3, PC.NEG4):
            assert cm[c] == pytest.approx(0.25)
        assert cm[PC.NEG2] == 0 and cm[PC.NEG5] == 0

    def test_all_positive_scene(self):
        pw = assign_weights(labels_from_counts((5, 0, 0, 0, 0, 0)), Strategy.BNPS)
        assert pw.weights.sum() == pytest.approx(1.0)

    def test_no_positives(self):
        with pytest.raises(NoPositivesError):
            assign_weights(labels_from_counts((0, 10, 5, 0, 0, 0)), Strategy.BNPS)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(batch_size=0)
        with pytest.raises(ValueError):
            SamplerConfig(positive_ratio=1.0)
        assert SamplerConfig("BNPS-3cls-HN").strategy is Strategy.BNPS_3CLS_HN


class TestSampleBatch:
    def test_size_and_determinism(self):
        labels = labels_from_counts(FIXTURE_COUNTS)
        pw = assign_weights(labels, Strategy.BNPS)
        cfg = SamplerConfig(Strategy.BNPS, seed=42)
        a = sample_batch(pw, cfg, stream=3)
        assert len(a) == 64
        np.testing.assert_array_equal(a, sample_batch(pw, cfg, stream=3))
        assert not np.array_equal(a, sample_batch(pw, cfg, stream=4))

    def test_single_positive_expected_once_in_four(self):
        labels = labels_from_counts((1, 30, 30, 30, 30, 30))
        pw = assign_weights(labels, Strategy.BNPS)
        cfg = SamplerConfig(Strategy.BNPS, batch_size=4, seed=1)
        hits = [np.sum(labels[sample_batch(pw, cfg, stream=k)] == PC.POS) for k in range(20000)]
        # expectation 1, per-batch sd sqrt(4 * .25 * .75); 20k batches -> se 0.006
        assert np.mean(hits) == pytest.approx(1.0, abs=0.03)

    def test_sixteen_positives_per_64(self):
        labels = labels_from_counts(FIXTURE_COUNTS)
        got = draw_classes(labels, Strategy.BNPS, 64 * 2000)
        assert (got == PC.POS).sum() / 2000 == pytest.approx(16.0, abs=0.3)

    def test_without_replacement_when_class_is_large(self):
        labels = labels_from_counts((40, 300, 300, 300, 300, 300))
        pw = assign_weights(labels, Strategy.BNPS)
        idx = sample_batch(pw, SamplerConfig(Strategy.BNPS, seed=5))
        assert len(np.unique(idx)) == len(idx)

    def test_small_class_reuses_members(self):
        labels = labels_from_counts((1, 300, 300, 300, 300, 300))
        pw = assign_weights(labels, Strategy.BNPS)
        idx = sample_batch(pw, SamplerConfig(Strategy.BNPS, seed=5))
        pos = idx[labels[idx] == PC.POS]
        assert len(pos) > 1 and np.all(pos == pos[0])

    def test_bnps_frequencies_and_chi_square(self):
        labels = labels_from_counts(FIXTURE_COUNTS)
        got = draw_classes(labels, Strategy.BNPS, 100_032)
        observed = np.bincount(got, minlength=6)
        expected_p = np.array([0.25] + [0.15] * 5)
        np.testing.assert_allclose(observed / observed.sum(), expected_p, atol=0.02)
        assert stats.chisquare(observed, expected_p * observed.sum()).pvalue > 0.001


class TestOHEM:
    def test_ties_fall_back_to_index_order(self):
        pos = np.array([True, False, False, False, False])
        sel = ohem_select(pos, np.ones(5), batch_size=3, positive_ratio=1 / 3)
        np.testing.assert_array_equal(sel, [0, 1, 2])

    def test_single_hard_negative(self):
        pos = np.array([True, False, False, False])
        sel = ohem_select(pos, np.array([0.0, 0.0, 10.0, 0.0]), batch_size=2, positive_ratio=0.5)
        np.testing.assert_array_equal(sel, [0, 2])

    def test_top_k_by_loss(self):
        pos = np.array([True] + [False] * 5)
        losses = np.array([0.0, 3.0, 5.0, 1.0, 4.0, 2.0])
        sel = ohem_select(pos, losses, batch_size=4)
        np.testing.assert_array_equal(sel, [0, 2, 4, 1])

    def test_quota_and_fill(self):
        rng = np.random.default_rng(0)
        pos = np.zeros(200, dtype=bool)
        pos[:30] = True
        sel = ohem_select(pos, rng.random(200), batch_size=64, seed=3)
        assert len(sel) == 64 and pos[sel].sum() == 16
        few = np.zeros(200, dtype=bool)
        few[:5] = True
        sel = ohem_select(few, rng.random(200), batch_size=64)
        assert few[sel].sum() == 5 and len(sel) == 64

    def test_equal_loss_permutation_invariance(self):
        pos = np.array([True, False, False, False, False, False])
        losses = np.array([0.0, 2.0, 1.0, 2.0, 1.0, 2.0])
        a = set(ohem_select(pos, losses, batch_size=4).tolist())
        perm = np.array([0, 5, 4, 3, 2, 1])
        b = set(perm[ohem_select(pos[perm], losses[perm], batch_size=4)].tolist())
        assert a == b == {0, 1, 3, 5}

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ohem_select(np.array([True, False]), np.array([0.0, np.nan]), 2)
