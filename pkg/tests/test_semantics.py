import numpy as np
import pytest

from terravox import (
    ONTOLOGY_6,
    ONTOLOGY_10,
    ConfigurationError,
    ConfusionMatrix,
    CorruptMaskError,
    InsufficientDataError,
    Ontology,
    RemapTable,
    SparseLabelMask,
    accumulate_confusion,
    class_weights,
    dataset_stats,
    iou_per_class,
    miou,
    remap_mask,
    threshold_prediction,
)
from terravox.fixtures import fixture_path, list_fixtures
from terravox.semantics import (
    NO_PREDICTION,
    UNLABELED,
    load_mask,
    load_remap_table,
    save_mask,
    threshold_scores,
)


def _ours6_table():
    return load_remap_table(fixture_path("remap_ours_to_eval6.yaml"))


class TestOntology:
    def test_canonical_ten(self):
        assert ONTOLOGY_10.classes == (
            "ground", "trail", "grass", "dry_vegetation", "lush_vegetation",
            "trunk", "log", "obstacle_rock", "water", "sky")
        assert ONTOLOGY_10.n_cls == 10

    def test_canonical_six(self):
        assert ONTOLOGY_6.classes == (
            "ground", "grass", "vegetation", "obstacle", "water", "sky")

    def test_index(self):
        assert ONTOLOGY_10.index("water") == 8
        assert "trail" in ONTOLOGY_10
        with pytest.raises(ConfigurationError):
            ONTOLOGY_10.index("lava")

    def test_rejects_duplicates(self):
        with pytest.raises(ConfigurationError):
            Ontology(["a", "a"])
        with pytest.raises(ConfigurationError):
            Ontology(["a"])
        with pytest.raises(ConfigurationError):
            Ontology(["a", ""])


class TestMask:
    def test_rejects_out_of_ontology(self):
        labels = np.full((4, 4), 0, np.uint8)
        labels[0, 0] = 7
        with pytest.raises(CorruptMaskError):
            SparseLabelMask(labels, ONTOLOGY_6)

    def test_unlabeled_is_fine(self):
        m = SparseLabelMask(np.full((4, 4), UNLABELED, np.uint8), ONTOLOGY_6)
        assert m.labeled_fraction() == 0.0

    def test_png_round_trip(self, tmp_path, rng):
        labels = rng.integers(0, 6, (24, 31)).astype(np.uint8)
        labels[rng.random((24, 31)) < 0.4] = UNLABELED
        m = SparseLabelMask(labels, ONTOLOGY_6)
        p = tmp_path / "m.png"
        save_mask(m, p)
        again = load_mask(p, ONTOLOGY_6)
        assert np.array_equal(again.labels, labels)


class TestRemap:
    def test_trail_and_ground_collapse(self):
        labels = np.array([[ONTOLOGY_10.index("trail"), ONTOLOGY_10.index("ground")]],
                          np.uint8)
        out = remap_mask(SparseLabelMask(labels, ONTOLOGY_10), _ours6_table())
        g6 = ONTOLOGY_6.index("ground")
        assert np.array_equal(out.labels, [[g6, g6]])
        assert out.ontology == ONTOLOGY_6

    def test_all_unlabeled_passthrough(self):
        m = SparseLabelMask(np.full((3, 5), UNLABELED, np.uint8), ONTOLOGY_10)
        out = remap_mask(m, _ours6_table())
        assert np.all(out.labels == UNLABELED)
        assert out.labels.shape == (3, 5)

    def test_grouped_counts_oracle(self, rng):
        table = _ours6_table()
        labels = rng.integers(0, 10, (64, 64)).astype(np.uint8)
        labels[rng.random((64, 64)) < 0.3] = UNLABELED
        src = SparseLabelMask(labels, ONTOLOGY_10)
        out = remap_mask(src, table)

        for t in range(6):
            srcs = np.flatnonzero(table.mapping == t)
            want = sum(int((labels == s).sum()) for s in srcs)
            assert int((out.labels == t).sum()) == want, ONTOLOGY_6.classes[t]

    def test_labeled_set_preserved(self, rng):
        labels = rng.integers(0, 10, (32, 32)).astype(np.uint8)
        labels[rng.random((32, 32)) < 0.5] = UNLABELED
        src = SparseLabelMask(labels, ONTOLOGY_10)
        out = remap_mask(src, _ours6_table())
        assert np.array_equal(out.labels == UNLABELED, labels == UNLABELED)

    def test_wrong_source_ontology(self):
        m = SparseLabelMask(np.zeros((2, 2), np.uint8), ONTOLOGY_6)
        with pytest.raises(CorruptMaskError):
            remap_mask(m, _ours6_table())

    def test_from_groups_validation(self):
        with pytest.raises(ConfigurationError):
            RemapTable.from_groups(ONTOLOGY_10, ONTOLOGY_6,
                                   {"ground": ["ground", "ground"]})
        with pytest.raises(ConfigurationError):
            RemapTable.from_groups(ONTOLOGY_10, ONTOLOGY_6, {"ground": ["ground"]})

    def test_bundled_tables_load(self):
        names = list_fixtures()
        for n in ("remap_ours_to_eval6.yaml", "remap_yamaha_to_eval6.yaml",
                  "remap_rellis_to_eval6.yaml"):
            assert n in names
            t = load_remap_table(fixture_path(n))
            assert t.target == ONTOLOGY_6

    def test_missing_fixture(self):
        with pytest.raises(ConfigurationError):
            fixture_path("no_such_file.yaml")


class TestThreshold:
    def test_above_threshold(self):
        scores = np.array([[[0.7, 0.3]]], np.float32)
        assert threshold_prediction(scores, 0.5)[0, 0] == 0

    def test_below_threshold(self):
        scores = np.full((1, 1, 4), 0.2, np.float32)
        assert threshold_prediction(scores, 0.5)[0, 0] == NO_PREDICTION

    def test_tie_breaks_low(self):
        scores = np.array([[[0.5, 0.5, 0.0]]], np.float32)
        assert threshold_prediction(scores, 0.5)[0, 0] == 0

    def test_all_nan_never_predicts(self):
        scores = np.full((2, 2, 3), np.nan, np.float32)
        assert np.all(threshold_prediction(scores, 0.0) == NO_PREDICTION)

    def test_zero_threshold_positive_scores(self, rng):
        scores = rng.uniform(0.01, 1.0, (8, 8, 5)).astype(np.float32)
        pred = threshold_prediction(scores, 0.0)
        assert np.array_equal(pred, scores.argmax(axis=-1).astype(np.int16))

    def test_nan_slots_skipped(self):
        row = np.array([np.nan, 0.4, np.nan, 0.6], np.float32)
        assert threshold_scores(row, 0.5) == 3
        assert threshold_scores(row, 0.7) == NO_PREDICTION

    def test_threshold_validation(self):
        with pytest.raises(ConfigurationError):
            threshold_scores(np.zeros(3), 1.5)


class TestConfusion:
    def test_perfect_hundred(self, rng):
        labels = rng.integers(0, 6, (10, 10)).astype(np.uint8)
        gt = SparseLabelMask(labels, ONTOLOGY_6)
        cm = accumulate_confusion(gt, labels.astype(np.int16))
        assert int(np.diag(cm.counts).sum()) == 100
        assert int(cm.counts.sum()) == 100
        assert cm.ignored == 0

    def test_all_unlabeled(self):
        gt = SparseLabelMask(np.full((5, 5), UNLABELED, np.uint8), ONTOLOGY_6)
        cm = accumulate_confusion(gt, np.zeros((5, 5), np.int16))
        assert not cm.counts.any()
        assert cm.ignored == 0

    def test_matches_pixel_loop(self, rng):
        labels = rng.integers(0, 6, (32, 32)).astype(np.uint8)
        labels[rng.random((32, 32)) < 0.3] = UNLABELED
        pred = rng.integers(-1, 6, (32, 32)).astype(np.int16)
        gt = SparseLabelMask(labels, ONTOLOGY_6)
        cm = accumulate_confusion(gt, pred)

        want = np.zeros((6, 6), np.int64)
        ignored = 0
        for i in range(32):
            for j in range(32):
                g = labels[i, j]
                if g == UNLABELED:
                    continue
                if pred[i, j] < 0:
                    ignored += 1
                else:
                    want[g, pred[i, j]] += 1
        assert np.array_equal(cm.counts, want)
        assert cm.ignored == ignored
        assert int(cm.counts.sum()) + cm.ignored == int((labels != UNLABELED).sum())

    def test_additive_merge(self, rng):
        def rand_case():
            labels = rng.integers(0, 6, (16, 16)).astype(np.uint8)
            labels[rng.random((16, 16)) < 0.2] = UNLABELED
            pred = rng.integers(-1, 6, (16, 16)).astype(np.int16)
            return SparseLabelMask(labels, ONTOLOGY_6), pred

        a_gt, a_pred = rand_case()
        b_gt, b_pred = rand_case()
        ca = accumulate_confusion(a_gt, a_pred)
        cb = accumulate_confusion(b_gt, b_pred)
        both = accumulate_confusion(b_gt, b_pred, accumulate_confusion(a_gt, a_pred))
        merged = ca + cb
        assert np.array_equal(both.counts, merged.counts)
        assert both.ignored == merged.ignored

    def test_dimension_mismatch(self):
        gt = SparseLabelMask(np.zeros((4, 4), np.uint8), ONTOLOGY_6)
        with pytest.raises(ConfigurationError):
            accumulate_confusion(gt, np.zeros((3, 3), np.int16))


class TestIoU:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(4)
        np.fill_diagonal(cm.counts, 25)
        iou = iou_per_class(cm)
        np.testing.assert_array_equal(iou, [100.0] * 4)
        assert miou(cm) == 100.0

    def test_half_iou(self):
        cm = ConfusionMatrix(2)
        cm.counts[0, 0] = 50
        cm.counts[0, 1] = 25  # FN for class 0, FP for class 1
        cm.counts[1, 0] = 25  # FP for class 0, FN for class 1
        assert iou_per_class(cm)[0] == 50.0

    def test_empty_matrix_no_score(self):
        assert miou(ConfusionMatrix(6)) is None

    def test_zero_union_excluded(self):
        cm = ConfusionMatrix(3)
        cm.counts[0, 0] = 10
        iou = iou_per_class(cm)
        assert iou[0] == 100.0
        assert np.isnan(iou[1]) and np.isnan(iou[2])
        assert miou(cm) == 100.0

    def test_permutation_invariance(self, rng):
        cm = ConfusionMatrix(5)
        cm.counts += rng.integers(0, 50, (5, 5))
        perm = rng.permutation(5)
        cm2 = ConfusionMatrix(5)
        cm2.counts = cm.counts[np.ix_(perm, perm)]
        np.testing.assert_allclose(iou_per_class(cm2), iou_per_class(cm)[perm])


class TestDatasetStats:
    def test_single_class_case(self):
        labels = np.full((10, 10), UNLABELED, np.uint8)
        labels.flat[:25] = ONTOLOGY_10.index("ground")
        stats = dataset_stats([SparseLabelMask(labels, ONTOLOGY_10)])
        assert stats.labeled_pct == 25.0
        assert stats.class_share_pct[ONTOLOGY_10.index("ground")] == 100.0

    def test_two_mask_hand_tally(self):
        g = ONTOLOGY_10.index("grass")
        d = ONTOLOGY_10.index("ground")
        a = np.full((10, 10), UNLABELED, np.uint8)
        a.flat[:30] = g
        b = np.full((10, 10), UNLABELED, np.uint8)
        b.flat[:10] = d
        stats = dataset_stats([SparseLabelMask(a, ONTOLOGY_10),
                               SparseLabelMask(b, ONTOLOGY_10)])
        assert stats.n_images == 2
        assert stats.labeled_pct == 20.0
        assert stats.class_share_pct[g] == 75.0
        assert stats.class_share_pct[d] == 25.0

    def test_shares_sum_to_hundred(self, rng):
        masks = []
        for _ in range(4):
            labels = rng.integers(0, 10, (20, 20)).astype(np.uint8)
            labels[rng.random((20, 20)) < 0.5] = UNLABELED
            masks.append(SparseLabelMask(labels, ONTOLOGY_10))
        stats = dataset_stats(masks)
        assert abs(stats.class_share_pct.sum() - 100.0) < 1e-6

    def test_empty_list(self):
        with pytest.raises(InsufficientDataError):
            dataset_stats([])

    def test_mixed_ontologies(self):
        with pytest.raises(ConfigurationError):
            dataset_stats([
                SparseLabelMask(np.zeros((2, 2), np.uint8), ONTOLOGY_10),
                SparseLabelMask(np.zeros((2, 2), np.uint8), ONTOLOGY_6),
            ])


class TestClassWeights:
    def test_uniform_is_unit(self):
        w = class_weights(np.full(5, 20.0))
        np.testing.assert_allclose(w, np.ones(5))

    def test_inverse_frequency_ratio(self):
        w = class_weights(np.array([90.0, 10.0]), floor=0.1)
        # pre-normalization 1/10 vs 1/90: rare/common ratio is exactly 9
        assert abs(w[1] / w[0] - 9.0) < 1e-12

    def test_zero_share_uses_floor(self):
        w = class_weights(np.array([50.0, 50.0, 0.0]), floor=0.1)
        assert np.isfinite(w).all()
        assert w[2] > w[0]

    def test_mean_exactly_one(self, rng):
        for _ in range(20):
            share = rng.random(7)
            share = 100.0 * share / share.sum()
            w = class_weights(share)
            assert abs(w.mean() - 1.0) < 1e-9

    def test_rarer_strictly_larger(self):
        w = class_weights(np.array([60.0, 30.0, 10.0]))
        assert w[2] > w[1] > w[0]

    def test_floor_validation(self):
        with pytest.raises(ConfigurationError):
            class_weights(np.array([50.0, 50.0]), floor=0.0)
