"""Classifier and dense-labeler checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dusalab.models import (Classifier, DenseLabeler, classify, dense_classify,
                            mean_iou, predict, train_classifier,
                            train_dense_labeler)
from dusalab.nets import mlp_forward
from dusalab.rng import Rng
from dusalab.worlds import make_seg_world, make_world


@pytest.fixture(scope="module")
def trained_world():
    world = make_world(8, 8, 3)
    clf = train_classifier(world.x_train, world.y_train, 8, Rng(30))
    return world, clf


@pytest.fixture(scope="module")
def trained_seg():
    world = make_seg_world(3)
    dl = train_dense_labeler(world.images_train, world.labels_train,
                             world.n_classes, Rng(31))
    return world, dl


class TestClassify:
    def test_zero_initialized_model_outputs_zero(self):
        clf = Classifier(4, 3, Rng(0))
        np.testing.assert_array_equal(classify(clf, np.ones(4)), np.zeros(3))

    def test_deterministic(self, trained_world):
        _, clf = trained_world
        x = Rng(5).normal((10, 8))
        np.testing.assert_array_equal(classify(clf, x), classify(clf, x))

    def test_dimension_mismatch(self):
        clf = Classifier(4, 3, Rng(0))
        with pytest.raises(ValueError, match="dimension"):
            classify(clf, np.ones(5))

    def test_batch_order_independence(self, trained_world):
        _, clf = trained_world
        x = Rng(6).normal((12, 8))
        batch_logits = classify(clf, x)
        solo = np.stack([classify(clf, xi) for xi in x])
        np.testing.assert_allclose(batch_logits, solo, atol=1e-12)

    def test_source_accuracy(self, trained_world):
        world, clf = trained_world
        acc = (predict(classify(clf, world.x_test)) == world.y_test).mean()
        assert acc >= 0.95


class TestPredict:
    def test_simple(self):
        assert predict(np.array([0.1, 0.9, 0.3])) == 1

    def test_tie_breaks_to_lowest_index(self):
        assert predict(np.zeros(5)) == 0
        assert predict(np.array([0.3, 0.7, 0.7])) == 1

    def test_agrees_with_bruteforce_scan(self):
        rng = Rng(2)
        z = rng.normal((10_000, 7))
        fast = predict(z)
        for i in range(0, 10_000, 997):
            best, best_v = 0, z[i, 0]
            for j in range(7):
                if z[i, j] > best_v:
                    best, best_v = j, z[i, j]
            assert fast[i] == best

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-10, 10),
           scale=st.floats(0.01, 100))
    def test_argmax_invariances(self, seed, shift, scale):
        z = Rng(seed).normal(6)
        base = predict(z)
        assert predict(z + shift) == base
        assert predict(z * scale) == base


class TestTrainClassifier:
    def test_memorizes_single_sample(self):
        x = np.array([[0.5, -1.0]])
        y = np.array([2])
        clf = train_classifier(x, y, 3, Rng(1), epochs=200, batch=1)
        assert predict(classify(clf, x[0])) == 2

    def test_permuted_labels_give_chance_accuracy(self):
        world = make_world(4, 4, 9, n_train=4000, n_test=1000)
        rng = Rng(78)
        y_perm = rng.gen.permutation(world.y_train)
        clf = train_classifier(world.x_train, y_perm, 4, Rng(79), epochs=15)
        acc = (predict(classify(clf, world.x_test)) == world.y_test).mean()
        assert abs(acc - 0.25) <= 0.05

    def test_empty_data_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_classifier(np.zeros((0, 2)), np.zeros(0, dtype=int), 2, Rng(0))

    def test_logit_norms_stay_calibrated(self, trained_world):
        # label smoothing keeps norms at a few units, not tens
        world, clf = trained_world
        norms = np.linalg.norm(classify(clf, world.x_test[:500]), axis=1)
        assert norms.mean() < 8.0


class TestDenseLabeler:
    def test_zero_final_layer_gives_zero_logits(self):
        dl = DenseLabeler(4, 4, 2, 3, Rng(0))
        img = Rng(1).normal((4, 4, 2))
        np.testing.assert_array_equal(dense_classify(dl, img), np.zeros((4, 4, 3)))

    def test_shared_weights_apply_per_cell(self, trained_seg):
        # the labeler is exactly the shared MLP at every cell, so two
        # cells with swapped features (at fixed positions) swap logits
        world, dl = trained_seg
        img = world.images_test[0]
        logits = dense_classify(dl, img)
        for (i, j) in [(0, 0), (3, 5), (7, 7)]:
            row = np.concatenate([img[i, j], dl.pos[i, j]])[None, :]
            direct = mlp_forward(dl.params, row, dl.n_layers)[0]
            np.testing.assert_allclose(logits[i, j], direct, atol=1e-12)

    def test_grid_dimension_mismatch(self):
        dl = DenseLabeler(4, 4, 2, 3, Rng(0))
        with pytest.raises(ValueError, match="grid"):
            dense_classify(dl, np.zeros((4, 5, 2)))

    def test_source_mean_iou(self, trained_seg):
        world, dl = trained_seg
        pred = np.argmax(dense_classify(dl, world.images_test), axis=-1)
        assert mean_iou(pred, world.labels_test, world.n_classes) >= 0.7


class TestMeanIou:
    def test_perfect_prediction(self):
        maps = np.array([[0, 1], [2, 3]])
        assert mean_iou(maps, maps, 4) == 1.0

    def test_half_overlap(self):
        pred = np.array([[0, 0], [1, 1]])
        true = np.array([[0, 1], [0, 1]])
        # class 0: inter 1, union 3; class 1: inter 1, union 3
        assert mean_iou(pred, true, 2) == pytest.approx(1 / 3)

    def test_absent_classes_excluded(self):
        pred = np.zeros((2, 2), dtype=int)
        true = np.zeros((2, 2), dtype=int)
        assert mean_iou(pred, true, 5) == 1.0
