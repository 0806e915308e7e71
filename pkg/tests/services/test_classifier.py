import numpy as np
import pytest
from sklearn.svm import SVC

from app.errors import TrainingError
from app.services import classifier as clf
from app.services.augmentation import AugmentedDataset


def clustered_dataset(classes=3, per_class=20, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, 16))
    features = np.concatenate([c + spread * rng.normal(size=(per_class, 16)) for c in centers])
    labels = np.repeat(np.arange(1, classes + 1), per_class)
    return AugmentedDataset(features=features, labels=labels)


class TestBinarySvm:

    @pytest.fixture
    def separable(self):
        rng = np.random.default_rng(3)
        X = np.concatenate([rng.normal(-1.0, 0.3, size=(15, 2)), rng.normal(1.0, 0.3, size=(15, 2))])
        y = np.repeat([-1.0, 1.0], 15)
        return X, y

    def test_xor_is_separated(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        y = np.array([1.0, 1.0, -1.0, -1.0])
        model = clf.train_svm_binary(X, y, C=10.0, gamma=2.0)
        assert np.all(np.sign(model.decision(X)) == y)

    def test_separable_toy_trains_perfectly(self, separable):
        X, y = separable
        model = clf.train_svm_binary(X, y, C=1.0, gamma=0.5)
        assert np.all(np.sign(model.decision(X)) == y)
        assert model.kkt_residual < clf.KKT_TOLERANCE

    def test_dual_feasibility(self, separable):
        X, y = separable
        K = np.exp(-0.5 * np.sum((X[:, None] - X[None]) ** 2, axis=-1))
        alpha, _, _, _ = clf._smo(K, y, 1.0, clf.KKT_TOLERANCE, clf.MAX_ITERATIONS)
        assert np.all((alpha >= 0) & (alpha <= 1.0))
        assert abs(alpha @ y) < 1e-6

    def test_agrees_with_libsvm(self, separable):
        X, y = separable
        model = clf.train_svm_binary(X, y, C=1.0, gamma=0.5)
        reference = SVC(C=1.0, gamma=0.5, kernel="rbf", tol=1e-3).fit(X, y)
        grid = np.random.default_rng(4).uniform(-2, 2, size=(40, 2))
        np.testing.assert_allclose(model.decision(grid), reference.decision_function(grid), atol=0.05)

    def test_free_support_vectors_sit_on_margin(self, separable):
        X, y = separable
        model = clf.train_svm_binary(X, y, C=1.0, gamma=0.5)
        alphas = np.abs(model.coefficients)
        free = (alphas > 1e-6) & (alphas < 1.0 - 1e-6)
        if np.any(free):
            np.testing.assert_allclose(np.abs(model.decision(model.support_vectors[free])), 1.0, atol=1e-2)

    def test_gaussian_blobs(self):
        def blobs(seed):
            rng = np.random.default_rng(seed)
            X = np.concatenate([rng.normal(-3.0, 1.0, size=(100, 2)), rng.normal(3.0, 1.0, size=(100, 2))])
            return X, np.repeat([-1.0, 1.0], 100)

        (X, y), (X_test, y_test) = blobs(20), blobs(21)
        model = clf.train_svm_binary(X, y, C=1.0, gamma=0.5)
        assert model.kkt_residual < clf.KKT_TOLERANCE
        assert np.mean(np.sign(model.decision(X_test)) == y_test) >= 0.99

    def test_decision_is_continuous(self, separable):
        X, y = separable
        model = clf.train_svm_binary(X, y, C=1.0, gamma=0.5)
        x = np.array([0.1, -0.2])
        assert abs(clf.svm_decision(model, x) - clf.svm_decision(model, x + 1e-9)) < 1e-6

    @pytest.mark.parametrize("X, y, C, gamma", [
        (np.zeros((4, 2)), np.ones(4), 1.0, 1.0),
        (np.zeros((4, 2)), np.array([1.0, -1.0, 1.0, -1.0]), 0.0, 1.0),
        (np.zeros((4, 2)), np.array([1.0, -1.0, 1.0, -1.0]), 1.0, -1.0),
        (np.full((2, 2), np.nan), np.array([1.0, -1.0]), 1.0, 1.0),
        (np.zeros((2, 2)), np.array([1.0, 2.0]), 1.0, 1.0),
        (np.zeros((1, 2)), np.array([1.0]), 1.0, 1.0),
    ])
    def test_invalid_training_input(self, X, y, C, gamma):
        with pytest.raises(TrainingError):
            clf.train_svm_binary(X, y, C=C, gamma=gamma)


class TestEcoc:

    def test_twelve_classes_give_66_columns(self):
        encoding = clf.build_ovo_encoding(12)
        assert encoding.shape == (12, 66)
        assert np.all(np.sum(encoding != 0, axis=0) == 2)
        assert np.all(encoding.sum(axis=0) == 0)

    def test_three_class_layout(self):
        assert clf.build_ovo_encoding(3).tolist() == [[1, 1, 0], [-1, 0, 1], [0, -1, -1]]

    def test_single_class_rejected(self):
        with pytest.raises(TrainingError):
            clf.build_ovo_encoding(1)

    def test_decode_losses(self):
        index, losses = clf.decode(clf.build_ovo_encoding(3), np.array([0.7, 2.0, -0.1]))
        assert index.tolist() == [0]
        np.testing.assert_allclose(losses[0], [1 / 6, 5 / 6, 3 / 6])

    def test_zero_decision_votes_negative(self):
        _, zero = clf.decode(clf.build_ovo_encoding(3), np.array([0.0, 0.0, 0.0]))
        _, negative = clf.decode(clf.build_ovo_encoding(3), np.array([-1.0, -1.0, -1.0]))
        np.testing.assert_allclose(zero, negative)

    def test_ties_pick_lowest_index(self):
        index, losses = clf.decode(clf.build_ovo_encoding(3), np.array([1.0, -1.0, 1.0]))
        np.testing.assert_allclose(losses[0], [0.5, 0.5, 0.5])
        assert index.tolist() == [0]

    def test_decode_matches_brute_force_hamming(self):
        rng = np.random.default_rng(12)
        encoding = clf.build_ovo_encoding(12)
        decisions = rng.normal(size=(1000, 66))
        decisions[rng.random(decisions.shape) < 0.1] = 0.0
        index, losses = clf.decode(encoding, decisions)
        L = encoding.shape[1]
        for row, f in enumerate(decisions):
            s = np.where(f > 0, 1, -1)
            cost = [sum(1 if m == 0 else (0 if m == si else 2) for m, si in zip(code, s)) / (2 * L)
                    for code in encoding]
            np.testing.assert_allclose(losses[row], cost, atol=1e-12)
            assert index[row] == int(np.argmin(cost))

    def test_every_binary_meets_kkt_tolerance(self):
        model = clf.train_ecoc(clustered_dataset(classes=4, per_class=15, spread=0.3, seed=5), C=1.0, gamma=0.1)
        assert len(model.binaries) == 6
        assert all(b.kkt_residual < clf.KKT_TOLERANCE for b in model.binaries)

    def test_trains_and_predicts_clusters(self):
        dataset = clustered_dataset()
        model = clf.train_ecoc(dataset, C=10.0, gamma=0.05)
        assert len(model.binaries) == 3
        labels, losses = clf.ecoc_predict_batch(model, dataset.features)
        np.testing.assert_array_equal(labels, dataset.labels)
        assert losses.shape == (60, 3)
        label, single = clf.ecoc_predict(model, dataset.features[25])
        assert label == 2 and single.shape == (3,)

    def test_record_preserves_predictions(self):
        dataset = clustered_dataset(seed=1)
        model = clf.train_ecoc(dataset, C=10.0, gamma=0.05)
        restored = clf.EcocModel.from_record(model.to_record())
        np.testing.assert_allclose(
            clf.ecoc_decision_matrix(restored, dataset.features),
            clf.ecoc_decision_matrix(model, dataset.features),
        )
        assert restored.C == 10.0 and restored.gamma == 0.05

    def test_unknown_schema_version_rejected(self):
        record = clf.train_ecoc(clustered_dataset(classes=2, per_class=5), C=1.0, gamma=0.1).to_record()
        record.schema_version = 99
        with pytest.raises(TrainingError):
            clf.EcocModel.from_record(record)

    def test_missing_class_rejected(self):
        with pytest.raises(TrainingError):
            clf.train_ecoc(clustered_dataset(classes=2, per_class=5), C=1.0, gamma=0.1, labels=[1, 2, 3])

    def test_constant_feature_is_not_scaled(self):
        shift, scale = clf.fit_normalization(np.array([[1.0, 2.0], [1.0, 4.0]]))
        np.testing.assert_allclose(shift, [1.0, 3.0])
        np.testing.assert_allclose(scale, [1.0, 1.0])


class TestHyperparameterSearch:

    @pytest.fixture
    def dataset(self):
        return clustered_dataset(classes=3, per_class=15, spread=0.1, seed=2)

    def test_random_search_is_seeded(self, dataset):
        a = clf.tune_hyperparameters(dataset, budget=3, seed=11)
        b = clf.tune_hyperparameters(dataset, budget=3, seed=11)
        assert (a.C, a.gamma) == (b.C, b.gamma)
        assert len(a.history) == 3
        assert 1e-3 <= a.C <= 1e3 and 1e-3 <= a.gamma <= 1e3
        assert a.score == max(s for _, _, s in a.history)

    def test_bayesian_strategy_runs_past_initial_design(self, dataset):
        result = clf.tune_hyperparameters(dataset, budget=10, strategy="bayesian", seed=3)
        assert len(result.history) == 10
        assert 0.0 <= result.score <= 1.0

    def test_unknown_strategy_rejected(self, dataset):
        with pytest.raises(TrainingError):
            clf.tune_hyperparameters(dataset, budget=1, strategy="grid")

    def test_row_cap_keeps_every_class(self, dataset):
        capped = clf._cap_rows(dataset, 4, np.random.default_rng(0))
        assert len(capped) == 12
        assert capped.classes == [1, 2, 3]

    def test_tiny_classes_score_on_training_rows(self):
        tiny = clustered_dataset(classes=2, per_class=1)
        fit, held = clf.holdout_split(tiny, 0.2, seed=0)
        assert len(fit) == len(held) == 2

    def test_twelve_classes_of_two_rows_score_on_training_rows(self):
        small = clustered_dataset(classes=12, per_class=2)
        fit, held = clf.holdout_split(small, 0.2, seed=0)
        assert len(fit) == len(held) == 24
        result = clf.tune_hyperparameters(small, budget=1, seed=0)
        assert len(result.history) == 1
        assert 0.0 <= result.score <= 1.0
