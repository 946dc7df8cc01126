import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emocenter import evaluation as E
from emocenter.evaluation import ConfusionMatrix, EvalReport

PRIORS = np.array([0.309, 0.199, 0.296, 0.196])


class TestConfusion:
    def test_perfect(self):
        labels = np.array([0, 1, 2, 3, 1, 2])
        cm = E.confusion_matrix(labels, labels, 4)
        np.testing.assert_array_equal(cm.normalized, np.eye(4))
        assert E.ua(cm) == 1.0 and E.wa(labels, labels) == 1.0

    def test_all_first_class(self):
        labels = np.array([0, 1, 2, 3, 3])
        cm = E.confusion_matrix(np.zeros(5, int), labels, 4)
        np.testing.assert_array_equal(cm.normalized[:, 0], 1.0)
        np.testing.assert_array_equal(cm.normalized[:, 1:], 0.0)

    def test_brute_force_counts(self):
        rng = np.random.default_rng(0)
        preds, labels = rng.integers(0, 4, 1000), rng.integers(0, 4, 1000)
        cm = E.confusion_matrix(preds, labels, 4)
        brute = np.zeros((4, 4), int)
        for p, t in zip(preds, labels):
            brute[t][p] += 1
        np.testing.assert_array_equal(cm.counts, brute)
        np.testing.assert_allclose(cm.normalized.sum(axis=1), 1.0, atol=1e-9)

    def test_out_of_range(self):
        with pytest.raises(E.EvaluationError):
            E.confusion_matrix([0, 4], [0, 1], 4)
        with pytest.raises(E.EvaluationError):
            E.confusion_matrix([0, 1], [-1, 1], 4)

    def test_empty_row_flagged(self):
        cm = E.confusion_matrix([0, 1], [0, 1], 3)
        assert cm.empty_rows.tolist() == [False, False, True]
        np.testing.assert_array_equal(cm.normalized[2], 0.0)
        with pytest.raises(E.EmptyClassError):
            E.ua(cm)


class TestPublishedTables:
    # diagonals of the four published confusion matrices; reported UA / WA in percent
    CASES = {
        "1a": ((0.575, 0.691, 0.511, 0.776), 63.80, 61.83),
        "2b": ((0.573, 0.720, 0.518, 0.793), 65.13, 62.96),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_ua_from_diagonal(self, name):
        diag, reported_ua, _ = self.CASES[name]
        assert abs(100 * E.ua(ConfusionMatrix(np.diag(diag))) - reported_ua) < 0.1

    def test_wa_with_priors(self):
        assert E.wa_from_recalls((0.573, 0.720, 0.518, 0.793), PRIORS) == pytest.approx(0.629, abs=5e-4)


class TestIdentities:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 300))
    def test_wa_is_prior_weighted_recall(self, seed, n, m):
        rng = np.random.default_rng(seed)
        labels = np.concatenate([np.arange(n), rng.integers(0, n, m)])
        preds = rng.integers(0, n, labels.size)
        cm = E.confusion_matrix(preds, labels, n)
        priors = np.bincount(labels, minlength=n) / labels.size
        assert abs(E.wa(preds, labels) - E.wa_from_recalls(cm.recalls(), priors)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 40))
    def test_balanced_ua_equals_wa(self, seed, n, per_class):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(n), per_class)
        preds = rng.integers(0, n, labels.size)
        assert abs(E.ua(E.confusion_matrix(preds, labels, n)) - E.wa(preds, labels)) < 1e-12


class TestAverage:
    def test_single_and_identical(self):
        rng = np.random.default_rng(1)
        cm = E.confusion_matrix(rng.integers(0, 3, 50), rng.integers(0, 3, 50), 3)
        np.testing.assert_array_equal(E.average_confusion([cm]).normalized, cm.normalized)
        np.testing.assert_allclose(E.average_confusion([cm, cm]).normalized, cm.normalized, atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        cms = [E.confusion_matrix(rng.integers(0, 4, 80), rng.integers(0, 4, 80), 4) for _ in range(7)]
        np.testing.assert_allclose(E.average_confusion(cms).normalized.sum(axis=1), 1.0, atol=1e-9)

    def test_errors(self):
        with pytest.raises(E.EvaluationError):
            E.average_confusion([])
        with pytest.raises(E.EvaluationError):
            E.average_confusion([ConfusionMatrix(np.eye(2)), ConfusionMatrix(np.eye(3))])


def check_stratified(labels, folds, n_folds=5):
    """Every held-out subset holds each class within one sample of its share."""
    classes, counts = np.unique(labels, return_counts=True)
    n = labels.size
    seen = np.zeros(n, int)
    for f in folds:
        held = np.concatenate([f.dev, f.test])
        seen[held] += 1
        parts = [f.train, f.dev, f.test]
        if len(np.unique(np.concatenate(parts))) != n or sum(map(len, parts)) != n:
            return False
        for c, cnt in zip(classes, counts):
            if abs(np.sum(labels[held] == c) - cnt / n_folds) > 1:
                return False
    return bool(np.all(seen == 1))


class TestCv:
    def test_balanced_hundred(self):
        labels = np.repeat(np.arange(4), 25)
        folds = E.cv_splits(labels, seed=0)
        assert len(folds) == 5
        for f in folds:
            held = np.concatenate([f.dev, f.test])
            assert np.bincount(labels[held], minlength=4).tolist() == [5, 5, 5, 5]
            assert len(f.dev) == 10 and len(f.test) == 10 and len(f.train) == 80

    def test_disjoint_cover(self):
        labels = np.random.default_rng(0).integers(0, 4, 237)
        labels[:40] = np.repeat(np.arange(4), 10)
        for f in E.cv_splits(labels, seed=3):
            all_idx = np.concatenate([f.train, f.dev, f.test])
            assert sorted(all_idx.tolist()) == list(range(237))

    def test_stratified_on_random_datasets(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            n_classes = rng.integers(2, 6)
            counts = rng.integers(10, 80, n_classes)
            labels = rng.permutation(np.repeat(np.arange(n_classes), counts))
            assert check_stratified(labels, E.cv_splits(labels, seed=trial)), trial

    def test_deterministic(self):
        labels = np.repeat(np.arange(3), 20)
        a, b = E.cv_splits(labels, 5), E.cv_splits(labels, 5)
        assert all(np.array_equal(x.test, y.test) and np.array_equal(x.dev, y.dev) for x, y in zip(a, b))
        c = E.cv_splits(labels, 6)
        assert any(not np.array_equal(x.test, y.test) for x, y in zip(a, c))

    def test_class_too_small(self):
        with pytest.raises(E.ClassTooSmallError):
            E.cv_splits(np.array([0] * 20 + [1] * 9), 0)

    def test_repetitions_redraw(self):
        labels = np.repeat(np.arange(4), 15)
        reps = E.repeated_cv_splits(labels, 0, repeats=5)
        assert len(reps) == 5 and all(len(r) == 5 for r in reps)
        firsts = {tuple(r[0].test.tolist()) for r in reps}
        assert len(firsts) > 1


class TestPca:
    def test_line(self):
        t = np.random.default_rng(0).standard_normal(50)
        x = np.outer(t, [1.0, -2.0, 0.5, 3.0]) + 7.0
        res = E.pca_embed(x)
        assert res.explained_variance_ratio[1] < 1e-10
        assert res.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-10)

    def test_isotropic(self):
        x = np.random.default_rng(1).standard_normal((5000, 3))
        ev = E.pca_embed(x, 3).eigenvalues
        assert ev.max() / ev.min() < 1.2

    def test_orthonormal_and_sign(self):
        x = np.random.default_rng(2).standard_normal((200, 8)) @ np.random.default_rng(3).standard_normal((8, 8))
        res = E.pca_embed(x, 2)
        np.testing.assert_allclose(res.components.T @ res.components, np.eye(2), atol=1e-10)
        for k in range(2):
            assert res.components[np.argmax(np.abs(res.components[:, k])), k] > 0
        assert res.coords.shape == (200, 2)

    def test_jacobi_matches_lapack(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((12, 12))
        a = a + a.T
        evals, evecs = E.jacobi_eigh(a)
        np.testing.assert_allclose(evals, np.sort(np.linalg.eigvalsh(a))[::-1], atol=1e-10)
        np.testing.assert_allclose(a @ evecs, evecs * evals, atol=1e-10)

    def test_reconstruction_monotone(self):
        x = np.random.default_rng(5).standard_normal((60, 6)) * np.arange(1, 7)
        errs = [E.reconstruction_error(x, k) for k in range(1, 7)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-20

    def test_degenerate(self):
        with pytest.raises(E.DegenerateFeaturesError):
            E.pca_embed(np.ones((10, 4)))
        with pytest.raises(E.EvaluationError):
            E.pca_embed(np.ones((2, 4)))


def test_compactness_ratio():
    z = np.array([[0.0, 1.0], [0.0, -1.0], [10.0, 1.0], [10.0, -1.0]])
    assert E.compactness_ratio(z, [0, 0, 1, 1]) == pytest.approx(0.1)


def test_report_round_trip():
    rng = np.random.default_rng(0)
    reports = [EvalReport.from_predictions(rng.integers(0, 4, 40), np.tile(np.arange(4), 10),
                                           ("neutral", "angry", "happy", "sad")) for _ in range(3)]
    rep = EvalReport.from_folds(reports)
    text = rep.to_text()
    back = EvalReport.from_text(text)
    assert back.to_text() == text
    assert back.class_names == rep.class_names and len(back.per_fold) == 3
    assert 0 <= back.ua <= 1 and 0 <= back.wa <= 1
