import json

import numpy as np
import pytest
import scipy.sparse as sp

from deepcat.baseline import (
    TfidfFeaturizer,
    fit_baseline,
    hinge_objective,
    hinge_subgradient,
    load_baseline,
    predict,
    save_baseline,
    tfidf_vectorize,
    train_ovr_linear,
)
from deepcat.corpus import label_matrix
from deepcat.errors import CheckpointError, CorpusError, EmptyQueryError
from deepcat.models import BaselineConfig, EvalConfig, QueryRecord
from deepcat.pipeline import run_baseline

TOY = [
    ('red apple', [0]), ('green apple', [0]), ('apple pie', [0]),
    ('cordless drill', [1]), ('drill bits', [1]), ('hammer drill', [1]),
    ('apple drill', [0, 1]),
]


def _records(pairs):
    return [QueryRecord(raw_text=t, categories=c, frequency=1) for t, c in pairs]


class TestTfidf:
    def test_idf_and_tf(self):
        texts = ['apple apple pie', 'apple drill', 'hammer']
        featurizer = TfidfFeaturizer().fit(texts)
        assert featurizer.tokens == ['apple', 'drill', 'hammer', 'pie']
        df = np.array([2, 1, 1, 1])
        np.testing.assert_allclose(featurizer.idf, np.log((1 + 3) / (1 + df)) + 1)

        row = tfidf_vectorize(['apple', 'apple', 'pie'], featurizer).toarray()[0]
        raw = np.array([2 / 3, 0, 0, 1 / 3]) * featurizer.idf
        np.testing.assert_allclose(row, raw / np.linalg.norm(raw))

    def test_unknown_tokens_give_zero_row(self):
        featurizer = TfidfFeaturizer().fit(['apple pie'])
        assert tfidf_vectorize(['zebra'], featurizer).nnz == 0

    def test_empty_inputs(self):
        featurizer = TfidfFeaturizer().fit(['apple pie'])
        with pytest.raises(EmptyQueryError):
            tfidf_vectorize([], featurizer)
        with pytest.raises(CorpusError):
            TfidfFeaturizer().fit([])


class TestHinge:
    def test_subgradient_matches_finite_differences(self, rng):
        x = sp.csr_matrix(rng.normal(size=(6, 4)) * (rng.random((6, 4)) < 0.6))
        y = (rng.random((6, 3)) < 0.5).astype(float)
        w, b = rng.normal(scale=0.3, size=(4, 3)), rng.normal(scale=0.3, size=3)
        _, grad_w, grad_b = hinge_objective(w, b, x, y, reg=0.1)

        eps = 1e-6
        numeric = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            hi, lo = w.copy(), w.copy()
            hi[idx] += eps
            lo[idx] -= eps
            numeric[idx] = (hinge_objective(hi, b, x, y, 0.1)[0] - hinge_objective(lo, b, x, y, 0.1)[0]) / (2 * eps)
        np.testing.assert_allclose(grad_w, numeric, atol=1e-6)
        numeric_b = np.array([(hinge_objective(w, b + eps * e, x, y, 0.1)[0]
                               - hinge_objective(w, b - eps * e, x, y, 0.1)[0]) / (2 * eps) for e in np.eye(3)])
        np.testing.assert_allclose(grad_b, numeric_b, atol=1e-6)

    def test_zero_when_all_margins_satisfied(self):
        x = sp.csr_matrix(np.array([[1.0], [-1.0]]))
        y = np.array([[1.0], [0.0]])
        value, grad_w, grad_b = hinge_objective(np.array([[2.0]]), np.zeros(1), x, y, reg=0.0)
        assert value == 0.0
        np.testing.assert_array_equal(grad_w, 0.0)
        np.testing.assert_array_equal(grad_b, 0.0)


    def test_subgradient_is_zero_at_the_hinge(self):
        margins = np.array([0.5, 1.0, 2.0, -3.0])
        signs = np.array([1.0, 1.0, -1.0, -1.0])
        np.testing.assert_array_equal(hinge_subgradient(margins, signs), [-1.0, 0.0, 0.0, 1.0])

    def test_sgd_step_follows_the_objective(self):
        # one example, no decay: the single step is -lr times the objective's subgradient
        featurizer = TfidfFeaturizer().fit(['red apple'])
        x = featurizer.transform(['red apple'])
        y = np.array([[1.0, 0.0]])
        model = train_ovr_linear(x, y, BaselineConfig(epochs=1, learning_rate=0.1, reg=0.0), featurizer)
        _, grad_w, grad_b = hinge_objective(np.zeros((2, 2)), np.zeros(2), x, y, reg=0.0)
        np.testing.assert_allclose(model.weights, -0.1 * grad_w, atol=1e-15)
        np.testing.assert_allclose(model.bias, -0.1 * grad_b, atol=1e-15)


class TestFitBaseline:
    cfg = BaselineConfig(epochs=30, learning_rate=0.1, reg=1e-4, seed=0)

    def test_separable_toy_data(self):
        model = fit_baseline(_records(TOY), 2, self.cfg)
        scores = model.score_texts(['green apple pie', 'cordless hammer drill'])
        assert scores[0, 0] > 0 > scores[0, 1]
        assert scores[1, 1] > 0 > scores[1, 0]
        np.testing.assert_array_equal(predict(model, model.featurizer.transform(['red apple'])),
                                      model.score_texts(['red apple']))

    def test_separable_toy_data_reaches_zero_hinge_loss(self):
        records = _records(TOY)
        model = fit_baseline(records, 2, BaselineConfig(epochs=500, learning_rate=0.1, reg=0.0, seed=0))
        x = model.featurizer.transform([r.raw_text for r in records])
        value, _, _ = hinge_objective(model.weights, model.bias, x, label_matrix(records, 2), reg=0.0)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_class_without_positives_is_flagged(self):
        model = fit_baseline(_records(TOY), 3, self.cfg)
        assert model.flagged == [2]
        assert (model.score_texts([t for t, _ in TOY])[:, 2] < 0).all()

    def test_deterministic(self):
        a = fit_baseline(_records(TOY), 2, self.cfg)
        b = fit_baseline(_records(TOY), 2, self.cfg)
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)

    def test_save_and_load(self, tmp_path):
        model = fit_baseline(_records(TOY), 2, self.cfg)
        path = tmp_path / 'baseline.json'
        save_baseline(str(path), model)
        loaded = load_baseline(str(path))
        texts = ['apple drill', 'red hammer']
        np.testing.assert_array_equal(loaded.score_texts(texts), model.score_texts(texts))
        assert loaded.flagged == model.flagged

    def test_load_errors(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_baseline(str(tmp_path / 'missing.json'))
        path = tmp_path / 'other.json'
        path.write_text(json.dumps({'format': 'something-else', 'version': 1}))
        with pytest.raises(CheckpointError):
            load_baseline(str(path))
        path.write_text('{not json')
        with pytest.raises(CheckpointError):
            load_baseline(str(path))


def test_run_baseline_report(tmp_path, tiny_dataset):
    model_path = tmp_path / 'baseline.json'
    report = run_baseline(tiny_dataset, BaselineConfig(epochs=3), EvalConfig(), model_path=str(model_path))
    assert report.model == 'tfidf_ovr'
    assert report.num_queries == len(tiny_dataset.test)
    assert 'baseline' in report.config
    assert model_path.exists()
    assert 0.0 <= report.macro_f1 <= 1.0
