import csv
import math

import numpy as np
import pytest

from deepcat.corpus import label_matrix
from deepcat.errors import CheckpointError, MetricError
from deepcat.evaluate import (
    bucket_report,
    evaluate,
    evaluate_scores,
    least_frequent,
    macro_micro_f1,
    minority_report,
    project_to_l1,
    rank_at_k,
    rank_categories,
    ranking_metrics_at_k,
    read_report,
    render_table,
    report_rows,
    write_report,
)
from deepcat.models import Bucket, CategoryNode, EvalConfig, LeafNode, Taxonomy
from deepcat.pipeline import evaluate_checkpoint


def _taxonomy(parents, num_l1):
    return Taxonomy(
        l1_nodes=[CategoryNode(id=i, name=f"group{i}") for i in range(num_l1)],
        leaves=[LeafNode(id=i, name=f"leaf{i}", parent=p) for i, p in enumerate(parents)],
    )


def _direct_metrics(scores, relevant, k):
    order = sorted(range(len(scores)), key=lambda c: (-scores[c], c))[:k]
    hits = [c in relevant for c in order]
    precisions = [sum(hits[:i + 1]) / (i + 1) for i, h in enumerate(hits) if h]
    p = sum(hits) / k
    r = sum(hits) / len(relevant)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1, sum(precisions) / min(k, len(relevant))


def _direct_f1(scores, gold, threshold, classes):
    """Counts per class by explicit loops over queries."""
    tp_all = fp_all = fn_all = 0
    per_class = []
    for c in range(len(scores[0])):
        tp = fp = fn = 0
        for s_row, g_row in zip(scores, gold):
            predicted = 1.0 / (1.0 + math.exp(-s_row[c])) >= threshold
            if predicted and g_row[c]:
                tp += 1
            elif predicted:
                fp += 1
            elif g_row[c]:
                fn += 1
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
        if c in classes and tp + fn > 0:
            per_class.append(2 * tp / (2 * tp + fp + fn))
    macro = sum(per_class) / len(per_class) if per_class else 0.0
    pooled = 2 * tp_all + fp_all + fn_all
    return macro, (2 * tp_all / pooled if pooled else 0.0)


class TestRanking:
    def test_worked_example(self):
        m = ranking_metrics_at_k([0, 9, 1, 8, 7], {0, 1}, 5)
        assert m.precision == pytest.approx(0.4)
        assert m.recall == pytest.approx(1.0)
        assert m.f1 == pytest.approx(4 / 7)
        assert m.ap == pytest.approx(0.8333, abs=1e-4)

    def test_ties_break_by_ascending_id(self):
        np.testing.assert_array_equal(rank_categories(np.array([0.5, 0.9, 0.5, 0.9])), [1, 3, 0, 2])

    def test_matches_direct_definition(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            num_categories = int(rng.integers(2, 12))
            k = int(rng.integers(1, num_categories + 1))
            # rounding produces ties on purpose
            scores = np.round(rng.normal(size=(3, num_categories)), 1)
            gold = np.zeros((3, num_categories))
            for row in gold:
                row[rng.choice(num_categories, size=int(rng.integers(1, num_categories + 1)), replace=False)] = 1
            for metrics, s, g in zip(rank_at_k(scores, gold, k), scores, gold):
                expected = _direct_metrics(list(s), set(np.flatnonzero(g).tolist()), k)
                np.testing.assert_allclose(tuple(metrics), expected, atol=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(MetricError):
            ranking_metrics_at_k([0, 1], set(), 1)
        with pytest.raises(MetricError):
            ranking_metrics_at_k([0, 1], {0}, 0)


class TestF1:
    scores = np.array([[2.0, -1.0, 3.0], [-1.0, 1.0, -2.0], [1.0, -1.0, -1.0]])
    gold = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 0]])

    def test_macro_and_micro(self):
        macro, micro = macro_micro_f1(self.scores, self.gold)
        # class 2 never occurs in gold and is left out of the macro average
        assert macro == pytest.approx(0.75)
        assert micro == pytest.approx(4 / 7)

    def test_class_subset(self):
        macro, _ = macro_micro_f1(self.scores, self.gold, classes=[1, 2])
        assert macro == pytest.approx(1.0)

    def test_threshold(self):
        macro, micro = macro_micro_f1(self.scores, self.gold, threshold=0.99)
        assert macro == 0.0 and micro == 0.0

    def test_threshold_applies_to_probability(self):
        # expit(0.4) is about 0.599
        scores, gold = np.array([[0.4]]), np.array([[1]])
        assert macro_micro_f1(scores, gold, threshold=0.59) == (1.0, 1.0)
        assert macro_micro_f1(scores, gold, threshold=0.61) == (0.0, 0.0)

    @pytest.mark.parametrize('threshold', [0.0, 1.0, -0.2, 1.5])
    def test_threshold_outside_unit_interval(self, threshold):
        with pytest.raises(MetricError, match='threshold'):
            macro_micro_f1(self.scores, self.gold, threshold=threshold)

    def test_matches_direct_counts(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            num_queries, num_categories = int(rng.integers(1, 15)), int(rng.integers(1, 11))
            scores = rng.normal(scale=2.0, size=(num_queries, num_categories))
            gold = (rng.random((num_queries, num_categories)) < 0.3).astype(np.int64)
            # some classes never occur in gold
            gold[:, rng.random(num_categories) < 0.3] = 0
            threshold = float(rng.uniform(0.1, 0.9))
            classes = sorted(set(rng.choice(num_categories, size=int(rng.integers(1, num_categories + 1))).tolist()))

            expected = _direct_f1(scores.tolist(), gold.tolist(), threshold, set(range(num_categories)))
            np.testing.assert_allclose(macro_micro_f1(scores, gold, threshold), expected, rtol=0, atol=1e-12)
            expected_subset = _direct_f1(scores.tolist(), gold.tolist(), threshold, set(classes))
            got = macro_micro_f1(scores, gold, threshold, classes=classes)
            np.testing.assert_allclose(got, expected_subset, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            macro_micro_f1(self.scores, self.gold[:, :2])


class TestBreakdowns:
    def test_bucket_report_averages_per_query(self):
        scores = np.array([[3.0, 2.0, 1.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        gold = np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1]])
        report = bucket_report(scores, gold, [Bucket.HEAD, Bucket.TAIL, Bucket.TAIL], k=1)
        assert report == {'head': 1.0, 'tail': 0.5}

    def test_least_frequent(self):
        assert least_frequent(np.array([5, 1, 3, 1]), 2) == [1, 3]
        assert least_frequent(np.array([5, 1, 3, 1]), 3) == [1, 3, 2]
        with pytest.raises(MetricError):
            least_frequent(np.array([1, 2]), 3)

    def test_minority_absent_is_none(self):
        gold = np.array([[1, 0, 0], [1, 0, 0]])
        scores = np.ones((2, 3))
        assert minority_report(scores, gold, np.array([9, 1, 2]), 2) is None
        assert minority_report(scores, gold, np.array([1, 9, 9]), 1) == pytest.approx(1.0)

    def test_project_to_l1(self):
        taxonomy = _taxonomy([0, 0, 1], num_l1=3)
        scores = np.array([[1.0, 3.0, -2.0], [0.0, -1.0, 4.0]])
        gold = np.array([[0, 0, 1], [1, 1, 0]])
        l1_scores, l1_gold = project_to_l1(scores, gold, taxonomy)
        np.testing.assert_array_equal(l1_scores, [[3.0, -2.0, -np.inf], [0.0, 4.0, -np.inf]])
        np.testing.assert_array_equal(l1_gold, [[0, 1, 0], [1, 0, 0]])
        with pytest.raises(MetricError):
            project_to_l1(scores[:, :2], gold[:, :2], taxonomy)


class TestReports:
    def test_perfect_scores(self, tiny_dataset):
        gold = label_matrix(tiny_dataset.test, tiny_dataset.taxonomy.num_leaves)
        scores = np.where(gold > 0, 5.0, -5.0)
        report = evaluate_scores(scores, tiny_dataset.test, tiny_dataset.taxonomy, EvalConfig(),
                                 tiny_dataset.train)
        assert report.num_queries == len(tiny_dataset.test)
        assert sorted(report.at_k) == ['1', '3', '5']
        assert report.macro_f1 == 1.0 and report.micro_f1 == 1.0
        assert all(m.map == pytest.approx(1.0) for m in report.at_k.values())
        assert report.at_k['5'].recall == pytest.approx(1.0)
        assert set(report.bucket_f1) == {b.value for b in Bucket}
        assert report.minority_macro_f1 in (None, 1.0)
        assert report.l1.macro_f1 == 1.0 and report.l1.map_at_k == pytest.approx(1.0)

    def test_empty_test_set(self, tiny_dataset):
        with pytest.raises(MetricError):
            evaluate_scores(np.zeros((0, 8)), [], tiny_dataset.taxonomy, EvalConfig(), tiny_dataset.train)

    def test_checkpoint_report(self, trained_tiny, tiny_dataset):
        report = evaluate_checkpoint(trained_tiny.checkpoint, tiny_dataset, EvalConfig(ks=[1, 3]))
        assert report.model == 'deepcat/joint_plus_cm'
        assert report.num_queries == 30
        assert {'eval', 'train', 'checkpoint'} <= set(report.config)
        valid = evaluate_checkpoint(trained_tiny.checkpoint, tiny_dataset, EvalConfig(), split='valid')
        assert valid.num_queries == len(tiny_dataset.valid)

    def test_checkpoint_taxonomy_must_match(self, trained_tiny, tiny_dataset):
        other = _taxonomy([0] * 8, num_l1=3)
        with pytest.raises(CheckpointError):
            evaluate(trained_tiny.checkpoint, tiny_dataset.test, other, EvalConfig(), tiny_dataset.train)

    def test_write_and_read(self, tmp_path, tiny_dataset):
        gold = label_matrix(tiny_dataset.test, tiny_dataset.taxonomy.num_leaves)
        scores = np.random.default_rng(3).normal(size=gold.shape)
        report = evaluate_scores(scores, tiny_dataset.test, tiny_dataset.taxonomy, EvalConfig(),
                                 tiny_dataset.train, config={'seed': 3})
        path = tmp_path / 'report.json'
        csv_path = write_report(report, str(path))
        assert read_report(str(path)) == report
        with open(csv_path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['metric', 'value']
        assert [r[0] for r in rows[1:]] == [name for name, _ in report_rows(report)]
        assert 'map@5' in [r[0] for r in rows]

    def test_read_errors(self, tmp_path):
        with pytest.raises(MetricError):
            read_report(str(tmp_path / 'missing.json'))
        bad = tmp_path / 'bad.json'
        bad.write_text('{"model": "x"}')
        with pytest.raises(MetricError):
            read_report(str(bad))


def test_render_table():
    rows = [{'configuration': 'word_only', 'macro_f1': 0.5, 'minority': None},
            {'configuration': 'joint', 'macro_f1': 0.61234, 'minority': 0.25}]
    lines = render_table(rows, ['configuration', 'macro_f1', 'minority']).splitlines()
    assert lines[0].split() == ['configuration', 'macro_f1', 'minority']
    assert set(lines[1].replace(' ', '')) == {'-'}
    assert lines[2].split() == ['word_only', '0.5000', '-']
    assert lines[3].split() == ['joint', '0.6123', '0.2500']
