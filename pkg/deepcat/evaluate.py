"""
Evaluation: ranking metrics at K, macro/micro F1, traffic-bucket and
minority-class breakdowns, the L1 (group-level) view, and report files.

Rankings sort scores descending and break ties by ascending category id.
Set-valued decisions are ``sigmoid(score) >= threshold``.
"""

import csv
import json
import logging
import os
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from deepcat.checkpoint import Checkpoint
from deepcat.corpus import category_frequencies, label_matrix, token_matrix
from deepcat.errors import CheckpointError, MetricError
from deepcat.fileio import atomic_open
from deepcat.models import Bucket, EvalConfig, EvalReport, L1Report, QueryRecord, RankAtK, Taxonomy
from deepcat.network import score_queries

logger = logging.getLogger(__name__)


class RankMetrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    ap: float


def rank_categories(scores: np.ndarray) -> np.ndarray:
    """Category ids by descending score, ties by ascending id.

    >>> rank_categories(np.array([0.5, 0.9, 0.5]))
    array([1, 0, 2])
    """
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=-1, kind='stable')


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def ranking_metrics_at_k(ranked: Sequence[int], relevant, k: int) -> RankMetrics:
    """P@K, R@K, F1@K and AP@K for one query.

    AP@K averages the precision at each relevant hit within the top K and
    divides by min(K, |relevant|).

    >>> round(ranking_metrics_at_k([0, 9, 1, 8, 7], {0, 1}, 5).ap, 4)
    0.8333
    """
    relevant = set(int(c) for c in relevant)
    if not relevant:
        raise MetricError('ranking_metrics_at_k: relevant set is empty')
    if k < 1:
        raise MetricError(f"ranking_metrics_at_k: K must be >= 1, got {k}")
    hits, precision_sum = 0, 0.0
    for position, category in enumerate(list(ranked)[:k], start=1):
        if int(category) in relevant:
            hits += 1
            precision_sum += hits / position
    precision = hits / k
    recall = hits / len(relevant)
    return RankMetrics(precision, recall, _f1(precision, recall), precision_sum / min(k, len(relevant)))


def _gold_sets(gold: np.ndarray) -> List[set]:
    return [set(np.flatnonzero(row).tolist()) for row in gold]


def rank_at_k(scores: np.ndarray, gold: np.ndarray, k: int) -> List[RankMetrics]:
    ranked = rank_categories(scores)
    return [ranking_metrics_at_k(r, g, k) for r, g in zip(ranked, _gold_sets(gold))]


def _confusion(scores: np.ndarray, gold: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if scores.shape != gold.shape:
        raise MetricError(f"scores {scores.shape} and gold {gold.shape} differ in shape")
    predicted = expit(scores) >= threshold
    actual = gold > 0
    tp = (predicted & actual).sum(axis=0)
    fp = (predicted & ~actual).sum(axis=0)
    fn = (~predicted & actual).sum(axis=0)
    return tp, fp, fn


def _class_f1(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> np.ndarray:
    denom = 2 * tp + fp + fn
    return np.divide(2.0 * tp, denom, out=np.zeros(tp.shape), where=denom > 0)


def macro_micro_f1(scores: np.ndarray, gold: np.ndarray, threshold: float = 0.5,
                   classes: Optional[Sequence[int]] = None) -> Tuple[float, float]:
    """Macro-F1 over classes present in gold, micro-F1 from pooled counts.

    ``classes`` restricts the macro average to a subset (still only those present in gold).
    """
    if not 0.0 < threshold < 1.0:
        raise MetricError(f"macro_micro_f1: threshold must lie in (0, 1), got {threshold}")
    scores, gold = np.asarray(scores, dtype=np.float64), np.asarray(gold)
    tp, fp, fn = _confusion(scores, gold, threshold)
    per_class = _class_f1(tp, fp, fn)
    present = gold.sum(axis=0) > 0
    if classes is not None:
        subset = np.zeros_like(present)
        subset[list(classes)] = True
        present &= subset
    macro = float(per_class[present].mean()) if present.any() else 0.0
    pooled = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = float(2.0 * tp.sum() / pooled) if pooled > 0 else 0.0
    return macro, micro


def bucket_report(scores: np.ndarray, gold: np.ndarray, buckets: Sequence[Bucket], k: int = 3) -> Dict[str, float]:
    """Mean per-query F1@k inside each bucket; buckets with no queries are left out."""
    per_query = [m.f1 for m in rank_at_k(scores, gold, k)]
    report = {}
    for bucket in Bucket:
        values = [f for f, b in zip(per_query, buckets) if b == bucket]
        if values:
            report[bucket.value] = float(np.mean(values))
    return report


def least_frequent(class_frequencies: np.ndarray, m: int) -> List[int]:
    """Ids of the m smallest frequencies, ties by ascending id."""
    freq = np.asarray(class_frequencies)
    if not 1 <= m <= len(freq):
        raise MetricError(f"minority_report: m={m} outside [1, {len(freq)}]")
    return np.lexsort((np.arange(len(freq)), freq))[:m].tolist()


def minority_report(scores: np.ndarray, gold: np.ndarray, class_frequencies: np.ndarray, m: int,
                    threshold: float = 0.5) -> Optional[float]:
    """Macro-F1 over the m least frequent training classes; None if none of them occurs in gold."""
    classes = least_frequent(class_frequencies, m)
    if not (np.asarray(gold)[:, classes].sum(axis=0) > 0).any():
        return None
    macro, _ = macro_micro_f1(scores, gold, threshold, classes=classes)
    return macro


def project_to_l1(scores: np.ndarray, gold: np.ndarray, taxonomy: Taxonomy) -> Tuple[np.ndarray, np.ndarray]:
    """Group score = max over the group's leaves; gold groups = parents of gold leaves."""
    parents = np.array(taxonomy.parents())
    if scores.shape[1] != len(parents):
        raise MetricError(f"project_to_l1: {scores.shape[1]} score columns for {len(parents)} leaves")
    l1_scores = np.full((scores.shape[0], taxonomy.num_l1), -np.inf)
    l1_gold = np.zeros((gold.shape[0], taxonomy.num_l1))
    for group in range(taxonomy.num_l1):
        members = parents == group
        if members.any():
            l1_scores[:, group] = scores[:, members].max(axis=1)
            l1_gold[:, group] = gold[:, members].max(axis=1)
    return l1_scores, l1_gold


def l1_class_frequencies(train_labels: np.ndarray, taxonomy: Taxonomy) -> np.ndarray:
    _, groups = project_to_l1(np.zeros(train_labels.shape), train_labels, taxonomy)
    return groups.sum(axis=0).astype(np.int64)


def evaluate_scores(scores: np.ndarray, test: Sequence[QueryRecord], taxonomy: Taxonomy, cfg: EvalConfig,
                    train: Sequence[QueryRecord], model: str = 'deepcat',
                    flagged_classes: Sequence[int] = (), config: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Assemble the full report for precomputed (N, |C|) scores."""
    if not test:
        raise MetricError('evaluate: test set is empty')
    num_categories = taxonomy.num_leaves
    gold = label_matrix(test, num_categories)
    if scores.shape != gold.shape:
        raise MetricError(f"evaluate: scores {scores.shape} for {gold.shape[0]} queries x {num_categories} categories")

    at_k = {}
    for k in cfg.ks:
        metrics = rank_at_k(scores, gold, k)
        at_k[str(k)] = RankAtK(
            precision=float(np.mean([m.precision for m in metrics])),
            recall=float(np.mean([m.recall for m in metrics])),
            f1=float(np.mean([m.f1 for m in metrics])),
            map=float(np.mean([m.ap for m in metrics])),
        )
    macro, micro = macro_micro_f1(scores, gold, cfg.threshold)
    train_labels = label_matrix(train, num_categories)
    freq = category_frequencies(train, num_categories)
    m = min(cfg.minority_m, num_categories)

    l1_scores, l1_gold = project_to_l1(scores, gold, taxonomy)
    l1_macro, l1_micro = macro_micro_f1(l1_scores, l1_gold, cfg.threshold)
    l1_map = float(np.mean([x.ap for x in rank_at_k(l1_scores, l1_gold, cfg.l1_map_k)]))
    l1 = L1Report(
        macro_f1=l1_macro,
        micro_f1=l1_micro,
        map_at_k=l1_map,
        k=cfg.l1_map_k,
        minority_macro_f1=minority_report(l1_scores, l1_gold, l1_class_frequencies(train_labels, taxonomy),
                                          min(cfg.minority_m, taxonomy.num_l1), cfg.threshold),
    )

    return EvalReport(
        model=model,
        num_queries=len(test),
        at_k=at_k,
        macro_f1=macro,
        micro_f1=micro,
        bucket_f1=bucket_report(scores, gold, [r.bucket for r in test], cfg.bucket_k),
        bucket_k=cfg.bucket_k,
        minority_m=m,
        minority_macro_f1=minority_report(scores, gold, freq, m, cfg.threshold),
        l1=l1,
        flagged_classes=sorted(int(c) for c in flagged_classes),
        config=config or {},
    )


def evaluate(checkpoint: Checkpoint, test: Sequence[QueryRecord], taxonomy: Taxonomy, cfg: EvalConfig,
             train: Sequence[QueryRecord], config: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Inference-mode forward over ``test`` and the full report."""
    vocab = checkpoint.vocabulary()
    if taxonomy.fingerprint() != checkpoint.meta.taxonomy_hash:
        raise CheckpointError('evaluate: taxonomy hash does not match the checkpoint')
    x = token_matrix(test, vocab, checkpoint.meta.model_cfg.max_len)
    scores = score_queries(checkpoint.params, x, checkpoint.meta.ablation, cfg.batch_size)
    echo = dict(config or {})
    echo.setdefault('checkpoint', {'ablation': checkpoint.meta.ablation.value,
                                   'cm_mode': checkpoint.meta.cm_mode.value,
                                   'best_epoch': checkpoint.meta.best_epoch})
    return evaluate_scores(scores, test, taxonomy, cfg, train,
                           model=f"deepcat/{checkpoint.meta.ablation.value}", config=echo)


# --- report files -------------------------------------------------------------

def report_rows(report: EvalReport) -> List[Tuple[str, Any]]:
    """Flat (metric, value) pairs; absent metrics are omitted."""
    rows: List[Tuple[str, Any]] = [('model', report.model), ('num_queries', report.num_queries)]
    for k, m in report.at_k.items():
        rows += [(f"p@{k}", m.precision), (f"r@{k}", m.recall), (f"f1@{k}", m.f1), (f"map@{k}", m.map)]
    rows += [('macro_f1', report.macro_f1), ('micro_f1', report.micro_f1)]
    for bucket, value in report.bucket_f1.items():
        rows.append((f"{bucket}_f1@{report.bucket_k}", value))
    if report.minority_macro_f1 is not None:
        rows.append((f"minority{report.minority_m}_macro_f1", report.minority_macro_f1))
    if report.l1 is not None:
        rows += [('l1_macro_f1', report.l1.macro_f1), ('l1_micro_f1', report.l1.micro_f1),
                 (f"l1_map@{report.l1.k}", report.l1.map_at_k)]
        if report.l1.minority_macro_f1 is not None:
            rows.append(('l1_minority_macro_f1', report.l1.minority_macro_f1))
    return rows


def write_report(report: EvalReport, path: str) -> str:
    """Write the JSON report and a ``.csv`` companion; returns the CSV path."""
    with atomic_open(path) as f:
        f.write(report.model_dump_json(indent=2) + '\n')
    csv_path = os.path.splitext(path)[0] + '.csv'
    with atomic_open(csv_path) as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['metric', 'value'])
        writer.writerows(report_rows(report))
    return csv_path


def read_report(path: str) -> EvalReport:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return EvalReport.model_validate(json.load(f))
    except FileNotFoundError:
        raise MetricError(f"report not found: {path}")
    except (json.JSONDecodeError, ValueError) as e:
        raise MetricError(f"{path}: not an evaluation report ({e})")


def _cell(value: Any) -> str:
    if value is None:
        return '-'
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> str:
    """Left-aligned first column, right-aligned numbers."""
    cells = [[_cell(row.get(c)) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]

    def line(values: Sequence[str]) -> str:
        parts = [values[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(values[1:], widths[1:])]
        return '  '.join(parts).rstrip()

    out = [line(list(columns)), '  '.join('-' * w for w in widths)]
    out += [line(r) for r in cells]
    return '\n'.join(out)
