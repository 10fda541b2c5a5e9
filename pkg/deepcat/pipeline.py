"""
End-to-end steps shared by the command-line driver: data generation,
training, evaluation, prediction, the baseline and the ablation study.

Data directory layout written by ``generate_data``:

    corpus.jsonl     every generated query
    taxonomy.jsonl   L1 groups and leaves
    train.jsonl      training portion (test and validation removed)
    valid.jsonl      validation hold-out
    test.jsonl       stratified test sample
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from deepcat.baseline import fit_baseline, save_baseline
from deepcat.checkpoint import Checkpoint
from deepcat.config import resolve
from deepcat.corpus import (
    build_vocab,
    corpus_summary,
    encode_query,
    generate_synthetic_corpus,
    read_corpus,
    read_taxonomy,
    split_validation,
    stratified_test_sample,
    write_corpus,
    write_taxonomy,
)
from deepcat.errors import CheckpointError
from deepcat.evaluate import evaluate, evaluate_scores, rank_categories
from deepcat.fileio import atomic_open
from deepcat.models import (
    Ablation,
    BaselineConfig,
    EvalConfig,
    EvalReport,
    GeneratorConfig,
    ModelConfig,
    QueryRecord,
    SplitConfig,
    Taxonomy,
    TrainConfig,
)
from deepcat.network import load_word_vectors, score_queries
from deepcat.train import FitResult, fit

logger = logging.getLogger(__name__)

SPLIT_FILES = ('corpus', 'taxonomy', 'train', 'valid', 'test')
LAMBDA_SWEEP = (0.0, 0.01, 0.1, 1.0)
ABLATION_LABELS = {
    Ablation.WORD_ONLY: 'Word Rep.',
    Ablation.JOINT: 'Joint Word-Category Rep.',
    Ablation.JOINT_PLUS_CM: '+ L_CM',
}


def data_paths(data_dir: str) -> Dict[str, str]:
    return {name: os.path.join(data_dir, f"{name}.jsonl") for name in SPLIT_FILES}


@dataclass
class Dataset:
    taxonomy: Taxonomy
    train: List[QueryRecord]
    valid: List[QueryRecord]
    test: List[QueryRecord]
    header: Dict[str, Any] = field(default_factory=dict)


def generate_data(gen_cfg: GeneratorConfig, split_cfg: SplitConfig, data_dir: str,
                  config_echo: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Generate, split and write the corpus; returns a summary of what was written."""
    records, taxonomy = generate_synthetic_corpus(gen_cfg)
    test, rest = stratified_test_sample(records, split_cfg.per_bucket, split_cfg.seed)
    train, valid = split_validation(rest, split_cfg.valid_fraction, split_cfg.seed)

    echo = config_echo or {'generator': gen_cfg.model_dump(), 'split': split_cfg.model_dump()}
    paths = data_paths(data_dir)
    write_taxonomy(paths['taxonomy'], taxonomy, echo)
    for name, split in (('corpus', records), ('train', train), ('valid', valid), ('test', test)):
        write_corpus(paths[name], split, {**echo, 'part': name})

    summary = corpus_summary(records, taxonomy.num_leaves)
    summary.update({'train': len(train), 'valid': len(valid), 'test': len(test), 'paths': paths})
    return summary


def load_dataset(data_dir: str) -> Dataset:
    paths = data_paths(data_dir)
    taxonomy = read_taxonomy(paths['taxonomy'])
    train, header = read_corpus(paths['train'])
    valid, _ = read_corpus(paths['valid'])
    test, _ = read_corpus(paths['test'])
    return Dataset(taxonomy=taxonomy, train=train, valid=valid, test=test, header=header)


def model_config_for(dataset: Dataset, vocab_size: int, overrides: Optional[Dict[str, Any]] = None) -> ModelConfig:
    return resolve(ModelConfig, overrides, {'vocab_size': vocab_size, 'num_categories': dataset.taxonomy.num_leaves})


def train_model(dataset: Dataset, train_cfg: TrainConfig, min_freq: int = 2,
                model_overrides: Optional[Dict[str, Any]] = None, vectors_path: Optional[str] = None,
                log_path: Optional[str] = None, progress: bool = True,
                config_echo: Optional[Dict[str, Any]] = None) -> FitResult:
    vocab = build_vocab(dataset.train, min_freq)
    model_cfg = model_config_for(dataset, len(vocab), model_overrides)
    vectors = None
    if vectors_path:
        vectors = load_word_vectors(vectors_path, vocab, model_cfg.embed_dim, train_cfg.seed, model_cfg.init_scale)
    return fit(dataset.train, dataset.valid, vocab, dataset.taxonomy, train_cfg, model_cfg,
               word_vectors=vectors, log_path=log_path, progress=progress, config_echo=config_echo)


def evaluate_checkpoint(checkpoint: Checkpoint, dataset: Dataset, eval_cfg: EvalConfig,
                        split: str = 'test', config_echo: Optional[Dict[str, Any]] = None) -> EvalReport:
    records = dataset.valid if split == 'valid' else dataset.test
    echo = dict(config_echo or {})
    echo.setdefault('eval', eval_cfg.model_dump())
    echo.setdefault('train', checkpoint.meta.train_cfg.model_dump(mode='json'))
    return evaluate(checkpoint, records, dataset.taxonomy, eval_cfg, dataset.train, config=echo)


def predict_texts(checkpoint: Checkpoint, taxonomy: Taxonomy, texts: Sequence[str],
                  k: int = 5) -> List[Tuple[str, List[Tuple[str, float]]]]:
    """Top-k (category name, score) per query; scores are sigmoid probabilities."""
    if taxonomy.fingerprint() != checkpoint.meta.taxonomy_hash:
        raise CheckpointError('predict: taxonomy does not match the one the checkpoint was trained on')
    vocab = checkpoint.vocabulary()
    max_len = checkpoint.meta.model_cfg.max_len
    ids = np.array([encode_query(t, vocab, max_len) for t in texts], dtype=np.int64)
    logits = score_queries(checkpoint.params, ids, checkpoint.meta.ablation)
    probs = expit(logits)
    ranked = rank_categories(logits)[:, :k]
    return [(text, [(taxonomy.leaf_name(int(c)), float(probs[i, c])) for c in ranked[i]])
            for i, text in enumerate(texts)]


def run_baseline(dataset: Dataset, cfg: BaselineConfig, eval_cfg: EvalConfig, model_path: Optional[str] = None,
                 progress: bool = False, config_echo: Optional[Dict[str, Any]] = None) -> EvalReport:
    model = fit_baseline(dataset.train, dataset.taxonomy.num_leaves, cfg, progress)
    if model_path:
        save_baseline(model_path, model)
    scores = model.score_texts([r.raw_text for r in dataset.test])
    echo = dict(config_echo or {})
    echo.setdefault('baseline', cfg.model_dump())
    return evaluate_scores(scores, dataset.test, dataset.taxonomy, eval_cfg, dataset.train,
                           model='tfidf_ovr', flagged_classes=model.flagged, config=echo)


# --- ablation -----------------------------------------------------------------

def ablation_row(name: str, report: EvalReport, lambda1: Optional[float] = None,
                 valid_macro_f1: Optional[float] = None) -> Dict[str, Any]:
    row: Dict[str, Any] = {
        'configuration': name,
        'lambda1': lambda1,
        'valid_macro_f1': valid_macro_f1,
        'macro_f1': report.macro_f1,
        'micro_f1': report.micro_f1,
    }
    for k, metrics in report.at_k.items():
        row[f"map@{k}"] = metrics.map
    for bucket, value in report.bucket_f1.items():
        row[f"{bucket}_f1@{report.bucket_k}"] = value
    row['minority_macro_f1'] = report.minority_macro_f1
    if report.l1 is not None:
        row['l1_macro_f1'] = report.l1.macro_f1
    return row


def add_relative_improvement(rows: List[Dict[str, Any]], metric: str = 'macro_f1') -> None:
    """Fill ``rel_improvement`` on each row as the change vs the row before it."""
    previous = None
    for row in rows:
        value = row.get(metric)
        if previous is not None and value is not None and previous > 0:
            row['rel_improvement'] = f"{(value - previous) / previous * 100:+.1f}%"
        else:
            row['rel_improvement'] = None
        previous = value


class AblationRunner:
    """Trains the three ablation configurations, the lambda1 sweep and the baseline on one corpus and seed."""

    def __init__(self, dataset: Dataset, train_cfg: TrainConfig, eval_cfg: EvalConfig,
                 baseline_cfg: Optional[BaselineConfig] = None, min_freq: int = 2,
                 lambdas: Sequence[float] = LAMBDA_SWEEP, model_overrides: Optional[Dict[str, Any]] = None,
                 quiet: bool = False):
        self.dataset = dataset
        self.train_cfg = train_cfg
        self.eval_cfg = eval_cfg
        self.baseline_cfg = baseline_cfg
        self.min_freq = min_freq
        self.lambdas = list(lambdas)
        self.model_overrides = model_overrides
        self.quiet = quiet
        self.completed = 0
        self._cache: Dict[Tuple[str, float], Tuple[EvalReport, float]] = {}

    def _say(self, message: str) -> None:
        if not self.quiet:
            print(message)

    def run_config(self, ablation: Ablation, lambda1: float) -> Tuple[EvalReport, float]:
        key = (ablation.value, lambda1 if ablation is Ablation.JOINT_PLUS_CM else 0.0)
        if key in self._cache:
            return self._cache[key]
        loss_cfg = self.train_cfg.loss_cfg.model_copy(update={'lambda1': lambda1})
        cfg = self.train_cfg.model_copy(update={'ablation': ablation, 'loss_cfg': loss_cfg})
        self._say(f"🔄 Training {ablation.value} (lambda1={lambda1:g})...")
        result = train_model(self.dataset, cfg, self.min_freq, self.model_overrides, progress=not self.quiet)
        report = evaluate_checkpoint(result.checkpoint, self.dataset, self.eval_cfg)
        valid = evaluate_checkpoint(result.checkpoint, self.dataset, self.eval_cfg, split='valid')
        self._cache[key] = (report, valid.macro_f1)
        self.completed += 1
        self._say(f"  ✅ {ablation.value}: macro-F1 {report.macro_f1:.4f}, micro-F1 {report.micro_f1:.4f}")
        return self._cache[key]

    def run(self) -> Dict[str, List[Dict[str, Any]]]:
        default_lambda = self.train_cfg.loss_cfg.lambda1
        main_rows = []
        for ablation in (Ablation.WORD_ONLY, Ablation.JOINT, Ablation.JOINT_PLUS_CM):
            report, valid_macro = self.run_config(ablation, default_lambda)
            lam = default_lambda if ablation is Ablation.JOINT_PLUS_CM else None
            main_rows.append(ablation_row(ABLATION_LABELS[ablation], report, lam, valid_macro))
        add_relative_improvement(main_rows)

        sweep_rows = []
        for lam in self.lambdas:
            report, valid_macro = self.run_config(Ablation.JOINT_PLUS_CM, lam)
            sweep_rows.append(ablation_row(f"+ L_CM (lambda1={lam:g})", report, lam, valid_macro))

        baseline_rows = []
        if self.baseline_cfg is not None:
            self._say('🔄 Training TF-IDF one-vs-rest baseline...')
            report = run_baseline(self.dataset, self.baseline_cfg, self.eval_cfg)
            baseline_rows.append(ablation_row('TF-IDF one-vs-rest', report))
            self._say(f"  ✅ baseline: macro-F1 {report.macro_f1:.4f}")
        return {'ablation': main_rows, 'lambda_sweep': sweep_rows, 'baseline': baseline_rows}


def write_table(path: str, rows: List[Dict[str, Any]], config_echo: Optional[Dict[str, Any]] = None) -> str:
    """JSON rows plus a CSV companion; returns the CSV path."""
    columns = table_columns(rows)
    with atomic_open(path) as f:
        json.dump({'schema_version': 1, 'rows': rows, 'config': config_echo or {}}, f, indent=2, sort_keys=True)
        f.write('\n')
    csv_path = os.path.splitext(path)[0] + '.csv'
    with atomic_open(csv_path) as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        writer.writerows(rows)
    return csv_path


def table_columns(rows: Sequence[Dict[str, Any]]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return columns

