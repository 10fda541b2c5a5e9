"""
TF-IDF bag-of-words with one linear hinge-loss classifier per category.

Features: tf = count / query length, idf = ln((1 + N) / (1 + df)) + 1 from
the training split, L2-normalized. Each class scorer is trained by seeded
stochastic subgradient descent on

    reg/2 * |w|^2 + mean_i max(0, 1 - y_i (w . x_i + b)),   y_i in {-1, +1}

All classes share one example order per epoch and are updated together.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from sklearn.feature_extraction.text import CountVectorizer, TfidfTransformer
from tqdm import tqdm

from deepcat.corpus import label_matrix, tokenize
from deepcat.errors import CheckpointError, CorpusError, EmptyQueryError
from deepcat.fileio import atomic_open
from deepcat.models import BaselineConfig, QueryRecord
from deepcat.numerics import make_rng

logger = logging.getLogger(__name__)

BASELINE_FORMAT = 'deepcat-baseline'
BASELINE_VERSION = 1

# rescale the weight matrix once its decay factor drops below this
MIN_SCALE = 1e-6


class TfidfFeaturizer:
    def __init__(self):
        self.counter = CountVectorizer(tokenizer=tokenize, lowercase=False, token_pattern=None)
        self.transformer = TfidfTransformer(norm='l2', use_idf=True, smooth_idf=True)

    def fit(self, texts: Sequence[str]) -> 'TfidfFeaturizer':
        if not texts:
            raise CorpusError('tfidf: no training texts')
        self.transformer.fit(self.counter.fit_transform(texts))
        return self

    def transform(self, texts: Sequence[str]) -> sp.csr_matrix:
        counts = self.counter.transform(texts).astype(np.float64)
        lengths = np.array([max(1, len(tokenize(t))) for t in texts], dtype=np.float64)
        tf = sp.diags(1.0 / lengths) @ counts
        return sp.csr_matrix(self.transformer.transform(tf))

    @property
    def tokens(self) -> List[str]:
        return self.counter.get_feature_names_out().tolist()

    @property
    def idf(self) -> np.ndarray:
        return np.asarray(self.transformer.idf_)

    @classmethod
    def from_table(cls, tokens: Sequence[str], idf: Sequence[float]) -> 'TfidfFeaturizer':
        featurizer = cls()
        featurizer.counter = CountVectorizer(tokenizer=tokenize, lowercase=False, token_pattern=None,
                                             vocabulary=list(tokens))
        featurizer.transformer.idf_ = np.asarray(idf, dtype=np.float64)
        return featurizer


def tfidf_vectorize(tokens: Sequence[str], featurizer: TfidfFeaturizer) -> sp.csr_matrix:
    """One query (already tokenized) as a 1 x |vocabulary| row."""
    if not tokens:
        raise EmptyQueryError('tfidf_vectorize: empty token list')
    return featurizer.transform([' '.join(tokens)])


@dataclass
class TfidfModel:
    featurizer: TfidfFeaturizer
    weights: np.ndarray  # (features, classes)
    bias: np.ndarray
    flagged: List[int] = field(default_factory=list)

    def decision_function(self, x: sp.spmatrix) -> np.ndarray:
        return np.asarray(x @ self.weights) + self.bias

    def score_texts(self, texts: Sequence[str]) -> np.ndarray:
        return self.decision_function(self.featurizer.transform(texts))


def hinge_subgradient(margins: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """d max(0, 1 - m) / d score per entry; 0 at the hinge point m = 1."""
    return -signs * (margins < 1.0)


def hinge_objective(weights: np.ndarray, bias: np.ndarray, x: sp.spmatrix, y: np.ndarray,
                    reg: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """Objective summed over classes, with one subgradient (zero at the hinge point)."""
    signs = 2.0 * y - 1.0
    margins = signs * (np.asarray(x @ weights) + bias)
    n = x.shape[0]
    value = 0.5 * reg * float((weights ** 2).sum()) + float(np.maximum(0.0, 1.0 - margins).sum()) / n
    coef = hinge_subgradient(margins, signs) / n
    grad_w = reg * weights + np.asarray(x.T @ coef)
    grad_b = coef.sum(axis=0)
    return value, grad_w, grad_b


def train_ovr_linear(x: sp.csr_matrix, y: np.ndarray, cfg: BaselineConfig,
                     featurizer: TfidfFeaturizer, progress: bool = False) -> TfidfModel:
    """Per-class stochastic subgradient descent with a shared, seeded example order."""
    x = sp.csr_matrix(x)
    n, num_features = x.shape
    num_classes = y.shape[1]
    signs = 2.0 * y - 1.0
    flagged = np.flatnonzero(y.sum(axis=0) == 0).tolist()
    if flagged:
        logger.warning(f"baseline: {len(flagged)} classes have no positive example; trained as all-negative")

    # weights = scale * v, so the L2 decay is one multiply per step
    v = np.zeros((num_features, num_classes))
    bias = np.zeros(num_classes)
    scale = 1.0
    decay = 1.0 - cfg.learning_rate * cfg.reg
    for epoch in tqdm(range(cfg.epochs), desc='baseline', disable=not progress, leave=False):
        for i in make_rng(cfg.seed, epoch).permutation(n):
            start, end = x.indptr[i], x.indptr[i + 1]
            cols, vals = x.indices[start:end], x.data[start:end]
            margins = signs[i] * (scale * (vals @ v[cols]) + bias)
            step = -cfg.learning_rate * hinge_subgradient(margins, signs[i])
            scale *= decay
            v[cols] += np.outer(vals, step) / scale
            bias += step
            if scale < MIN_SCALE:
                v *= scale
                scale = 1.0
    return TfidfModel(featurizer=featurizer, weights=v * scale, bias=bias, flagged=flagged)


def predict(model: TfidfModel, x: sp.spmatrix) -> np.ndarray:
    """Raw margins, (N, |C|)."""
    return model.decision_function(x)


def fit_baseline(train: Sequence[QueryRecord], num_categories: int, cfg: BaselineConfig,
                 progress: bool = False) -> TfidfModel:
    texts = [r.raw_text for r in train]
    featurizer = TfidfFeaturizer().fit(texts)
    x = featurizer.transform(texts)
    logger.info(f"baseline: {x.shape[0]} queries, {x.shape[1]} features, {num_categories} classes")
    return train_ovr_linear(x, label_matrix(train, num_categories), cfg, featurizer, progress)


def save_baseline(path: str, model: TfidfModel) -> None:
    payload = {
        'format': BASELINE_FORMAT,
        'version': BASELINE_VERSION,
        'tokens': model.featurizer.tokens,
        'idf': model.featurizer.idf.tolist(),
        'weights': model.weights.T.tolist(),
        'bias': model.bias.tolist(),
        'flagged': model.flagged,
    }
    with atomic_open(path) as f:
        json.dump(payload, f)


def load_baseline(path: str) -> TfidfModel:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"baseline model not found: {path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: unreadable baseline model ({e})")
    if payload.get('format') != BASELINE_FORMAT or payload.get('version') != BASELINE_VERSION:
        raise CheckpointError(f"{path}: not a version {BASELINE_VERSION} '{BASELINE_FORMAT}' file")
    featurizer = TfidfFeaturizer.from_table(payload['tokens'], payload['idf'])
    return TfidfModel(
        featurizer=featurizer,
        weights=np.array(payload['weights'], dtype=np.float64).T.copy(),
        bias=np.array(payload['bias'], dtype=np.float64),
        flagged=list(payload['flagged']),
    )
