"""
Query corpus: taxonomy, synthetic click-log generator, traffic buckets,
stratified test sampling, vocabulary and category co-occurrence.

File formats (JSON lines, first line is a header):

    corpus    {"format": "deepcat-corpus", "version": 1, "config": {...}}
              {"raw_text": "...", "categories": [leaf ids], "frequency": n}
    taxonomy  {"format": "deepcat-taxonomy", "version": 1, "config": {...}}
              {"kind": "l1", "id": i, "name": "..."}
              {"kind": "leaf", "id": j, "name": "...", "parent": i}
"""

import hashlib
import itertools
import logging
import re
from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from deepcat.errors import CorpusError, EmptyQueryError, InsufficientBucketError
from deepcat.fileio import read_jsonl, write_jsonl
from deepcat.models import (
    Bucket,
    CategoryNode,
    GeneratorConfig,
    LeafNode,
    QueryRecord,
    Taxonomy,
    bucket_for,
)
from deepcat.numerics import make_rng

logger = logging.getLogger(__name__)

CORPUS_FORMAT = 'deepcat-corpus'
TAXONOMY_FORMAT = 'deepcat-taxonomy'
FORMAT_VERSION = 1

MAX_QUERY_LEN = 10
PAD_ID, UNK_ID = 0, 1
PAD_TOKEN, UNK_TOKEN = '<pad>', '<unk>'

L1_NAMES = [
    'appliances', 'bath', 'building materials', 'decor', 'doors', 'electrical',
    'flooring', 'hardware', 'heating', 'kitchen', 'lighting', 'lumber', 'outdoor',
    'paint', 'plumbing', 'storage', 'tools', 'windows', 'garden', 'cooling',
    'roofing', 'safety', 'cleaning', 'furniture', 'rugs', 'blinds', 'grills',
    'pool', 'automotive', 'pet', 'holiday', 'fencing', 'concrete',
]

# shared across every category; queries pick these up as noise
FILLER_WORDS = [
    'for', 'with', 'in', 'new', 'set', 'pack', 'inch', 'black', 'white', 'small',
    'large', 'kit', 'home', 'pro', 'steel', 'best', 'mini', 'round', 'light', 'heavy',
]

GROUP_WORDS_PER_L1 = 4
MIN_WORDS_PER_LEAF = 2

LABEL_COUNT_PROBS = [0.45, 0.30, 0.17, 0.08]  # 1..4 labels per query
BUCKET_PROBS = {Bucket.TAIL: 0.45, Bucket.TORSO: 0.40, Bucket.HEAD: 0.15}
QUERY_LENGTHS = {Bucket.TAIL: (3, 10), Bucket.TORSO: (2, 6), Bucket.HEAD: (2, 4)}
NOISE_RATE = {Bucket.TAIL: 0.25, Bucket.TORSO: 0.12, Bucket.HEAD: 0.05}
SOURCE_PROBS = (0.65, 0.25, 0.10)  # leaf words, group words, filler


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation."""
    return [t for t in re.split(r'[\W_]+', text.lower()) if t]


# --- vocabulary ---------------------------------------------------------------

class Vocabulary:
    """Token ids with PAD=0 and UNK=1 reserved."""

    def __init__(self, tokens: Sequence[str], min_freq: int = 2):
        tokens = list(tokens)
        if PAD_TOKEN in tokens or UNK_TOKEN in tokens:
            raise CorpusError('vocabulary tokens collide with reserved PAD/UNK')
        if len(set(tokens)) != len(tokens):
            raise CorpusError('vocabulary tokens must be unique')
        self.min_freq = min_freq
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN] + tokens
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def tokens(self) -> List[str]:
        return self.id_to_token[2:]

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def fingerprint(self) -> str:
        return hashlib.sha256('\n'.join(self.id_to_token).encode('utf-8')).hexdigest()


def build_vocab(records: Sequence[QueryRecord], min_freq: int = 2) -> Vocabulary:
    if not records:
        raise CorpusError('build_vocab: corpus is empty')
    counts = Counter(t for r in records for t in tokenize(r.raw_text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    logger.info(f"vocabulary: {len(kept)} tokens kept of {len(counts)} (min_freq={min_freq})")
    return Vocabulary(kept, min_freq=min_freq)


def encode_query(raw_text: str, vocab: Vocabulary, max_len: int = MAX_QUERY_LEN) -> List[int]:
    """Token ids truncated to ``max_len`` and right-padded with PAD."""
    tokens = tokenize(raw_text)
    if not tokens:
        raise EmptyQueryError(f"query {raw_text!r} has no tokens")
    ids = [vocab.id_of(t) for t in tokens[:max_len]]
    return ids + [PAD_ID] * (max_len - len(ids))


def encode_records(records: Sequence[QueryRecord], vocab: Vocabulary,
                   max_len: int = MAX_QUERY_LEN) -> List[QueryRecord]:
    return [r.model_copy(update={'tokens': encode_query(r.raw_text, vocab, max_len)}) for r in records]


def token_matrix(records: Sequence[QueryRecord], vocab: Vocabulary, max_len: int = MAX_QUERY_LEN) -> np.ndarray:
    rows = [r.tokens if r.tokens is not None else encode_query(r.raw_text, vocab, max_len) for r in records]
    return np.array(rows, dtype=np.int64).reshape(len(rows), max_len)


def label_matrix(records: Sequence[QueryRecord], num_categories: int) -> np.ndarray:
    y = np.zeros((len(records), num_categories), dtype=np.float64)
    for i, r in enumerate(records):
        if r.categories[-1] >= num_categories:
            raise CorpusError(f"record {r.raw_text!r} has category {r.categories[-1]} >= {num_categories}")
        y[i, r.categories] = 1.0
    return y


def category_frequencies(records: Sequence[QueryRecord], num_categories: int) -> np.ndarray:
    """Number of records labelled with each category."""
    return label_matrix(records, num_categories).sum(axis=0).astype(np.int64)


# --- co-occurrence ------------------------------------------------------------

def build_category_cooccurrence(records: Sequence[QueryRecord], num_categories: int) -> np.ndarray:
    """counts[i][j]: records whose label set holds both i and j; counts[i][i]: records holding i."""
    y = label_matrix(records, num_categories).astype(np.int64)
    return y.T @ y


def cosine_normalize(counts: np.ndarray) -> np.ndarray:
    """counts[i][j] / sqrt(counts[i][i] * counts[j][j]); 0 where either diagonal is 0."""
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise CorpusError(f"cosine_normalize: expected a square matrix, got shape {counts.shape}")
    if not np.array_equal(counts, counts.T):
        raise CorpusError('cosine_normalize: co-occurrence counts must be symmetric')
    if (counts < 0).any():
        raise CorpusError('cosine_normalize: co-occurrence counts must be non-negative')
    diag = np.diag(counts).astype(np.float64)
    denom = np.sqrt(np.outer(diag, diag))
    normalized = np.divide(counts.astype(np.float64), denom, out=np.zeros(counts.shape), where=denom > 0)
    present = diag > 0
    normalized[present, present] = 1.0
    return normalized


@dataclass(frozen=True)
class CoocMatrix:
    counts: np.ndarray
    normalized: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[QueryRecord], num_categories: int) -> 'CoocMatrix':
        counts = build_category_cooccurrence(records, num_categories)
        return cls(counts=counts, normalized=cosine_normalize(counts))


# --- buckets and splits -------------------------------------------------------

def assign_buckets(frequency_by_query: Mapping[Hashable, int]) -> Dict[Hashable, Bucket]:
    buckets = {}
    for query, frequency in frequency_by_query.items():
        if frequency < 1:
            raise CorpusError(f"query {query!r} has frequency {frequency} < 1")
        buckets[query] = bucket_for(frequency)
    return buckets


def stratified_test_sample(records: Sequence[QueryRecord], per_bucket: int,
                           seed: int) -> Tuple[List[QueryRecord], List[QueryRecord]]:
    """Draw ``per_bucket`` distinct queries from each bucket; return (test, train)."""
    rng = make_rng(seed, 1)
    picked_texts = set()
    for bucket in Bucket:
        distinct: Dict[str, int] = {}
        for i, r in enumerate(records):
            if r.bucket == bucket and r.raw_text not in distinct:
                distinct[r.raw_text] = i
        if len(distinct) < per_bucket:
            raise InsufficientBucketError(bucket.value, len(distinct), per_bucket)
        texts = list(distinct)
        for j in rng.choice(len(texts), size=per_bucket, replace=False):
            picked_texts.add(texts[j])

    test, train = [], []
    for r in records:
        (test if r.raw_text in picked_texts else train).append(r)
    # a sampled text leaves train entirely; its first occurrence is the test row
    seen = set()
    test = [r for r in test if not (r.raw_text in seen or seen.add(r.raw_text))]
    logger.info(f"stratified sample: {len(test)} test, {len(train)} train")
    return test, train


def split_validation(records: Sequence[QueryRecord], fraction: float = 0.25,
                     seed: int = 0) -> Tuple[List[QueryRecord], List[QueryRecord]]:
    """Random hold-out of ``fraction`` of the records; returns (train, valid)."""
    if len(records) < 2:
        raise CorpusError(f"split_validation: need at least 2 records, got {len(records)}")
    n_valid = min(len(records) - 1, max(1, int(round(len(records) * fraction))))
    order = make_rng(seed, 2).permutation(len(records))
    valid_idx = set(order[:n_valid].tolist())
    train = [r for i, r in enumerate(records) if i not in valid_idx]
    valid = [r for i, r in enumerate(records) if i in valid_idx]
    return train, valid


# --- synthetic generator ------------------------------------------------------

def _pseudo_words(count: int, rng: np.random.Generator) -> List[str]:
    consonants, vowels = 'bcdfghjklmnprstvz', 'aeiou'
    syllables = [c + v for c in consonants for v in vowels]
    words: List[str] = []
    for length in (2, 3):
        for combo in itertools.product(syllables, repeat=length):
            word = ''.join(combo)
            if word not in FILLER_WORDS:
                words.append(word)
            if len(words) >= count * 2:
                break
        if len(words) >= count * 2:
            break
    picked = rng.choice(len(words), size=count, replace=False)
    return [words[i] for i in picked]


@dataclass
class GeneratorPlan:
    """Everything about the synthetic world except the queries themselves."""
    taxonomy: Taxonomy
    popularity: np.ndarray
    leaf_words: List[List[str]]
    group_words: List[List[str]]
    children: List[List[int]]


def build_generator_plan(cfg: GeneratorConfig) -> GeneratorPlan:
    needed = len(FILLER_WORDS) + cfg.num_l1 * GROUP_WORDS_PER_L1 + cfg.num_leaves * MIN_WORDS_PER_LEAF
    if cfg.vocab_size < needed:
        raise CorpusError(
            f"vocab_size {cfg.vocab_size} too small: {cfg.num_leaves} distinct leaves "
            f"under {cfg.num_l1} groups need at least {needed} words"
        )
    rng = make_rng(cfg.seed, 0)
    words = _pseudo_words(cfg.vocab_size - len(FILLER_WORDS), rng)

    cursor = 0
    group_words = []
    for _ in range(cfg.num_l1):
        group_words.append(words[cursor:cursor + GROUP_WORDS_PER_L1])
        cursor += GROUP_WORDS_PER_L1
    leaf_words: List[List[str]] = [[] for _ in range(cfg.num_leaves)]
    for i, word in enumerate(words[cursor:]):
        leaf_words[i % cfg.num_leaves].append(word)

    l1_names = [L1_NAMES[i] if i < len(L1_NAMES) else f"group {i}" for i in range(cfg.num_l1)]
    parents = rng.permutation(np.arange(cfg.num_leaves) % cfg.num_l1)
    children: List[List[int]] = [[] for _ in range(cfg.num_l1)]
    for leaf, parent in enumerate(parents):
        children[parent].append(leaf)

    taxonomy = Taxonomy(
        l1_nodes=[CategoryNode(id=i, name=name) for i, name in enumerate(l1_names)],
        leaves=[
            LeafNode(id=j, name=f"{l1_names[p]} / {leaf_words[j][0]}", parent=int(p))
            for j, p in enumerate(parents)
        ],
    )
    ranks = rng.permutation(cfg.num_leaves) + 1
    weights = ranks.astype(np.float64) ** -cfg.zipf_exponent
    return GeneratorPlan(taxonomy, weights / weights.sum(), leaf_words, group_words, children)


def _draw(rng: np.random.Generator, candidates: Sequence[int], popularity: np.ndarray) -> int:
    p = popularity[list(candidates)]
    return int(candidates[rng.choice(len(candidates), p=p / p.sum())])


def sample_label_set(plan: GeneratorPlan, correlation_strength: float, rng: np.random.Generator) -> List[int]:
    """1-4 leaves; after the first, a sibling is preferred with probability ``correlation_strength``."""
    num_leaves = len(plan.popularity)
    k = min(num_leaves, int(rng.choice(4, p=LABEL_COUNT_PROBS)) + 1)
    first = _draw(rng, list(range(num_leaves)), plan.popularity)
    labels = [first]
    siblings_of_first = plan.children[plan.taxonomy.parent_of(first)]
    while len(labels) < k:
        siblings = [c for c in siblings_of_first if c not in labels]
        if siblings and rng.random() < correlation_strength:
            labels.append(_draw(rng, siblings, plan.popularity))
        else:
            others = [c for c in range(num_leaves) if c not in labels]
            labels.append(_draw(rng, others, plan.popularity))
    return labels


def _zipf_pick(rng: np.random.Generator, pool: Sequence[str]) -> str:
    weights = 1.0 / np.arange(1, len(pool) + 1)
    return pool[rng.choice(len(pool), p=weights / weights.sum())]


def _compose_text(plan: GeneratorPlan, labels: List[int], bucket: Bucket, rng: np.random.Generator) -> str:
    low, high = QUERY_LENGTHS[bucket]
    length = int(rng.integers(max(low, len(labels)), high + 1))
    # every label contributes at least one of its own words
    tokens = [_zipf_pick(rng, plan.leaf_words[c]) for c in labels]
    num_leaves = len(plan.leaf_words)
    while len(tokens) < length:
        if rng.random() < NOISE_RATE[bucket]:
            stray = int(rng.integers(num_leaves))
            tokens.append(_zipf_pick(rng, plan.leaf_words[stray]))
            continue
        label = labels[int(rng.integers(len(labels)))]
        source = rng.choice(3, p=SOURCE_PROBS)
        if source == 0:
            tokens.append(_zipf_pick(rng, plan.leaf_words[label]))
        elif source == 1:
            tokens.append(_zipf_pick(rng, plan.group_words[plan.taxonomy.parent_of(label)]))
        else:
            tokens.append(FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))])
    order = rng.permutation(len(tokens))
    return ' '.join(tokens[i] for i in order)


def _draw_frequency(bucket: Bucket, rng: np.random.Generator) -> int:
    if bucket is Bucket.TAIL:
        return 1
    if bucket is Bucket.TORSO:
        return 2 + min(98, int(rng.geometric(0.08)) - 1)
    return 101 + int(rng.geometric(0.005)) - 1


def generate_synthetic_corpus(cfg: GeneratorConfig) -> Tuple[List[QueryRecord], Taxonomy]:
    """Imbalanced multi-label query corpus; deterministic in ``cfg``."""
    plan = build_generator_plan(cfg)
    rng = make_rng(cfg.seed, 1)
    buckets = list(BUCKET_PROBS)
    bucket_p = [BUCKET_PROBS[b] for b in buckets]

    records: List[QueryRecord] = []
    seen = set()
    for _ in range(cfg.num_queries):
        bucket = buckets[int(rng.choice(len(buckets), p=bucket_p))]
        for _attempt in range(20):
            labels = sample_label_set(plan, cfg.correlation_strength, rng)
            text = _compose_text(plan, labels, bucket, rng)
            if text not in seen:
                break
        else:
            raise CorpusError('could not draw distinct queries; increase vocab_size or lower num_queries')
        seen.add(text)
        records.append(QueryRecord(raw_text=text, categories=labels, frequency=_draw_frequency(bucket, rng)))

    counts = Counter(b.value for b in (r.bucket for r in records))
    logger.info(f"generated {len(records)} queries over {cfg.num_leaves} leaves: {dict(counts)}")
    return records, plan.taxonomy


# --- files --------------------------------------------------------------------

def write_corpus(path: str, records: Sequence[QueryRecord], config: Optional[Dict[str, Any]] = None) -> None:
    header = {'format': CORPUS_FORMAT, 'version': FORMAT_VERSION, 'config': config or {}}
    rows = ({'raw_text': r.raw_text, 'categories': r.categories, 'frequency': r.frequency} for r in records)
    write_jsonl(path, header, rows)


def read_corpus(path: str) -> Tuple[List[QueryRecord], Dict[str, Any]]:
    header, rows = read_jsonl(path, CORPUS_FORMAT, FORMAT_VERSION)
    records = []
    for number, row in rows:
        try:
            records.append(QueryRecord.model_validate(row))
        except ValueError as e:
            raise CorpusError(f"{path}:{number}: invalid record: {e}")
    return records, header


def write_taxonomy(path: str, taxonomy: Taxonomy, config: Optional[Dict[str, Any]] = None) -> None:
    header = {'format': TAXONOMY_FORMAT, 'version': FORMAT_VERSION, 'config': config or {}}
    rows = [{'kind': 'l1', 'id': n.id, 'name': n.name} for n in taxonomy.l1_nodes]
    rows += [{'kind': 'leaf', 'id': n.id, 'name': n.name, 'parent': n.parent} for n in taxonomy.leaves]
    write_jsonl(path, header, rows)


def read_taxonomy(path: str) -> Taxonomy:
    _, rows = read_jsonl(path, TAXONOMY_FORMAT, FORMAT_VERSION)
    l1 = [CategoryNode(id=r['id'], name=r['name']) for _, r in rows if r.get('kind') == 'l1']
    leaves = [LeafNode(id=r['id'], name=r['name'], parent=r['parent']) for _, r in rows if r.get('kind') == 'leaf']
    try:
        return Taxonomy(l1_nodes=sorted(l1, key=lambda n: n.id), leaves=sorted(leaves, key=lambda n: n.id))
    except ValueError as e:
        raise CorpusError(f"{path}: invalid taxonomy: {e}")


def corpus_summary(records: Sequence[QueryRecord], num_categories: int) -> Dict[str, Any]:
    freq = category_frequencies(records, num_categories)
    top10 = np.sort(freq)[::-1][:10].sum() / max(1, freq.sum())
    return {
        'queries': len(records),
        'buckets': dict(Counter(r.bucket.value for r in records)),
        'multi_label': sum(len(r.categories) > 1 for r in records),
        'top10_label_share': round(float(top10), 4),
        'empty_categories': int((freq == 0).sum()),
    }
