"""
Training loop: Adam, seeded mini-batching with dropout, per-epoch validation
and best-checkpoint selection, and the ablation switch.

    word_only       query encoder only, classification loss
    joint           adds word-category attention
    joint_plus_cm   adds lambda1 * co-occurrence approximation loss
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from deepcat.checkpoint import CHECKPOINT_VERSION, Checkpoint
from deepcat.corpus import PAD_ID, CoocMatrix, Vocabulary, label_matrix, token_matrix
from deepcat.errors import CorpusError, DivergenceError, NonFiniteError, ShapeError
from deepcat.evaluate import macro_micro_f1
from deepcat.loss import matrix_approx_loss, overall_loss, sigmoid_cross_entropy
from deepcat.models import Ablation, CheckpointMeta, ModelConfig, QueryRecord, Taxonomy, TrainConfig
from deepcat.network import ModelParams, forward, init_params, score_queries
from deepcat.numerics import Tensor, make_rng

logger = logging.getLogger(__name__)

BETA1, BETA2, EPSILON = 0.9, 0.999, 1e-8

# rows that never move
FROZEN_ROWS = {'word_emb': PAD_ID}


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> 'AdamState':
        return cls(m={name: np.zeros(t.shape) for name, t in params},
                   v={name: np.zeros(t.shape) for name, t in params})


def adam_step(params: ModelParams, grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Missing gradients count as zero."""
    step = state.step + 1
    m_new, v_new, updated = {}, {}, {}
    for name, t in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros(t.shape)
        elif g.shape != t.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, expected {t.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter '{name}'")
        m = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        m_hat = m / (1.0 - BETA1 ** step)
        v_hat = v / (1.0 - BETA2 ** step)
        update = lr * m_hat / (np.sqrt(v_hat) + EPSILON)
        if name in FROZEN_ROWS:
            update[FROZEN_ROWS[name]] = 0.0
        m_new[name], v_new[name] = m, v
        updated[name] = Tensor(t.data - update, requires_grad=True, name=name)
    return ModelParams(params.cfg, updated), AdamState(m=m_new, v=v_new, step=step)


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: List[Dict[str, Any]] = field(default_factory=list)


class Trainer:
    """Owns the parameters for one run of ``fit``."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, cm: np.ndarray,
                 word_vectors: Optional[np.ndarray] = None, progress: bool = True):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.cm = cm
        self.progress = progress
        self.params = init_params(model_cfg, train_cfg.seed, word_vectors)
        self.state = AdamState.for_params(self.params)

    def batch_loss(self, params: ModelParams, x: np.ndarray, y: np.ndarray,
                   rng: Optional[np.random.Generator], training: bool = True) -> Tuple[Tensor, float, float]:
        """Overall loss plus the (classification, co-occurrence) parts as floats."""
        loss_cfg = self.cfg.loss_cfg
        trace = forward(params, x, self.cfg.ablation, training=training,
                        rate=self.cfg.dropout if training else 0.0, rng=rng)
        l_pc = sigmoid_cross_entropy(trace.logits, y, positive_only=loss_cfg.positive_only)
        if self.cfg.ablation is Ablation.JOINT_PLUS_CM:
            l_cm = matrix_approx_loss(trace.cm_hat, self.cm, loss_cfg.cm_mode)
            return overall_loss(l_pc, l_cm, loss_cfg), l_pc.item(), l_cm.item()
        return l_pc * loss_cfg.lambda2, l_pc.item(), 0.0

    def run_epoch(self, epoch: int, x: np.ndarray, y: np.ndarray) -> Dict[str, float]:
        order = make_rng(self.cfg.seed, 1, epoch).permutation(len(x))
        starts = range(0, len(x), self.cfg.batch_size)
        totals = np.zeros(3)
        bar = tqdm(starts, desc=f"epoch {epoch}", unit='batch', leave=False, disable=not self.progress)
        for step, start in enumerate(bar):
            idx = order[start:start + self.cfg.batch_size]
            rng = make_rng(self.cfg.seed, 2, epoch, step)
            try:
                loss, l_pc, l_cm = self.batch_loss(self.params, x[idx], y[idx], rng)
                loss.backward()
                grads = {name: t.grad for name, t in self.params}
                self.params, self.state = adam_step(self.params, grads, self.state, self.cfg.learning_rate)
            except NonFiniteError as e:
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}: {e}")
            totals += (loss.item(), l_pc, l_cm)
            bar.set_postfix(loss=f"{loss.item():.4f}")
        mean = totals / max(1, len(starts))
        return {'train_loss': float(mean[0]), 'l_pc': float(mean[1]), 'l_cm': float(mean[2])}

    def validate(self, x: np.ndarray, y: np.ndarray) -> Dict[str, float]:
        scores = score_queries(self.params, x, self.cfg.ablation)
        macro, micro = macro_micro_f1(scores, y, self.cfg.threshold)
        return {'valid_macro_f1': macro, 'valid_micro_f1': micro}


def fit(train: Sequence[QueryRecord], valid: Sequence[QueryRecord], vocab: Vocabulary, taxonomy: Taxonomy,
        train_cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None,
        word_vectors: Optional[np.ndarray] = None, log_path: Optional[str] = None,
        progress: bool = True, config_echo: Optional[Dict[str, Any]] = None) -> FitResult:
    """Train for ``train_cfg.epochs`` epochs; keep the epoch with the best validation Micro-F1."""
    if not train:
        raise CorpusError('fit: training split is empty')
    if not valid:
        raise CorpusError('fit: validation split is empty')
    num_categories = taxonomy.num_leaves
    model_cfg = model_cfg or ModelConfig(vocab_size=len(vocab), num_categories=num_categories)
    if model_cfg.vocab_size != len(vocab) or model_cfg.num_categories != num_categories:
        raise CorpusError(f"fit: model sized for vocab {model_cfg.vocab_size} / {model_cfg.num_categories} "
                          f"categories, data has {len(vocab)} / {num_categories}")

    x_train = token_matrix(train, vocab, model_cfg.max_len)
    y_train = label_matrix(train, num_categories)
    x_valid = token_matrix(valid, vocab, model_cfg.max_len)
    y_valid = label_matrix(valid, num_categories)
    cm = CoocMatrix.from_records(train, num_categories).normalized

    trainer = Trainer(model_cfg, train_cfg, cm, word_vectors, progress)
    logger.info(f"training {train_cfg.ablation.value} on {len(train)} queries "
                f"({trainer.params.num_parameters()} parameters, {train_cfg.epochs} epochs)")

    if log_path:
        # one run per log file
        open(log_path, 'w', encoding='utf-8').close()
    log: List[Dict[str, Any]] = []
    best: Optional[Tuple[int, float, ModelParams]] = None
    for epoch in range(1, train_cfg.epochs + 1):
        entry: Dict[str, Any] = {'epoch': epoch, 'ablation': train_cfg.ablation.value}
        entry.update(trainer.run_epoch(epoch, x_train, y_train))
        entry.update(trainer.validate(x_valid, y_valid))
        log.append(entry)
        if log_path:
            _append_log(log_path, entry)
        logger.info(f"epoch {epoch}: loss {entry['train_loss']:.4f}, "
                    f"valid micro-F1 {entry['valid_micro_f1']:.4f}")
        if best is None or entry['valid_micro_f1'] > best[1]:
            best = (epoch, entry['valid_micro_f1'], trainer.params)

    best_epoch, best_f1, best_params = best
    meta = CheckpointMeta(
        format_version=CHECKPOINT_VERSION,
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        vocab_hash=vocab.fingerprint(),
        taxonomy_hash=taxonomy.fingerprint(),
        vocab_tokens=vocab.tokens,
        cm_mode=train_cfg.loss_cfg.cm_mode,
        ablation=train_cfg.ablation,
        best_epoch=best_epoch,
        valid_micro_f1=best_f1,
        config=config_echo or {},
    )
    return FitResult(checkpoint=Checkpoint(params=best_params, meta=meta), log=log)


def _append_log(path: str, entry: Dict[str, Any]) -> None:
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(entry, sort_keys=True) + '\n')
