"""
Gradient-check suite: every primitive, every loss and the composed model
against central finite differences on a tiny configuration.

Each case is a function of a numpy Generator returning the max relative
error; the suite reports one entry per case and flags those above the
tolerance.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from deepcat import numerics as nx
from deepcat.corpus import PAD_ID, cosine_normalize
from deepcat.loss import matrix_approx_loss, overall_loss, sigmoid_cross_entropy
from deepcat.models import Ablation, CMMode, LossConfig, ModelConfig
from deepcat.network import (
    ATTENTION_PARAMS,
    ModelParams,
    attention_pool,
    estimate_category_cm,
    forward,
    highway,
    init_params,
    multi_head_self_attention,
    param_shapes,
    query2vector,
    weighted_word_rep,
)
from deepcat.numerics import Tensor, finite_diff_check, make_rng

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
RELU_MARGIN = 1e-3
KINK_TOL = 1e-6

Case = Callable[[np.random.Generator], float]


def tiny_model_config() -> ModelConfig:
    return ModelConfig(vocab_size=20, num_categories=5, embed_dim=8, max_len=6,
                       num_heads=2, head_dim=4, init_scale=0.5)


def tiny_batch(cfg: ModelConfig) -> tuple:
    """Three queries with 6, 3 and 1 real tokens, and multi-hot labels."""
    tokens = np.array([
        [2, 3, 4, 5, 6, 7],
        [8, 9, 10, PAD_ID, PAD_ID, PAD_ID],
        [11, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID],
    ])[:, :cfg.max_len]
    labels = np.zeros((3, cfg.num_categories))
    labels[0, [0, 1]] = 1.0
    labels[1, 2] = 1.0
    labels[2, [1, 3, 4]] = 1.0
    return tokens, labels


def tiny_cm(labels: np.ndarray) -> np.ndarray:
    y = labels.astype(np.int64)
    return cosine_normalize(y.T @ y)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = RELU_MARGIN) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + 0.1), x)


# --- primitive cases ----------------------------------------------------------

def _primitive_cases() -> Dict[str, Case]:
    def unary(op, shape=(3, 4)):
        def case(rng):
            w = rng.normal(size=shape)
            return finite_diff_check(lambda x: nx.sum(op(x) * w), rng.normal(size=shape))
        return case

    def binary(op, shape_a, shape_b):
        def case(rng):
            other = Tensor(rng.normal(size=shape_b))
            w = rng.normal(size=op(Tensor(np.zeros(shape_a)), Tensor(np.zeros(shape_b))).shape)
            left = finite_diff_check(lambda a: nx.sum(op(a, other) * w), rng.normal(size=shape_a))
            first = Tensor(rng.normal(size=shape_a))
            right = finite_diff_check(lambda b: nx.sum(op(first, b) * w), rng.normal(size=shape_b))
            return max(left, right)
        return case

    def relu_case(rng):
        w = rng.normal(size=(3, 4))
        return finite_diff_check(lambda x: nx.sum(nx.relu(x) * w), _away_from_zero(rng, (3, 4)))

    def softmax_case(rng):
        w = rng.normal(size=(2, 3, 4))
        mask = np.array([[True, True, False, True], [True, False, False, False], [True] * 4])
        return finite_diff_check(lambda x: nx.sum(nx.softmax(x, mask=mask) * w), rng.normal(size=(2, 3, 4)))

    def max_case(rng):
        w = rng.normal(size=(3,))
        return finite_diff_check(lambda x: nx.sum(nx.max(x, axis=1) * w), rng.normal(size=(3, 5)))

    def conv_case(rng):
        x0, w0, b0 = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 3, 4)), rng.normal(size=(4,))
        g = rng.normal(size=(2, 5, 4))
        errs = [
            finite_diff_check(lambda x: nx.sum(nx.conv1d(x, Tensor(w0), Tensor(b0)) * g), x0),
            finite_diff_check(lambda w: nx.sum(nx.conv1d(Tensor(x0), w, Tensor(b0)) * g), w0),
            finite_diff_check(lambda b: nx.sum(nx.conv1d(Tensor(x0), Tensor(w0), b) * g), b0),
        ]
        return max(*errs)

    def dropout_case(rng):
        w = rng.normal(size=(3, 4))
        seed = int(rng.integers(1 << 30))
        return finite_diff_check(lambda x: nx.sum(nx.dropout(x, 0.5, make_rng(seed), True) * w),
                                 rng.normal(size=(3, 4)))

    def embedding_case(rng):
        ids = np.array([[1, 2, 0], [3, 3, 1]])
        w = rng.normal(size=(2, 3, 4))
        return finite_diff_check(lambda t: nx.sum(nx.embedding(t, ids, padding_idx=None) * w),
                                 rng.normal(size=(4, 4)))

    def concat_case(rng):
        other = Tensor(rng.normal(size=(3, 2)))
        w = rng.normal(size=(3, 6))
        return finite_diff_check(lambda x: nx.sum(nx.concat([x, other], axis=1) * w), rng.normal(size=(3, 4)))

    def reshape_case(rng):
        w = rng.normal(size=(2, 6))
        return finite_diff_check(lambda x: nx.sum(nx.reshape(x, (2, 6)) * w), rng.normal(size=(3, 4)))

    def transpose_case(rng):
        w = rng.normal(size=(4, 2, 3))
        return finite_diff_check(lambda x: nx.sum(nx.transpose(x, (2, 0, 1)) * w), rng.normal(size=(2, 3, 4)))

    def sum_mean_case(rng):
        w = rng.normal(size=(4,))
        return max(
            finite_diff_check(lambda x: nx.sum(nx.sum(x, axis=0) * w), rng.normal(size=(3, 4))),
            finite_diff_check(lambda x: nx.sum(nx.mean(x, axis=0) * w), rng.normal(size=(3, 4))),
        )

    def scale_case(rng):
        w = rng.normal(size=(3, 4))
        return finite_diff_check(lambda x: nx.sum(nx.scale(x, -2.5) * w), rng.normal(size=(3, 4)))

    return {
        'primitive/add': binary(nx.add, (3, 4), (4,)),
        'primitive/sub': binary(nx.sub, (3, 4), (3, 1)),
        'primitive/mul': binary(nx.mul, (3, 4), (3, 4)),
        'primitive/matmul': binary(nx.matmul, (2, 3, 4), (4, 5)),
        'primitive/scale': scale_case,
        'primitive/relu': relu_case,
        'primitive/sigmoid': unary(nx.sigmoid),
        'primitive/softplus': unary(nx.softplus),
        'primitive/softmax': softmax_case,
        'primitive/l2_normalize': unary(nx.l2_normalize),
        'primitive/max': max_case,
        'primitive/concat': concat_case,
        'primitive/conv1d': conv_case,
        'primitive/dropout': dropout_case,
        'primitive/embedding': embedding_case,
        'primitive/reshape': reshape_case,
        'primitive/transpose': transpose_case,
        'primitive/sum_mean': sum_mean_case,
    }


# --- loss cases ---------------------------------------------------------------

def _loss_cases() -> Dict[str, Case]:
    def bce(positive_only):
        def case(rng):
            targets = (rng.random((4, 5)) < 0.4).astype(np.float64)
            return finite_diff_check(lambda s: sigmoid_cross_entropy(s, targets, positive_only),
                                     rng.normal(scale=2.0, size=(4, 5)))
        return case

    def cm(mode):
        def case(rng):
            counts = rng.integers(0, 4, size=(5, 5))
            counts = counts + counts.T + np.diag(rng.integers(4, 8, size=5))
            normalized = np.clip(cosine_normalize(counts), 0.0, 1.0)
            return finite_diff_check(lambda c: matrix_approx_loss(c, normalized, mode), rng.normal(size=(5, 5)))
        return case

    def overall(rng):
        cfg = LossConfig(lambda1=0.3, lambda2=0.7)
        l_cm = Tensor(rng.normal())

        def f(x):
            return overall_loss(nx.sum(x * x), l_cm, cfg)

        return finite_diff_check(f, rng.normal(size=(3,)))

    return {
        'loss/sigmoid_cross_entropy': bce(False),
        'loss/sigmoid_cross_entropy_positive_only': bce(True),
        'loss/matrix_approx_literal': cm(CMMode.LITERAL),
        'loss/matrix_approx_shifted': cm(CMMode.SHIFTED),
        'loss/overall': overall,
    }


# --- model cases --------------------------------------------------------------

def _with_param(params: ModelParams, name: str, value: Tensor) -> ModelParams:
    tensors = dict(params.tensors)
    tensors[name] = value
    return ModelParams(params.cfg, tensors)


def check_params(params: ModelParams, loss_fn: Callable[[ModelParams], Tensor],
                 names: Optional[List[str]] = None) -> Dict[str, float]:
    """Max relative error of d loss / d param for each named parameter (PAD row excluded)."""
    errors = {}
    for name in names or params.names():
        base = params[name].data
        if name == 'word_emb':
            pad = Tensor(np.zeros((1, base.shape[1])))

            def f(rest, _pad=pad):
                return loss_fn(_with_param(params, 'word_emb', nx.concat([_pad, rest], axis=0)))

            errors[name] = finite_diff_check(f, base[1:], kink_tol=KINK_TOL)
        else:
            errors[name] = finite_diff_check(lambda t, _n=name: loss_fn(_with_param(params, _n, t)),
                                             base, kink_tol=KINK_TOL)
    return errors


def _model_cases(cfg: ModelConfig) -> Dict[str, Case]:
    tokens, labels = tiny_batch(cfg)
    pad_mask = tokens == PAD_ID
    keep = (~pad_mask)[..., None].astype(np.float64)
    cm = tiny_cm(labels)

    encoder = [n for n in param_shapes(cfg) if n == 'word_emb' or n.startswith(('conv', 'highway'))]
    attention = ['word_emb', 'cat_emb', *ATTENTION_PARAMS]

    def params_for(rng) -> ModelParams:
        return init_params(cfg, int(rng.integers(1 << 30)))

    def component(build, names):
        def case(rng):
            params = params_for(rng)
            w = rng.normal(size=build(params).shape)
            return max(check_params(params, lambda p: nx.sum(build(p) * w), names).values())
        return case

    def q_w(p):
        return nx.embedding(p['word_emb'], tokens, padding_idx=PAD_ID)

    def masked_highway(p):
        # PAD rows are zeroed after the block, as query2vector does
        return highway(p, 0, q_w(p)) * keep

    def g(p):
        return nx.l2_normalize(q_w(p)) @ nx.transpose(nx.l2_normalize(p['cat_emb']), (1, 0))

    def full(mode):
        names = encoder if mode is Ablation.WORD_ONLY else None

        def case(rng):
            params = params_for(rng)
            loss_cfg = LossConfig(lambda1=0.5, lambda2=1.0)

            def loss_fn(p):
                trace = forward(p, tokens, mode, training=False)
                l_pc = sigmoid_cross_entropy(trace.logits, labels)
                if mode is Ablation.JOINT_PLUS_CM:
                    return overall_loss(l_pc, matrix_approx_loss(trace.cm_hat, cm, CMMode.SHIFTED), loss_cfg)
                return l_pc

            return max(check_params(params, loss_fn, names).values())
        return case

    return {
        'model/highway': component(masked_highway,
                                   ['word_emb'] + [n for n in encoder if n.startswith('highway0.')]),
        'model/query2vector': component(lambda p: query2vector(p, q_w(p), pad_mask, training=False), encoder),
        'model/attention': component(lambda p: multi_head_self_attention(p, g(p), pad_mask)[0], attention),
        'model/attention_pool': component(
            lambda p: attention_pool(multi_head_self_attention(p, g(p), pad_mask)[0], pad_mask), attention),
        'model/weighted_word_rep': component(
            lambda p: weighted_word_rep(q_w(p), attention_pool(multi_head_self_attention(p, g(p), pad_mask)[0],
                                                               pad_mask)), attention),
        'model/estimate_category_cm': component(lambda p: estimate_category_cm(p['cat_emb']), ['cat_emb']),
        'model/full_word_only': full(Ablation.WORD_ONLY),
        'model/full_joint': full(Ablation.JOINT),
        'model/full_joint_plus_cm': full(Ablation.JOINT_PLUS_CM),
    }


def default_cases(cfg: Optional[ModelConfig] = None) -> Dict[str, Case]:
    cases = _primitive_cases()
    cases.update(_loss_cases())
    cases.update(_model_cases(cfg or tiny_model_config()))
    return cases


@dataclass
class GradcheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.errors.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def rows(self) -> List[Dict[str, object]]:
        return [{'component': name, 'max_rel_error': err, 'status': 'ok' if err < self.tolerance else 'FAIL'}
                for name, err in self.errors.items()]


def gradient_check_suite(cfg: Optional[ModelConfig] = None, seed: int = 0,
                         cases: Optional[Dict[str, Case]] = None,
                         tolerance: float = TOLERANCE) -> GradcheckReport:
    """Run every case; a case that raises is recorded as an infinite error."""
    cfg = cfg or tiny_model_config()
    if cfg.num_categories > 5 or cfg.embed_dim > 8:
        logger.warning(f"gradient check on |C|={cfg.num_categories}, V={cfg.embed_dim} will be slow")
    report = GradcheckReport(tolerance=tolerance)
    for index, (name, case) in enumerate((cases or default_cases(cfg)).items()):
        try:
            report.errors[name] = float(case(make_rng(seed, 4, index)))
        except Exception as e:  # noqa: BLE001
            logger.error(f"gradient check {name} raised {type(e).__name__}: {e}")
            report.errors[name] = float('inf')
        logger.debug(f"{name}: {report.errors[name]:.3e}")
    return report
