"""
DeepCAT network.

    token ids ──embed──> q_w ──conv/highway x3──> max over words ──> R_qw
          q_w, cat_emb ──cosine──> G ──multi-head attention──> A_wc
          A_wc ──max over categories, softmax over words──> word weights
          weights · q_w ──> R_wc;  [R_qw ; R_wc] ──linear──> R ──linear──> logits
          cat_emb ──pairwise cosine──> cm_hat

Every function is batched: token ids are (B, n) and every trace field carries
the leading batch axis. Matrices act on row vectors (``x @ W``).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from deepcat import numerics as nx
from deepcat.corpus import PAD_ID, Vocabulary
from deepcat.errors import ConfigError, ShapeError
from deepcat.models import Ablation, ModelConfig
from deepcat.numerics import Tensor, make_rng

logger = logging.getLogger(__name__)

HIGHWAY_GATE_BIAS = -1.0  # starts the layers closer to carrying their input

ATTENTION_PARAMS = ('attn.w_q', 'attn.w_k', 'attn.w_v', 'attn.w_o', 'attn.b_o')
FUSE_PARAMS = ('fuse.w', 'fuse.b')


class ModelParams:
    """Named learnable tensors; the PAD row of ``word_emb`` is held at zero."""

    def __init__(self, cfg: ModelConfig, tensors: Dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors
        expected = param_shapes(cfg)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"ModelParams: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"ModelParams: {name} has shape {tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def names(self) -> List[str]:
        return list(self.tensors)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: Dict[str, np.ndarray]) -> 'ModelParams':
        return cls(cfg, {name: Tensor(arr, requires_grad=True, name=name) for name, arr in arrays.items()})

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, c, dm, k = cfg.embed_dim, cfg.num_categories, cfg.d_model, cfg.kernel_width
    shapes: Dict[str, Tuple[int, ...]] = {
        'word_emb': (cfg.vocab_size, d),
        'cat_emb': (c, d),
    }
    for i in range(cfg.conv_layers):
        shapes[f"conv{i}.w"] = (k, d, d)
        shapes[f"conv{i}.b"] = (d,)
        shapes[f"highway{i}.w_h"] = (d, d)
        shapes[f"highway{i}.b_h"] = (d,)
        shapes[f"highway{i}.w_t"] = (d, d)
        shapes[f"highway{i}.b_t"] = (d,)
    shapes.update({
        'attn.w_q': (c, dm),
        'attn.w_k': (c, dm),
        'attn.w_v': (c, dm),
        'attn.w_o': (dm, c),
        'attn.b_o': (c,),
        'fuse.w': (2 * d, d),
        'fuse.b': (d,),
        'out.w': (d, c),
        'out.b': (c,),
    })
    return shapes


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    fan_out = shape[-1] * (shape[0] if len(shape) == 3 else 1)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: ModelConfig, seed: int, word_vectors: Optional[np.ndarray] = None) -> ModelParams:
    """Random initialization; ``word_vectors`` (vocab x embed_dim) replaces the word table."""
    rng = make_rng(seed, 0)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name in ('word_emb', 'cat_emb'):
            arrays[name] = rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)
        elif name.endswith('.b_t'):
            arrays[name] = np.full(shape, HIGHWAY_GATE_BIAS)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = _glorot(rng, shape)

    if word_vectors is not None:
        if word_vectors.shape != (cfg.vocab_size, cfg.embed_dim):
            raise ShapeError(f"init_params: word vectors {word_vectors.shape} != "
                             f"({cfg.vocab_size}, {cfg.embed_dim})")
        arrays['word_emb'] = np.array(word_vectors, dtype=np.float64)
    arrays['word_emb'][PAD_ID] = 0.0

    norms = np.linalg.norm(arrays['cat_emb'], axis=1)
    if (norms == 0).any():
        raise ConfigError('init_params: category embedding drew an all-zero row')
    return ModelParams.from_arrays(cfg, arrays)


def load_word_vectors(path: str, vocab: Vocabulary, dim: int, seed: int = 0,
                      init_scale: float = 0.05) -> np.ndarray:
    """Plain-text ``token v1 ... vD`` vectors (no header line) aligned to ``vocab``.

    Tokens missing from the file keep a uniform random row; PAD stays zero.
    """
    from gensim.models import KeyedVectors

    kv = KeyedVectors.load_word2vec_format(path, binary=False, no_header=True)
    if kv.vector_size != dim:
        raise ShapeError(f"load_word_vectors: {path} has dimension {kv.vector_size}, expected {dim}")
    table = make_rng(seed, 3).uniform(-init_scale, init_scale, size=(len(vocab), dim))
    hits = 0
    for i, token in enumerate(vocab.id_to_token):
        if token in kv.key_to_index:
            table[i] = kv[token]
            hits += 1
    table[PAD_ID] = 0.0
    logger.info(f"loaded pretrained vectors for {hits}/{len(vocab)} tokens from {path}")
    return table


# --- components ---------------------------------------------------------------

def embed_query(params: ModelParams, token_ids: np.ndarray) -> Tensor:
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ShapeError(f"embed_query: token ids must be (batch, n), got {token_ids.shape}")
    return nx.embedding(params['word_emb'], token_ids, padding_idx=PAD_ID)


def highway(params: ModelParams, layer: int, x: Tensor) -> Tensor:
    """y = t * relu(x W_H + b_H) + (1 - t) * x,  t = sigmoid(x W_T + b_T)."""
    h = nx.relu(x @ params[f"highway{layer}.w_h"] + params[f"highway{layer}.b_h"])
    t = nx.sigmoid(x @ params[f"highway{layer}.w_t"] + params[f"highway{layer}.b_t"])
    return t * h + (1.0 - t) * x


def query2vector(params: ModelParams, q_w: Tensor, pad_mask: np.ndarray, training: bool,
                 rate: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Conv + highway stack, max-pooled over real (non-PAD) positions.

    PAD positions are zeroed after every block, so trailing PAD columns
    look exactly like the convolution's own zero padding.
    """
    keep = (~pad_mask)[..., None].astype(np.float64)
    x = q_w
    for layer in range(params.cfg.conv_layers):
        x = nx.relu(nx.conv1d(x, params[f"conv{layer}.w"], params[f"conv{layer}.b"]))
        x = highway(params, layer, x)
        x = nx.dropout(x, rate, rng, training) * keep
    # activations are >= 0, so the max over zeroed PAD rows is the max over real words
    return nx.max(x, axis=1)


def word_category_similarity(q_w: Tensor, cat_norm: Tensor) -> Tensor:
    """Cosine of every word with every category: (B, n, |C|)."""
    return nx.l2_normalize(q_w) @ nx.transpose(cat_norm, (1, 0))


def multi_head_self_attention(params: ModelParams, g: Tensor, pad_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Self-attention over word positions of G; returns (A_wc, per-head weights)."""
    batch, n, _ = g.shape
    heads, head_dim = params.cfg.num_heads, params.cfg.head_dim

    def split(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (batch, n, heads, head_dim)), (0, 2, 1, 3))

    q = split(g @ params['attn.w_q'])
    k = split(g @ params['attn.w_k'])
    v = split(g @ params['attn.w_v'])
    scores = (q @ nx.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
    key_mask = (~pad_mask)[:, None, None, :]
    weights = nx.softmax(scores, mask=key_mask)
    merged = nx.reshape(nx.transpose(weights @ v, (0, 2, 1, 3)), (batch, n, heads * head_dim))
    return merged @ params['attn.w_o'] + params['attn.b_o'], weights


def attention_pool(a_wc: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Max over categories, then softmax over the real words of each query."""
    if pad_mask.all(axis=1).any():
        raise ShapeError('attention_pool: a query has no non-PAD position')
    return nx.softmax(nx.max(a_wc, axis=2), mask=~pad_mask)


def weighted_word_rep(q_w: Tensor, word_weights: Tensor) -> Tensor:
    batch, n = word_weights.shape
    pooled = nx.reshape(word_weights, (batch, 1, n)) @ q_w
    return nx.reshape(pooled, (batch, q_w.shape[2]))


def fuse(params: ModelParams, r_qw: Tensor, r_wc: Tensor) -> Tensor:
    return nx.concat([r_qw, r_wc], axis=-1) @ params['fuse.w'] + params['fuse.b']


def predict_logits(params: ModelParams, r: Tensor) -> Tensor:
    return r @ params['out.w'] + params['out.b']


def estimate_category_cm(cat_emb: Tensor) -> Tensor:
    """Pairwise cosine of category embeddings, symmetric with an exact unit diagonal."""
    if (np.linalg.norm(cat_emb.data, axis=1) == 0).any():
        raise ShapeError('estimate_category_cm: category embedding has an all-zero row')
    n = nx.l2_normalize(cat_emb)
    return _symmetric_cosine(n)


def _symmetric_cosine(n: Tensor) -> Tensor:
    size = n.shape[0]
    raw = n @ nx.transpose(n, (1, 0))
    sym = (raw + nx.transpose(raw, (1, 0))) * 0.5
    off_diag = 1.0 - np.eye(size)
    return sym * off_diag + np.eye(size)


# --- full forward -------------------------------------------------------------

@dataclass
class ForwardTrace:
    q_w: Tensor
    r_qw: Tensor
    logits: Tensor
    g: Optional[Tensor] = None
    a_wc: Optional[Tensor] = None
    head_weights: Optional[Tensor] = None
    word_weights: Optional[Tensor] = None
    r_wc: Optional[Tensor] = None
    r: Optional[Tensor] = None
    cm_hat: Optional[Tensor] = None


def forward(params: ModelParams, token_ids: np.ndarray, mode: Ablation = Ablation.JOINT_PLUS_CM,
            training: bool = False, rate: float = 0.0,
            rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """One batched pass. ``word_only`` stops at the query encoder; ``joint_plus_cm`` adds cm_hat."""
    token_ids = np.asarray(token_ids)
    pad_mask = token_ids == PAD_ID
    q_w = embed_query(params, token_ids)
    r_qw = query2vector(params, q_w, pad_mask, training, rate, rng)

    if mode is Ablation.WORD_ONLY:
        logits = predict_logits(params, nx.dropout(r_qw, rate, rng, training))
        return ForwardTrace(q_w=q_w, r_qw=r_qw, logits=logits)

    cat_norm = nx.l2_normalize(params['cat_emb'])
    g = word_category_similarity(q_w, cat_norm)
    a_wc, head_weights = multi_head_self_attention(params, g, pad_mask)
    word_weights = attention_pool(a_wc, pad_mask)
    r_wc = weighted_word_rep(q_w, word_weights)
    r = fuse(params, r_qw, r_wc)
    logits = predict_logits(params, nx.dropout(r, rate, rng, training))
    cm_hat = _symmetric_cosine(cat_norm) if mode is Ablation.JOINT_PLUS_CM else None
    return ForwardTrace(q_w=q_w, r_qw=r_qw, logits=logits, g=g, a_wc=a_wc, head_weights=head_weights,
                        word_weights=word_weights, r_wc=r_wc, r=r, cm_hat=cm_hat)


def score_queries(params: ModelParams, token_ids: np.ndarray, mode: Ablation,
                  batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits, (N, |C|)."""
    token_ids = np.asarray(token_ids)
    frozen = ModelParams(params.cfg, {name: t.detach() for name, t in params})
    scores = [forward(frozen, token_ids[i:i + batch_size], mode).logits.data
              for i in range(0, len(token_ids), batch_size)]
    if not scores:
        return np.zeros((0, params.cfg.num_categories))
    return np.concatenate(scores, axis=0)
