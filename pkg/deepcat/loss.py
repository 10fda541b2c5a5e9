"""
Training objectives: per-category sigmoid cross-entropy, the category
co-occurrence approximation loss and their weighted sum.
"""

import numpy as np

from deepcat import numerics as nx
from deepcat.errors import CorpusError, ShapeError
from deepcat.models import CMMode, LossConfig
from deepcat.numerics import Tensor


def _check_targets(targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if not np.isin(targets, (0.0, 1.0)).all():
        raise CorpusError('sigmoid_cross_entropy: targets must be 0/1')
    return targets


def sigmoid_cross_entropy(logits: Tensor, targets: np.ndarray, positive_only: bool = False) -> Tensor:
    """Sum over categories of -[t log s(x) + (1-t) log(1-s(x))], averaged over the batch.

    Uses softplus(x) - t*x, which never forms the sigmoid. ``positive_only``
    keeps just -t log s(x) = t * softplus(-x).
    """
    targets = _check_targets(targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"sigmoid_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if positive_only:
        per_entry = nx.softplus(-logits) * targets
    else:
        per_entry = nx.softplus(logits) - logits * targets
    total = nx.sum(per_entry)
    batch = logits.shape[0] if logits.ndim == 2 else 1
    return total * (1.0 / batch)


def matrix_approx_loss(cm_hat: Tensor, cm: np.ndarray, mode: CMMode = CMMode.SHIFTED) -> Tensor:
    """Mean over |C|^2 entries of softplus(cm_hat * cm) (literal) or softplus(-cm_hat * (2 cm - 1)) (shifted)."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm_hat.shape != cm.shape or cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError(f"matrix_approx_loss: cm_hat {cm_hat.shape} vs cm {cm.shape}")
    if not ((cm >= 0.0) & (cm <= 1.0)).all():
        raise CorpusError(f"matrix_approx_loss: co-occurrence entries must lie in [0, 1], got range "
                          f"[{np.nanmin(cm)}, {np.nanmax(cm)}]")
    if CMMode(mode) is CMMode.LITERAL:
        return nx.mean(nx.softplus(cm_hat * cm))
    return nx.mean(nx.softplus(cm_hat * (1.0 - 2.0 * cm)))


def overall_loss(l_pc: Tensor, l_cm: Tensor, cfg: LossConfig) -> Tensor:
    return l_cm * cfg.lambda1 + l_pc * cfg.lambda2
