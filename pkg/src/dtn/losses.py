"""Training objectives: cross-entropy, low-dimensional contrastive-center,
temperature KD, and their weighted sum.

All losses average over the batch. Single samples may be passed as 1-D
vectors; they are treated as a batch of one.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import xlogy

from . import tensor as T
from .config import LossWeights
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def _batch(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    return T.reshape(x, (1,) + x.shape) if x.ndim == 1 else x


def _onehot(y, dtype) -> np.ndarray:
    y = np.asarray(y, dtype=dtype)
    return y[None] if y.ndim == 1 else y


def ce_loss(y, y_pre) -> Tensor:
    """Cross-entropy between one-hot ``y`` and predicted probabilities ``y_pre``."""
    probs = _batch(y_pre)
    y = _onehot(y, probs.dtype)
    if (probs.data[y > 0] < PROB_FLOOR).any():
        logger.warning("probability of the true class below %g; clamping", PROB_FLOOR)
    logp = T.log(T.clamp_min(probs, PROB_FLOOR))
    return -T.mean(T.tsum(logp * y, axis=-1))


def ce_from_logits(y, logits) -> Tensor:
    """Same value as ``ce_loss(y, softmax(logits))``, computed via log-softmax."""
    logits = _batch(logits)
    y = _onehot(y, logits.dtype)
    return -T.mean(T.tsum(T.log_softmax(logits) * y, axis=-1))


def ctc_loss(y_pre, labels, centers: Tensor, eps: float = 1e-8) -> Tensor:
    """Contrastive-center loss on low-dimensional outputs.

    ``0.5 * ||y_pre - c_y||^2 / (||y_pre - c_other|| + eps)``; ``centers`` is a
    ``(2, D)`` tensor whose row ``k`` is the center of class ``k``.
    """
    y_pre = _batch(y_pre)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    own = T.getitem(centers, labels)
    other = T.getitem(centers, 1 - labels)
    pull = T.tsum((y_pre - own) ** 2, axis=-1)
    push = T.sqrt(T.clamp_min(T.tsum((y_pre - other) ** 2, axis=-1), 1e-24)) + eps
    return T.mean(0.5 * pull / push)


def kd_loss(teacher_logits, student_logits, tau: float = 1.0) -> Tensor:
    """KL(softmax(t / tau) || softmax(s / tau)); the teacher side carries no gradient."""
    student = _batch(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t = t[None] if t.ndim == 1 else t
    soft = T.softmax_t(Tensor(t.astype(student.dtype)), tau).data
    entropy_term = xlogy(soft, soft).sum(axis=-1)
    cross = T.tsum(T.log_softmax(student, tau) * soft, axis=-1)
    return T.mean(Tensor(entropy_term) - cross)


def dsd_loss(
    y,
    student_logits: Tensor,
    teacher_logits,
    centers: Tensor,
    w: LossWeights,
    ctc_input: Tensor | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum ``a1 * CE + a2 * CtC + a3 * KD``.

    Terms with zero weight are skipped, and so is KD when ``teacher_logits``
    is None. ``ctc_input`` defaults to the student logits; pass the pooled
    features instead for the high-dimensional ablation.
    """
    logits = _batch(student_logits)
    y = _onehot(y, logits.dtype)
    labels = y.argmax(axis=-1)
    zero = Tensor(np.zeros((), dtype=logits.dtype))
    ce = ce_from_logits(y, logits)
    ctc = ctc_loss(ctc_input if ctc_input is not None else logits, labels, centers, w.eps) if w.alpha_ctc else zero
    kd = kd_loss(teacher_logits, logits, w.tau) if (w.alpha_kd and teacher_logits is not None) else zero
    total = ce * w.alpha_ce + ctc * w.alpha_ctc + kd * w.alpha_kd
    parts = {"ce": ce.item(), "ctc": ctc.item(), "kd": kd.item(), "dsd": total.item()}
    return total, parts
