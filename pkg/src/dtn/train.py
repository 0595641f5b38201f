"""Minibatch training and evaluation loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights, TrainConfig
from .data import Sample, accuracy, auc, augment, stack_images, stack_labels
from .errors import NumericError
from .losses import dsd_loss
from .model import Dtn
from .optim import Adam, step_lr

logger = logging.getLogger(__name__)

EVAL_BATCH = 128


@dataclass
class EvalResult:
    ce: float
    ctc: float
    kd: float
    dsd: float
    acc: float
    auc: float
    scores: np.ndarray

    def row(self) -> dict[str, float]:
        return {"L_CE": self.ce, "L_Ctc": self.ctc, "L_KD": self.kd, "L_DSD": self.dsd,
                "val_acc": self.acc, "val_auc": self.auc}


def _soft_logits(samples: list[Sample]) -> np.ndarray | None:
    if any(s.soft_label is None for s in samples):
        return None
    # log-probabilities differ from logits by a per-row constant, which softmax ignores
    return np.log(np.clip(np.stack([s.soft_label for s in samples]), 1e-300, None))


def trainable_params(model: Dtn, weights: LossWeights) -> list[T.Tensor]:
    """Parameters the objective actually depends on."""
    return [p for name, p in model.params.items() if name != "cls.centers" or weights.alpha_ctc > 0]


def _objective(model: Dtn, out, y: np.ndarray, teacher: np.ndarray | None, weights: LossWeights):
    ctc_input = out.features if model.variant.ctc_dimensionality == "features" else None
    return dsd_loss(y, out.logits, teacher, model["cls.centers"], weights, ctc_input=ctc_input)


def predict(model: Dtn, samples: list[Sample], batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode logits for ``samples``, shape ``(n, 2)``; records no graph."""
    outs = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            x = stack_images(samples[i:i + batch_size], model.dtype)
            outs.append(model.forward(x, train=False).logits.data)
    return np.concatenate(outs).astype(np.float64)


def fake_scores(logits: np.ndarray) -> np.ndarray:
    """Probability of the fake class from ``(n, 2)`` logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def evaluate(model: Dtn, samples: list[Sample], weights: LossWeights, batch_size: int = EVAL_BATCH) -> EvalResult:
    """Loss components, ACC and AUC on ``samples`` in eval mode.

    The KD term is included when every sample carries a soft label.
    """
    teacher = _soft_logits(samples)
    totals = np.zeros(4)
    logits = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            out = model.forward(stack_images(chunk, model.dtype), train=False)
            t = teacher[i:i + batch_size] if teacher is not None else None
            _, parts = _objective(model, out, stack_labels(chunk), t, weights)
            totals += len(chunk) * np.array([parts["ce"], parts["ctc"], parts["kd"], parts["dsd"]])
            logits.append(out.logits.data.astype(np.float64))
    totals /= len(samples)
    scores = fake_scores(np.concatenate(logits))
    labels = np.array([s.label for s in samples])
    if not np.isfinite(totals).all():
        raise NumericError("non-finite validation loss")
    return EvalResult(*totals, accuracy(scores, labels), auc(scores, labels), scores)


def train_epoch(
    model: Dtn,
    optimizer: Adam,
    samples: list[Sample],
    weights: LossWeights,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One shuffled pass over ``samples``; returns sample-weighted mean loss parts."""
    order = rng.permutation(len(samples))
    teacher_all = _soft_logits(samples)
    sums = {"ce": 0.0, "ctc": 0.0, "kd": 0.0, "dsd": 0.0}
    seen = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        if len(idx) < 2:
            continue
        batch = [augment(samples[i], rng, cfg.augment, p=0.5) for i in idx]
        x = stack_images(batch, model.dtype)
        teacher = teacher_all[idx] if teacher_all is not None else None
        out = model.forward(x, train=True, rng=rng)
        loss, parts = _objective(model, out, stack_labels(batch), teacher, weights)
        if not np.isfinite(parts["dsd"]):
            raise NumericError("non-finite training loss")
        T.backward(loss)
        optimizer.step()
        for k in sums:
            sums[k] += parts[k] * len(idx)
        seen += len(idx)
    return {k: v / max(seen, 1) for k, v in sums.items()}


def make_optimizer(model: Dtn, weights: LossWeights, cfg: TrainConfig) -> Adam:
    return Adam(trainable_params(model, weights), lr=cfg.lr, weight_decay=cfg.weight_decay)


def set_epoch_lr(optimizer: Adam, cfg: TrainConfig, epoch: int) -> None:
    optimizer.lr = step_lr(cfg.lr, epoch, cfg.lr_step)
