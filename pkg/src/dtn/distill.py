"""Soft tag generation and the generational self-distillation chain.

Generation 0 trains a model from scratch on hard labels (CE + CtC). Each
later generation copies the current teacher into a student, freezes the
teacher, caches its soft labels and trains the student with the full
weighted objective. A student replaces its teacher only if its best
validation loss beats the loss the copied student had before training; the
chain ends at the first generation that fails to do so, or after
``max_generations``.

Within a generation, validation loss is tracked against a running minimum
that starts at 1e6. Every epoch that fails to improve on it bumps a miss
counter ``z``, which is *not* reset by later improvements; the generation ends
once ``z`` reaches the patience ``t`` (``t = 0`` ends it at the first miss).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import LossWeights, RunConfig, TrainConfig
from .data import DatasetSplit, Sample, stack_images
from .errors import NumericError
from .model import Dtn
from .train import evaluate, make_optimizer, set_epoch_lr, train_epoch

logger = logging.getLogger(__name__)

INITIAL_MIN = 1e6
LOG_COLUMNS = ("generation", "epoch", "L_CE", "L_Ctc", "L_KD", "L_DSD", "val_acc", "val_auc")


@dataclass
class GenerationRecord:
    index: int
    teacher_ckpt: str | None
    best_student_ckpt: str | None
    best_loss: float
    epochs_run: int
    patience_hits: int
    stop_reason: str
    teacher_loss: float | None = None
    promoted: bool = False
    losses: list[float] = field(default_factory=list)


@dataclass
class DistillState:
    chain: list[GenerationRecord] = field(default_factory=list)
    teacher_loss: float | None = None
    start_flag: bool = True
    max_generations: int = 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class PatienceTracker:
    """Running minimum with a cumulative miss counter.

    ``update`` returns True when the loss is a new minimum (the caller saves a
    checkpoint). ``done`` turns True once a miss happens with ``z >= t``.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = INITIAL_MIN
        self.z = 0
        self.done = False

    def update(self, loss: float) -> bool:
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss}")
        if loss < self.best:
            self.best = loss
            return True
        if self.z < self.patience:
            self.z += 1
        if self.z >= self.patience:
            self.done = True
        return False


def run_patience_loop(
    epoch_loss: Callable[[int], float],
    patience: int,
    max_epochs: int,
    on_improve: Callable[[int, float], None] | None = None,
) -> tuple[float, int, int, str, list[float]]:
    """Drive ``epoch_loss(epoch)`` until patience or ``max_epochs`` runs out.

    Returns ``(best_loss, epochs_run, z, stop_reason, losses)``.
    """
    tracker = PatienceTracker(patience)
    losses = []
    for epoch in range(max_epochs):
        loss = float(epoch_loss(epoch))
        losses.append(loss)
        if tracker.update(loss):
            if on_improve is not None:
                on_improve(epoch, loss)
        elif tracker.done:
            return tracker.best, epoch + 1, tracker.z, "patience_exhausted", losses
    return tracker.best, max_epochs, tracker.z, "max_epochs", losses


def generate_soft_tags(teacher: Dtn, samples: list[Sample], batch_size: int = 128) -> list[Sample]:
    """Copies of ``samples`` carrying the frozen teacher's class probabilities."""
    out = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            logits = teacher.forward(stack_images(chunk, teacher.dtype), train=False).logits.data
            z = logits.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            out.extend(dataclasses.replace(s, soft_label=p) for s, p in zip(chunk, probs))
    return out


def _strip(samples: list[Sample]) -> list[Sample]:
    return [dataclasses.replace(s, soft_label=None) if s.soft_label is not None else s for s in samples]


class ChainLogger:
    """Collects per-epoch rows and optionally mirrors them to a CSV file."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def log(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in LOG_COLUMNS])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train_generation(
    teacher: Dtn | None,
    student: Dtn,
    data: DatasetSplit,
    weights: LossWeights,
    patience: int,
    max_epochs: int,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    index: int = 0,
    log: ChainLogger | None = None,
    ckpt_dir: str | Path | None = None,
) -> tuple[Dtn, GenerationRecord]:
    """Train ``student`` in place against a frozen ``teacher``.

    With ``teacher=None`` this is the initial (hard-label) training and the KD
    weight is forced to zero. Returns the best snapshot and its record.
    """
    if teacher is None:
        weights = dataclasses.replace(weights, alpha_kd=0.0)
        train_set, val_set = _strip(data.train), _strip(data.val)
    else:
        train_set = generate_soft_tags(teacher, data.train)
        val_set = generate_soft_tags(teacher, data.val)
    optimizer = make_optimizer(student, weights, train_cfg)
    best: dict[str, Dtn] = {}
    ckpt_id = f"gen{index}/best"

    def epoch_loss(epoch: int) -> float:
        set_epoch_lr(optimizer, train_cfg, epoch)
        train_epoch(student, optimizer, train_set, weights, train_cfg, rng)
        result = evaluate(student, val_set, weights)
        if log is not None:
            log.log({"generation": index, "epoch": epoch, **result.row()})
        logger.info("gen %d epoch %d: val L_DSD %.5f acc %.4f auc %.4f",
                    index, epoch, result.dsd, result.acc, result.auc)
        return result.dsd

    def on_improve(epoch: int, loss: float) -> None:
        best["model"] = student.copy()
        if ckpt_dir is not None:
            save_checkpoint(best["model"], Path(ckpt_dir) / f"gen{index}", generation=index,
                            extra={"epoch": epoch, "val_loss": loss})

    best_loss, epochs, z, reason, losses = run_patience_loop(epoch_loss, patience, max_epochs, on_improve)
    record = GenerationRecord(
        index=index,
        teacher_ckpt=None if teacher is None else f"gen{index - 1}/best",
        best_student_ckpt=ckpt_id,
        best_loss=float(best_loss),
        epochs_run=epochs,
        patience_hits=z,
        stop_reason=reason,
        losses=losses,
    )
    return best["model"], record


def self_distill_chain(
    config: RunConfig,
    data: DatasetSplit,
    model: Dtn | None = None,
    log: ChainLogger | None = None,
    ckpt_dir: str | Path | None = None,
    max_generations: int | None = None,
) -> tuple[Dtn, DistillState]:
    """Initial training followed by up to ``max_generations`` self-distillations.

    Returns the last promoted model together with the chain bookkeeping.
    """
    g_max = config.distill.max_generations if max_generations is None else max_generations
    weights = config.loss_weights
    dtype = np.dtype(config.train.dtype)
    state = DistillState(max_generations=g_max)
    if model is None:
        model = Dtn(config.model, config.variant, dtype=dtype)
    rng = np.random.default_rng([config.seed, 0])
    teacher, rec = train_generation(None, model, data, weights, config.distill.patience,
                                    config.distill.max_epochs, config.train, rng, 0, log, ckpt_dir)
    rec.promoted = True
    state.chain.append(rec)

    for g in range(1, g_max + 1):
        student = teacher.copy()
        frozen = {k: v.data.copy() for k, v in teacher.params.items()}
        state.teacher_loss = float(evaluate(student, generate_soft_tags(teacher, data.val), weights).dsd)
        state.start_flag = False
        rng = np.random.default_rng([config.seed, g])
        candidate, rec = train_generation(teacher, student, data, weights, config.distill.patience,
                                          config.distill.max_epochs, config.train, rng, g, log, ckpt_dir)
        if any(not np.array_equal(frozen[k], v.data) for k, v in teacher.params.items()):
            raise RuntimeError("teacher parameters changed during distillation")
        rec.teacher_loss = state.teacher_loss
        rec.promoted = bool(rec.best_loss < state.teacher_loss)
        state.chain.append(rec)
        if rec.promoted:
            teacher = candidate
        else:
            break
    return teacher, state


def write_chain_manifest(state: DistillState, path: str | Path, extra: dict | None = None) -> None:
    body = {"state": state.to_dict(), **(extra or {})}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
