"""Attention-diversity statistics, Grad-CAM saliency and feature export."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, xlogy

from . import tensor as T
from .data import Sample, stack_images
from .model import Dtn

logger = logging.getLogger(__name__)


@dataclass
class BlockReport:
    block: int
    head_cosine: float
    head_entropy: list[float]
    scale: list[float] | None = None


@dataclass
class AttentionReport:
    blocks: list[BlockReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def pairwise_head_cosine(attn: np.ndarray) -> float:
    """Mean cosine similarity over distinct head pairs, averaged over the batch.

    ``attn`` has shape ``(n, d, P, P)``; each head map is flattened first.
    Returns 1.0 for a single head.
    """
    n, d = attn.shape[:2]
    if d < 2:
        return 1.0
    flat = attn.reshape(n, d, -1).astype(np.float64)
    unit = flat / np.linalg.norm(flat, axis=-1, keepdims=True)
    sims = np.einsum("nip,njp->nij", unit, unit)
    iu = np.triu_indices(d, k=1)
    return float(sims[:, iu[0], iu[1]].mean())


def row_entropy(attn: np.ndarray) -> np.ndarray:
    """Mean attention-row entropy per head, shape ``(d,)``."""
    ent = -xlogy(attn, attn).sum(axis=-1)
    return ent.mean(axis=(0, 2))


def attention_diversity(model: Dtn, images) -> AttentionReport:
    """Per-block head similarity, row entropies and current MAS scales."""
    report = AttentionReport()
    if not model.variant.use_levt or model.config.depth == 0:
        return report
    x = images if not isinstance(images, list) else stack_images(images, model.dtype)
    with T.no_grad():
        out = model.forward(np.asarray(x, dtype=model.dtype), train=False, diagnostics=True)
    for j, attn in enumerate(out.attention):
        scale = None
        name = f"levt.block.{j}.attn.theta"
        if name in model.params:
            scale = [float(v) for v in expit(model.params[name].data.astype(np.float64))]
        report.blocks.append(BlockReport(j, pairwise_head_cosine(attn), [float(v) for v in row_entropy(attn)], scale))
    return report


def cam_from(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Grad-CAM map from ``(c, h, w)`` activations and their gradients."""
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, features, axes=(0, 0)), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        logger.warning("Grad-CAM map is flat; returning zeros")
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def grad_cam(model: Dtn, sample, target_class: int | None = None) -> np.ndarray:
    """Saliency over the backbone output grid for one image.

    Gradients of the target logit (the predicted class by default) are taken
    with respect to the backbone feature map. Parameter values are untouched
    and any gradient buffers they held beforehand are restored.
    """
    image = sample.image if isinstance(sample, Sample) else np.asarray(sample)
    saved = {k: p.grad for k, p in model.params.items()}
    try:
        out = model.forward(np.asarray(image, dtype=model.dtype)[None], train=False)
        feat = out.backbone.retain_grad()
        if target_class is None:
            target_class = int(out.logits.data[0].argmax())
        T.backward(out.logits[0, target_class])
        grads = feat.grad if feat.grad is not None else np.zeros_like(feat.data)
        return cam_from(feat.data[0].astype(np.float64), grads[0].astype(np.float64))
    finally:
        for k, p in model.params.items():
            p.grad = saved[k]


def write_pgm(image: np.ndarray, path: str | Path) -> None:
    """Save a ``[0, 1]`` map as a binary 8-bit PGM."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) / float(maxval)


def export_features(model: Dtn, samples: list[Sample], path: str | Path, batch_size: int = 128) -> None:
    """CSV of ``sample_id, label, f1..fc`` with the pooled feature of each sample."""
    c = model.config.c
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label"] + [f"f{i + 1}" for i in range(c)])
        with T.no_grad():
            for i in range(0, len(samples), batch_size):
                chunk = samples[i:i + batch_size]
                feats = model.forward(stack_images(chunk, model.dtype), train=False).features.data
                for s, f in zip(chunk, feats):
                    writer.writerow([s.sample_id, s.label] + [repr(float(v)) for v in f])
