"""Procedural real/fake image dataset, augmentation, and ACC/AUC metrics.

Real images are smooth multi-scale random fields laid over a fixed
face-like layout (a bright ellipse on a darker surround). A fake image is
the real image produced from the same seed with a rectangular patch taken
from an unrelated, finer-textured field and alpha-blended in with a soft
border, plus a small global color cast. Every sample is generated from its
own Philox stream keyed by ``(seed, sample_id)``, so samples can be built in
any order or in parallel and still come out bit-identical.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError, ParameterError

REAL, FAKE = 0, 1
AUGMENTATIONS = ("hflip", "gaussian_noise", "uniform_noise", "brightness")
NOISE_STD = 0.05
BORDER = 2.0


@dataclass
class Sample:
    image: np.ndarray
    hard_label: np.ndarray
    sample_id: int
    seed: int
    soft_label: np.ndarray | None = None

    @property
    def label(self) -> int:
        return int(self.hard_label.argmax())


@dataclass
class DatasetSplit:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    seed: int
    strength: float = 1.0
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def class_counts(self) -> dict[str, tuple[int, int]]:
        out = {}
        for name in ("train", "val", "test"):
            labels = [s.label for s in self.split(name)]
            out[name] = (labels.count(REAL), labels.count(FAKE))
        return out


def sample_rng(seed: int, sample_id: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one sample; independent of generation order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, sample_id, stream])))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DTN_THREADS", "1")))
    except ValueError:
        return 1


# ----------------------------------------------------------------------
# image synthesis
# ----------------------------------------------------------------------
def _interp_matrix(size: int, grid: int) -> np.ndarray:
    """Linear interpolation from ``grid`` control points onto ``size`` pixels."""
    pos = np.linspace(0.0, grid - 1.0, size)
    lo = np.clip(np.floor(pos).astype(int), 0, max(grid - 2, 0))
    frac = pos - lo
    m = np.zeros((size, grid))
    m[np.arange(size), lo] += 1.0 - frac
    if grid > 1:
        m[np.arange(size), lo + 1] += frac
    return m


def smooth_field(rng: np.random.Generator, channels: int, h: int, w: int, grids=(3, 5, 9), amps=(0.5, 0.3, 0.2)) -> np.ndarray:
    """Sum of bilinearly upsampled random grids at several scales."""
    out = np.zeros((channels, h, w))
    for grid, amp in zip(grids, amps):
        gh, gw = _interp_matrix(h, grid), _interp_matrix(w, grid)
        coarse = rng.standard_normal((channels, grid, grid))
        out += amp * np.einsum("ij,cjk,lk->cil", gh, coarse, gw)
    return out


def _layout(h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    r = (xx / 0.65) ** 2 + (yy / 0.85) ** 2
    return 1.0 / (1.0 + np.exp((r - 1.0) * 6.0))


def real_image(rng: np.random.Generator, channels: int, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.55, size=(channels, 1, 1))
    face = _layout(h, w)[None] * rng.uniform(0.15, 0.25, size=(channels, 1, 1))
    luminance = smooth_field(rng, 1, h, w)
    chroma = smooth_field(rng, channels, h, w)
    img = base + face + 0.08 * luminance + 0.03 * chroma
    return np.clip(img, 0.0, 1.0)


def _patch_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ph = int(rng.integers(h // 4, h // 2 + 1))
    pw = int(rng.integers(w // 4, w // 2 + 1))
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    dy = np.minimum(rows - top, top + ph - rows)
    dx = np.minimum(cols - left, left + pw - cols)
    ramp_y = np.clip(dy / BORDER, 0.0, 1.0)
    ramp_x = np.clip(dx / BORDER, 0.0, 1.0)
    return np.outer(ramp_y, ramp_x)


def fake_image(real: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Blend a foreign, finer-textured patch into ``real`` and shift its color."""
    c, h, w = real.shape
    mask = _patch_mask(rng, h, w) * strength
    donor = rng.uniform(0.35, 0.65, size=(c, 1, 1)) + 0.12 * smooth_field(rng, c, h, w, grids=(6, 12), amps=(0.5, 0.5))
    texture = 0.06 * rng.standard_normal((1, h, w))
    patch = donor + texture
    shift = strength * np.array([0.03, 0.0, -0.03][:c] + [0.0] * max(c - 3, 0)).reshape(c, 1, 1)
    out = (1.0 - mask) * real + mask * patch + shift
    return np.clip(out, 0.0, 1.0)


def make_sample(seed: int, sample_id: int, channels: int, h: int, w: int, strength: float) -> Sample:
    label = sample_id % 2
    image = real_image(sample_rng(seed, sample_id, 0), channels, h, w)
    if label == FAKE:
        image = fake_image(image, sample_rng(seed, sample_id, 1), strength)
    return Sample(image=image, hard_label=np.eye(2)[label], sample_id=sample_id, seed=seed)


def default_splits(n: int) -> tuple[int, int, int]:
    """Split ``n`` as 4:1:1 into train/val/test."""
    val = n // 6
    return n - 2 * val, val, val


def generate_dataset(
    n: int,
    h0: int = 32,
    w0: int | None = None,
    seed: int = 0,
    strength: float = 1.0,
    splits: tuple[int, int, int] | None = None,
    channels: int = 3,
    workers: int | None = None,
) -> DatasetSplit:
    """Build ``n`` samples, half real and half fake, split by id order.

    Sample ids are ``0..n-1``; even ids are real and odd ids are fake, so each
    contiguous split is class-balanced to within one sample.
    """
    w0 = h0 if w0 is None else w0
    if n < 6 or n % 2:
        raise ParameterError(f"n must be even and at least 6, got {n}")
    if h0 < 8 or w0 < 8 or channels < 1:
        raise ParameterError(f"invalid image dimensions {channels}x{h0}x{w0}")
    if not 0.0 <= strength <= 1.0:
        raise ParameterError(f"strength must lie in [0, 1], got {strength}")
    splits = splits or default_splits(n)
    if sum(splits) != n or min(splits) < 2:
        raise ParameterError(f"splits {splits} do not partition {n} samples")
    workers = workers or worker_count()
    make = lambda i: make_sample(seed, i, channels, h0, w0, strength)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(make, range(n)))
    else:
        samples = [make(i) for i in range(n)]
    a, b, _ = splits
    return DatasetSplit(samples[:a], samples[a:a + b], samples[a + b:], seed=seed, strength=strength)


def stack_images(samples: list[Sample], dtype=np.float64) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(dtype)


def stack_labels(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.hard_label for s in samples])


# ----------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------
def augment(sample: Sample, rng: np.random.Generator, policy=(), p: float = 1.0) -> Sample:
    """Apply each transform in ``policy`` with probability ``p``; labels are untouched."""
    unknown = set(policy) - set(AUGMENTATIONS)
    if unknown:
        raise ParameterError(f"unknown augmentations: {sorted(unknown)}")
    img = sample.image
    for op in policy:
        if p < 1.0 and rng.random() >= p:
            continue
        if op == "hflip":
            img = img[..., ::-1]
        elif op == "gaussian_noise":
            img = img + rng.normal(0.0, NOISE_STD, img.shape)
        elif op == "uniform_noise":
            a = NOISE_STD * np.sqrt(3.0)
            img = img + rng.uniform(-a, a, img.shape)
        elif op == "brightness":
            img = img * rng.uniform(0.9, 1.1)
    if img is sample.image:
        return sample
    return replace(sample, image=np.ascontiguousarray(np.clip(img, 0.0, 1.0)))


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------
def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of samples where ``score >= threshold`` agrees with ``label == 1``."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.size == 0:
        raise MetricError("accuracy of an empty set")
    return float(np.mean((scores >= threshold).astype(int) == labels))


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney U statistic; ties earn half credit."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ----------------------------------------------------------------------
# on-disk form
# ----------------------------------------------------------------------
def export_dataset(ds: DatasetSplit, path: str | Path) -> None:
    """Write raw little-endian float64 images plus a JSON index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {"seed": ds.seed, "strength": ds.strength, "dtype": "<f8", "splits": {}}
    for name in ("train", "val", "test"):
        samples = ds.split(name)
        blob = stack_images(samples).astype("<f8")
        (path / f"{name}.bin").write_bytes(blob.tobytes())
        index["splits"][name] = {
            "shape": list(blob.shape),
            "sample_ids": [s.sample_id for s in samples],
            "labels": [s.label for s in samples],
        }
    (path / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> DatasetSplit:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    parts = {}
    for name, meta in index["splits"].items():
        blob = np.frombuffer((path / f"{name}.bin").read_bytes(), dtype="<f8").reshape(meta["shape"])
        parts[name] = [
            Sample(image=blob[i].astype(np.float64), hard_label=np.eye(2)[lab], sample_id=sid, seed=index["seed"])
            for i, (sid, lab) in enumerate(zip(meta["sample_ids"], meta["labels"]))
        ]
    return DatasetSplit(parts["train"], parts["val"], parts["test"], seed=index["seed"], strength=index["strength"])
