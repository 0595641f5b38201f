"""Checkpoint files: a JSON manifest next to one little-endian binary blob.

The manifest lists every tensor with its name, kind (param or buffer),
shape, dtype and byte offset into the blob, plus the model config and an
architecture hash used to reject loads into a mismatched model.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import DtnConfig, VariantSpec, architecture_hash
from .errors import CheckpointError
from .model import Dtn, init_params
from .tensor import Tensor

FORMAT = "dtn-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def save_checkpoint(model: Dtn, path: str | Path, generation: int | None = None, extra: dict | None = None) -> Path:
    """Write ``model`` into directory ``path`` and return the manifest path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    items = [("param", k, v.data) for k, v in model.params.items()]
    items += [("buffer", k, v) for k, v in model.buffers.items()]
    for kind, name, arr in items:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({
            "name": name,
            "kind": kind,
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "config": dataclasses.asdict(model.config),
        "variant": dataclasses.asdict(model.variant),
        "config_hash": architecture_hash(model.config, model.variant),
        "generation": generation,
        "extra": extra or {},
        "tensors": entries,
    }
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path / MANIFEST


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest in {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} checkpoint")
    for key in ("config", "variant", "config_hash", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"checkpoint manifest missing {key!r}")
    return manifest


def load_checkpoint(
    path: str | Path,
    config: DtnConfig | None = None,
    variant: VariantSpec | None = None,
    expected_hash: str | None = None,
) -> Dtn:
    """Load a checkpoint written by :func:`save_checkpoint`.

    When ``config``/``variant`` (or ``expected_hash``) are given, the stored
    architecture hash must match them.
    """
    path = Path(path)
    manifest = read_manifest(path)
    try:
        stored_cfg = DtnConfig(**manifest["config"])
        stored_variant = VariantSpec(**manifest["variant"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc
    if architecture_hash(stored_cfg, stored_variant) != manifest["config_hash"]:
        raise CheckpointError("checkpoint config does not match its recorded hash")
    if config is not None or variant is not None:
        want = architecture_hash(config or stored_cfg, variant or stored_variant)
        expected_hash = expected_hash or want
    if expected_hash is not None and expected_hash != manifest["config_hash"]:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {manifest['config_hash']}, expected {expected_hash}"
        )
    try:
        blob = (path / BLOB).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"missing tensor blob in {path}") from exc

    ref_params, ref_buffers = init_params(stored_cfg, 0, stored_variant)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        start, nbytes = int(e["offset"]), int(e["nbytes"])
        if start + nbytes > len(blob):
            raise CheckpointError(f"tensor {e['name']} runs past the end of the blob")
        dtype = np.dtype(e["dtype"])
        shape = tuple(e["shape"])
        arr = np.frombuffer(blob[start:start + nbytes], dtype=dtype)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {e['name']} has {arr.size} values for shape {shape}")
        arr = arr.reshape(shape).astype(dtype.newbyteorder("="))
        refs = ref_params if e["kind"] == "param" else ref_buffers
        if e["name"] not in refs:
            raise CheckpointError(f"unexpected tensor {e['name']}")
        ref = refs[e["name"]].shape
        if tuple(ref) != shape:
            raise CheckpointError(f"shape mismatch for {e['name']}: {shape} vs {tuple(ref)}")
        if e["kind"] == "param":
            params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        else:
            buffers[e["name"]] = arr
    missing = (set(ref_params) - set(params)) | (set(ref_buffers) - set(buffers))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    ordered = {k: params[k] for k in ref_params}
    return Dtn(stored_cfg, stored_variant, ordered, {k: buffers[k] for k in ref_buffers})
