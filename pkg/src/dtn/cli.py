"""Command-line entry point: ``dtn datagen|train|distill|eval|diagnose``.

Every command reads one JSON config (see ``configs/``), optionally patched
with ``--override section.key=value``, and writes its outputs below the
config's ``out_dir`` together with a ``manifest.json`` and a copy of the
resolved config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, save_config
from .data import DatasetSplit, export_dataset, generate_dataset, load_dataset
from .diagnostics import attention_diversity, export_features, grad_cam, write_pgm
from .distill import ChainLogger, self_distill_chain, train_generation, write_chain_manifest
from .errors import CheckpointError, ConfigError, DtnError, NumericError
from .model import Dtn
from .train import evaluate

logger = logging.getLogger("dtn")

SALIENCY_SAMPLES = 8


def _write_json(path: Path, body: dict) -> None:
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _run_dir(config: RunConfig, sub: str) -> Path:
    path = Path(config.out_dir) / sub
    path.mkdir(parents=True, exist_ok=True)
    save_config(config, path / "config.json")
    return path


def _manifest(path: Path, command: str, config: RunConfig, outputs: list[str], **extra) -> None:
    body = {
        "command": command,
        "config_hash": config.config_hash(),
        "tool_version": __version__,
        "outputs": sorted(outputs),
        **extra,
    }
    _write_json(path / "manifest.json", body)


def dataset_for(config: RunConfig) -> DatasetSplit:
    """Load the run's exported dataset if present, otherwise regenerate it."""
    data_dir = Path(config.out_dir) / "data"
    if (data_dir / "index.json").exists():
        ds = load_dataset(data_dir)
        if ds.seed == config.data.seed and ds.strength == config.data.strength:
            return ds
    d = config.data
    return generate_dataset(
        d.n_train + d.n_val + d.n_test,
        config.model.image_size,
        seed=d.seed,
        strength=d.strength,
        splits=(d.n_train, d.n_val, d.n_test),
        channels=config.model.in_channels,
    )


def _metrics(model: Dtn, ds: DatasetSplit, config: RunConfig) -> dict:
    result = evaluate(model, ds.test, config.loss_weights)
    return {"test_acc": result.acc, "test_auc": result.auc, "test_L_CE": result.ce, "n_test": len(ds.test)}


def cmd_datagen(config: RunConfig) -> dict:
    out = _run_dir(config, "data")
    ds = dataset_for(config)
    export_dataset(ds, out)
    counts = ds.class_counts()
    _manifest(out, "datagen", config, ["index.json", "train.bin", "val.bin", "test.bin"], class_counts=counts)
    return {"class_counts": counts}


def cmd_train(config: RunConfig) -> dict:
    out = _run_dir(config, "train")
    ds = dataset_for(config)
    model = Dtn(config.model, config.variant, dtype=np.dtype(config.train.dtype))
    log = ChainLogger(out / "train_log.csv")
    rng = np.random.default_rng([config.seed, 0])
    best, record = train_generation(None, model, ds, config.loss_weights, config.distill.patience,
                                    config.train.epochs, config.train, rng, 0, log)
    save_checkpoint(best, out / "checkpoint", generation=0)
    metrics = _metrics(best, ds, config)
    metrics["record"] = dataclasses.asdict(record)
    _write_json(out / "metrics.json", metrics)
    _manifest(out, "train", config, ["checkpoint", "train_log.csv", "metrics.json"])
    return metrics


def cmd_distill(config: RunConfig) -> dict:
    out = _run_dir(config, "distill")
    ds = dataset_for(config)
    log = ChainLogger(out / "chain_log.csv")
    best, state = self_distill_chain(config, ds, log=log, ckpt_dir=out / "generations")
    save_checkpoint(best, out / "best", generation=max(r.index for r in state.chain if r.promoted))
    metrics = _metrics(best, ds, config)
    write_chain_manifest(state, out / "chain.json")
    _write_json(out / "metrics.json", metrics)
    _manifest(out, "distill", config, ["best", "generations", "chain.json", "chain_log.csv", "metrics.json"],
              generations=len(state.chain))
    return {**metrics, "generations": len(state.chain)}


def _load(config: RunConfig, ckpt: str | None) -> Dtn:
    if ckpt is None:
        raise ConfigError("this command needs --checkpoint")
    model = load_checkpoint(ckpt, config.model, config.variant)
    model.check_contracts = False
    return model


def cmd_eval(config: RunConfig, ckpt: str | None) -> dict:
    out = _run_dir(config, "eval")
    model = _load(config, ckpt)
    metrics = _metrics(model, dataset_for(config), config)
    _write_json(out / "metrics.json", metrics)
    (out / "metrics.csv").write_text(
        ",".join(sorted(metrics)) + "\n" + ",".join(repr(metrics[k]) for k in sorted(metrics)) + "\n"
    )
    _manifest(out, "eval", config, ["metrics.json", "metrics.csv"], checkpoint=str(ckpt))
    return metrics


def cmd_diagnose(config: RunConfig, ckpt: str | None) -> dict:
    out = _run_dir(config, "diagnose")
    model = _load(config, ckpt)
    ds = dataset_for(config)
    report = attention_diversity(model, ds.test[:64])
    report.write(out / "attention.json")
    saliency = out / "saliency"
    saliency.mkdir(exist_ok=True)
    names = []
    for s in ds.test[:SALIENCY_SAMPLES]:
        name = f"sample{s.sample_id:05d}_label{s.label}.pgm"
        write_pgm(grad_cam(model, s, target_class=1), saliency / name)
        names.append(name)
    export_features(model, ds.test, out / "features.csv")
    _manifest(out, "diagnose", config, ["attention.json", "features.csv", "saliency"], checkpoint=str(ckpt),
              saliency=names)
    return {"blocks": len(report.blocks)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dtn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("datagen", "train", "distill", "eval", "diagnose"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="patch one config field, e.g. train.epochs=5")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "diagnose"):
            p.add_argument("--checkpoint", help="checkpoint directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = load_config(args.config, args.override)
        if args.command == "datagen":
            result = cmd_datagen(config)
        elif args.command == "train":
            result = cmd_train(config)
        elif args.command == "distill":
            result = cmd_distill(config)
        elif args.command == "eval":
            result = cmd_eval(config, args.checkpoint)
        else:
            result = cmd_diagnose(config, args.checkpoint)
    except (ConfigError, CheckpointError) as exc:
        print(f"dtn: error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, DtnError) as exc:
        print(f"dtn: failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
