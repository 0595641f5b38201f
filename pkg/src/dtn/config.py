"""Configuration records for models, variants, losses and full runs.

Everything round-trips through plain JSON so a run directory can carry an
exact copy of the configuration that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

ATTENTION_KINDS = ("vanilla", "mas", "reattention")
LOSS_KINDS = ("ce", "ce+kd", "ce+ctc", "dsd")
CTC_DIMS = ("logits", "features")
NOISE_KINDS = ("gaussian", "uniform", "none")


@dataclass(frozen=True)
class DtnConfig:
    in_channels: int = 3
    image_size: int = 32
    channels: tuple[int, ...] = (16, 32, 64)
    num_experts: int = 2
    depth: int = 6
    heads: int = 8
    mlp_ratio: int = 4
    tau: float = 1.0
    noise_kind: str = "gaussian"
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    @property
    def c(self) -> int:
        return self.channels[-1]

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** len(self.channels)

    @property
    def head_dim(self) -> int:
        return self.c // self.heads

    @property
    def expert_hidden(self) -> int:
        return max(self.c // 4, 1)

    def validate(self) -> None:
        dims = (self.in_channels, self.image_size, self.num_experts, self.depth, self.heads, self.mlp_ratio)
        if not self.channels or any(int(v) < 1 for v in dims + self.channels):
            raise ConfigError("all dimensions must be positive")
        if self.image_size % 2 ** len(self.channels):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{len(self.channels)}")
        if self.c % self.heads:
            raise ConfigError(f"channels {self.c} not divisible by heads {self.heads}")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")


@dataclass(frozen=True)
class VariantSpec:
    """Which DTN components are present (the ablation ladder)."""

    use_moe: bool = True
    use_levt: bool = True
    mas_in_moe: bool = True
    mas_in_levt: bool = True
    attention_kind: str = "mas"
    loss_kind: str = "dsd"
    ctc_dimensionality: str = "logits"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.ctc_dimensionality not in CTC_DIMS:
            raise ConfigError(f"ctc_dimensionality must be one of {CTC_DIMS}")
        if self.mas_in_levt and not self.use_levt:
            raise ConfigError("mas_in_levt requires use_levt")
        if self.mas_in_moe and not self.use_moe:
            raise ConfigError("mas_in_moe requires use_moe")
        if self.mas_in_levt != (self.attention_kind == "mas"):
            raise ConfigError("attention_kind 'mas' and mas_in_levt must agree")

    @classmethod
    def baseline(cls, **kw) -> "VariantSpec":
        base = dict(use_moe=False, use_levt=False, mas_in_moe=False, mas_in_levt=False, attention_kind="vanilla")
        base.update(kw)
        return cls(**base)

    @property
    def uses_ctc(self) -> bool:
        return self.loss_kind in ("ce+ctc", "dsd")

    @property
    def uses_kd(self) -> bool:
        return self.loss_kind in ("ce+kd", "dsd")


@dataclass(frozen=True)
class LossWeights:
    alpha_ce: float = 4.0
    alpha_ctc: float = 0.4
    alpha_kd: float = 0.6
    eps: float = 1e-8
    tau: float = 1.0

    def __post_init__(self):
        if min(self.alpha_ce, self.alpha_ctc, self.alpha_kd) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.eps > 0 or not self.tau > 0:
            raise ConfigError("eps and tau must be positive")

    def for_variant(self, variant: VariantSpec) -> "LossWeights":
        """Zero the terms a variant's ``loss_kind`` leaves out."""
        return dataclasses.replace(
            self,
            alpha_ctc=self.alpha_ctc if variant.uses_ctc else 0.0,
            alpha_kd=self.alpha_kd if variant.uses_kd else 0.0,
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    lr_step: int = 15
    augment: tuple[str, ...] = ("hflip",)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "augment", tuple(self.augment))
        if self.batch_size < 2 or self.epochs < 1:
            raise ConfigError("batch_size must be >= 2 and epochs >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


@dataclass(frozen=True)
class DistillConfig:
    patience: int = 5
    max_generations: int = 4
    max_epochs: int = 20

    def __post_init__(self):
        if self.patience < 0 or self.max_generations < 0 or self.max_epochs < 1:
            raise ConfigError("invalid distillation settings")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 2:
            raise ConfigError("every split needs at least 2 samples")
        if not 0 <= self.strength <= 1:
            raise ConfigError("strength must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    model: DtnConfig = field(default_factory=DtnConfig)
    variant: VariantSpec = field(default_factory=VariantSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        # the temperature is recorded with both the model and the loss; they must agree
        if self.model.tau != self.loss.tau:
            raise ConfigError(f"model.tau={self.model.tau} and loss.tau={self.loss.tau} disagree")

    @property
    def loss_weights(self) -> LossWeights:
        return self.loss.for_variant(self.variant)

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        sections = {
            "model": DtnConfig,
            "variant": VariantSpec,
            "loss": LossWeights,
            "train": TrainConfig,
            "distill": DistillConfig,
            "data": DataConfig,
        }
        if "seed" not in raw:
            raise ConfigError("config must set 'seed'")
        unknown = set(raw) - set(sections) - {"out_dir", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {"seed": int(raw["seed"])}
        if "out_dir" in raw:
            kwargs["out_dir"] = str(raw["out_dir"])
        for key, typ in sections.items():
            body = raw.get(key, {})
            names = {f.name for f in dataclasses.fields(typ)}
            bad = set(body) - names
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            try:
                kwargs[key] = typ(**body)
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(**kwargs)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        raw = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, value = item.split("=", 1)
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            node = raw
            *path, leaf = key.split(".")
            for part in path:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config section in override {key!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key in override {key!r}")
            node[leaf] = parsed
        return RunConfig.from_dict(raw)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def stable_hash(obj) -> str:
    text = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def architecture_hash(config: DtnConfig, variant: VariantSpec) -> str:
    """Hash of everything that fixes parameter names and shapes."""
    body = dataclasses.asdict(config)
    body.pop("seed")
    return stable_hash({"model": body, "variant": dataclasses.asdict(variant)})


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    config = RunConfig.from_dict(raw)
    return config.with_overrides(overrides) if overrides else config


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
