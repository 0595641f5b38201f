"""The distilled transformer network.

Data flow for a batch ``x`` of shape ``(n, 3, H, W)``::

    backbone -> MoE gating -> + positional embedding -> L transformer blocks
             -> global average pool -> linear classifier

Which stages are present is decided by a :class:`~dtn.config.VariantSpec`;
the default spec builds the full model. Parameters live in a flat ordered
dict keyed by dotted names, BN running statistics in a separate dict of
plain arrays.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import DtnConfig, VariantSpec
from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor

SIGMOID_ONE = 1.0 / (1.0 + math.exp(-1.0))
ROW_SUM_TOL = 1e-6
# float32 rounding of the nested sigmoids
MAP_TOL = 1e-7


@dataclass
class ForwardOutput:
    logits: Tensor
    features: Tensor
    backbone: Tensor
    attention: list[np.ndarray] = field(default_factory=list)
    moe_map: np.ndarray | None = None


# ----------------------------------------------------------------------
# parameter initialisation
# ----------------------------------------------------------------------
def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(
    config: DtnConfig,
    rng: np.random.Generator | int | None = None,
    variant: VariantSpec | None = None,
    dtype=np.float64,
) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Create ``(params, buffers)`` for a config and variant.

    Conv and linear weights are He-normal, biases zero, every scale factor
    starts at 0 pre-sigmoid, the positional embedding is N(0, 0.02) and the
    class centers start at one-hot vectors.
    """
    variant = variant or VariantSpec()
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(config.seed if rng is None else int(rng))
    dtype = np.dtype(dtype)
    c, s, B = config.c, config.feature_size, config.num_experts
    p: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    cin = config.in_channels
    for k, cout in enumerate(config.channels):
        pre = f"backbone.{k}"
        p[f"{pre}.conv.weight"] = _he(rng, (cout, cin, 3, 3), cin * 9, dtype)
        p[f"{pre}.conv.bias"] = np.zeros(cout, dtype)
        p[f"{pre}.bn.gamma"] = np.ones(cout, dtype)
        p[f"{pre}.bn.beta"] = np.zeros(cout, dtype)
        buffers[f"{pre}.bn.running_mean"] = np.zeros(cout, dtype)
        buffers[f"{pre}.bn.running_var"] = np.ones(cout, dtype)
        cin = cout

    if variant.use_moe:
        hid = config.expert_hidden
        for i in range(B):
            pre = f"moe.expert.{i}"
            p[f"{pre}.conv1.weight"] = _he(rng, (hid, c, 1, 1), c, dtype)
            p[f"{pre}.conv1.bias"] = np.zeros(hid, dtype)
            p[f"{pre}.conv2.weight"] = _he(rng, (1, hid, 1, 1), hid, dtype)
            p[f"{pre}.conv2.bias"] = np.zeros(1, dtype)
        if variant.mas_in_moe:
            p["moe.theta"] = np.zeros(B, dtype)

    if variant.use_levt:
        d, hd, r = config.heads, config.head_dim, config.mlp_ratio
        p["levt.pos"] = (rng.standard_normal((c, s, s)) * 0.02).astype(dtype)
        for j in range(config.depth):
            pre = f"levt.block.{j}"
            p[f"{pre}.bn1.gamma"] = np.ones(c, dtype)
            p[f"{pre}.bn1.beta"] = np.zeros(c, dtype)
            buffers[f"{pre}.bn1.running_mean"] = np.zeros(c, dtype)
            buffers[f"{pre}.bn1.running_var"] = np.ones(c, dtype)
            for name in ("w_query", "w_key", "w_value"):
                p[f"{pre}.attn.{name}"] = _he(rng, (d, hd, hd), hd, dtype)
            if variant.attention_kind == "mas":
                p[f"{pre}.attn.theta"] = np.zeros(d, dtype)
            elif variant.attention_kind == "reattention":
                p[f"{pre}.attn.head_mix"] = np.eye(d, dtype=dtype)
            p[f"{pre}.attn.w_glo"] = _he(rng, (c, c), c, dtype)
            p[f"{pre}.lc.weight"] = _he(rng, (c, c, 3, 3), c * 9, dtype)
            p[f"{pre}.lc.bias"] = np.zeros(c, dtype)
            p[f"{pre}.bn2.gamma"] = np.ones(c, dtype)
            p[f"{pre}.bn2.beta"] = np.zeros(c, dtype)
            buffers[f"{pre}.bn2.running_mean"] = np.zeros(c, dtype)
            buffers[f"{pre}.bn2.running_var"] = np.ones(c, dtype)
            p[f"{pre}.mlp.fc1.weight"] = _he(rng, (r * c, c, 1, 1), c, dtype)
            p[f"{pre}.mlp.fc1.bias"] = np.zeros(r * c, dtype)
            p[f"{pre}.mlp.fc2.weight"] = _he(rng, (c, r * c, 1, 1), r * c, dtype)
            p[f"{pre}.mlp.fc2.bias"] = np.zeros(c, dtype)

    p["cls.weight"] = _he(rng, (c, 2), c, dtype)
    p["cls.bias"] = np.zeros(2, dtype)
    center_dim = 2 if variant.ctc_dimensionality == "logits" else c
    p["cls.centers"] = np.eye(2, center_dim, dtype=dtype)

    params = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in p.items()}
    return params, buffers


# ----------------------------------------------------------------------
# the model container
# ----------------------------------------------------------------------
class Dtn:
    """Parameters, buffers and configuration of one network instance.

    ``check_contracts`` turns on per-forward assertions on attention rows,
    the MoE map range and scale-factor finiteness. It defaults to on for
    64-bit models.
    """

    def __init__(
        self,
        config: DtnConfig,
        variant: VariantSpec | None = None,
        params: dict[str, Tensor] | None = None,
        buffers: dict[str, np.ndarray] | None = None,
        dtype=np.float64,
        check_contracts: bool | None = None,
    ):
        self.config = config
        self.variant = variant or VariantSpec()
        if params is None:
            params, buffers = init_params(config, np.random.default_rng(config.seed), self.variant, dtype)
        self.params = params
        self.buffers = buffers or {}
        if check_contracts is None:
            check_contracts = self.dtype == np.float64
        self.check_contracts = check_contracts

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "Dtn":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return Dtn(self.config, self.variant, params, buffers, check_contracts=self.check_contracts)

    def astype(self, dtype) -> "Dtn":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return Dtn(self.config, self.variant, params, buffers)

    def load_state(self, other: "Dtn") -> None:
        for k, v in other.params.items():
            self.params[k].data = v.data.copy()
        for k, v in other.buffers.items():
            self.buffers[k] = v.copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None, **kw) -> ForwardOutput:
        return dtn_forward(self, x, train=train, rng=rng, **kw)

    __call__ = forward


# ----------------------------------------------------------------------
# forward pieces
# ----------------------------------------------------------------------
def _bn(model: Dtn, x: Tensor, prefix: str, train: bool) -> Tensor:
    return T.batch_norm(
        x,
        model[f"{prefix}.gamma"],
        model[f"{prefix}.beta"],
        model.buffers[f"{prefix}.running_mean"],
        model.buffers[f"{prefix}.running_var"],
        training=train,
    )


def backbone_forward(model: Dtn, x: Tensor, train: bool = False) -> Tensor:
    """VGG-style stages of conv3x3 -> BN -> ReLU -> 2x2 max pool."""
    cfg = model.config
    expect = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if tuple(x.shape[-3:]) != expect:
        raise DimensionError(f"input {x.shape} does not match configured size {expect}")
    for k in range(len(cfg.channels)):
        pre = f"backbone.{k}"
        x = T.conv2d(x, model[f"{pre}.conv.weight"], model[f"{pre}.conv.bias"], padding=1)
        x = T.relu(_bn(model, x, f"{pre}.bn", train))
        x = T.max_pool2d(x, 2)
    return x


def _expert(model: Dtn, x: Tensor, i: int) -> Tensor:
    pre = f"moe.expert.{i}"
    hidden = T.relu(T.conv2d(x, model[f"{pre}.conv1.weight"], model[f"{pre}.conv1.bias"]))
    return T.sigmoid(T.conv2d(hidden, model[f"{pre}.conv2.weight"], model[f"{pre}.conv2.bias"]))


def _noise(model: Dtn, x_loc: Tensor, rng: np.random.Generator) -> np.ndarray:
    cfg = model.config
    scale = cfg.noise_scale * float(x_loc.data.std())
    if cfg.noise_kind == "gaussian":
        noise = rng.standard_normal(x_loc.shape) * scale
    else:
        # same standard deviation as the gaussian case
        noise = rng.uniform(-1.0, 1.0, x_loc.shape) * scale * math.sqrt(3.0)
    return noise.astype(x_loc.dtype)


def moe_forward(
    model: Dtn,
    x_loc: Tensor,
    train: bool = False,
    rng: np.random.Generator | None = None,
    gate_override: float | None = None,
) -> tuple[Tensor, Tensor]:
    """Gate backbone features by the fused expert attention map.

    Returns ``(x_moe, A)`` where ``A`` has shape ``(n, 1, h, w)``. Noise is only
    added in training mode. ``gate_override`` replaces every ``sigmoid(theta_i)``
    by a constant (used to probe limits).
    """
    cfg = model.config
    B = cfg.num_experts
    add_noise = train and cfg.noise_kind != "none" and cfg.noise_scale > 0
    if add_noise and rng is None:
        raise ContractError("training-mode MoE needs a noise generator")
    maps = []
    for i in range(B):
        inp = x_loc + _noise(model, x_loc, rng) if add_noise else x_loc
        maps.append(_expert(model, inp, i))
    stacked = T.concat(maps, axis=1)
    if gate_override is not None:
        stacked = stacked * gate_override
    elif model.variant.mas_in_moe:
        gate = T.reshape(T.sigmoid(model["moe.theta"]), (1, B, 1, 1))
        stacked = stacked * gate
    A = T.sigmoid(T.channel_max_pool(stacked, axis=1, keepdims=True))
    if model.check_contracts:
        if not np.isfinite(A.data).all():
            raise NumericError("non-finite MoE attention map")
        if A.data.min() < 0.5 - MAP_TOL or A.data.max() > SIGMOID_ONE + MAP_TOL:
            raise ContractError("MoE attention map left [0.5, sigmoid(1)]")
    return x_loc * A, A


def _head_scale(model: Dtn, j: int, scale_override: float | None) -> Tensor | float:
    """Multiplier applied to ``Q K^T`` per head, with 1/sqrt(head_dim) folded in."""
    inv = 1.0 / math.sqrt(model.config.head_dim)
    if scale_override is not None:
        return scale_override * inv
    if model.variant.attention_kind == "mas":
        theta = model[f"levt.block.{j}.attn.theta"]
        if model.check_contracts and not np.isfinite(theta.data).all():
            raise NumericError(f"non-finite scale factors in block {j}")
        gate = T.sigmoid(theta) * inv
        return T.reshape(gate, (1, model.config.heads, 1, 1))
    return inv


def smhsa_forward(
    model: Dtn, tokens: Tensor, j: int, scale_override: float | None = None
) -> tuple[Tensor, Tensor]:
    """Scaled multi-head self-attention over ``(n, hw, c)`` tokens.

    Returns the aggregated ``(n, hw, c)`` output and the ``(n, d, hw, hw)``
    attention weights.
    """
    cfg = model.config
    d, hd = cfg.heads, cfg.head_dim
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.c:
        raise DimensionError(f"tokens must be (n, hw, {cfg.c}), got {tokens.shape}")
    n, hw, c = tokens.shape
    pre = f"levt.block.{j}.attn"
    heads = T.transpose(T.reshape(tokens, (n, hw, d, hd)), (0, 2, 1, 3))
    q = T.matmul(heads, model[f"{pre}.w_query"])
    k = T.matmul(heads, model[f"{pre}.w_key"])
    v = T.matmul(heads, model[f"{pre}.w_value"])
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    attn = T.softmax_t(scores * _head_scale(model, j, scale_override), axis=-1)
    if model.check_contracts:
        rows = attn.data.sum(axis=-1)
        if np.abs(rows - 1.0).max() > ROW_SUM_TOL or attn.data.min() < 0:
            raise ContractError(f"attention rows of block {j} are not distributions")
    if model.variant.attention_kind == "reattention" and scale_override is None:
        mixed = T.matmul(model[f"{pre}.head_mix"], T.reshape(attn, (n, d, hw * hw)))
        attn = T.reshape(mixed, (n, d, hw, hw))
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, hw, c))
    return T.matmul(out, model[f"{pre}.w_glo"]), attn


def transformer_block_forward(
    model: Dtn, x: Tensor, j: int, train: bool = False, scale_override: float | None = None
) -> tuple[Tensor, Tensor]:
    """One LEVT block on ``(n, c, h, w)``; returns the output and the attention."""
    n, c, h, w = x.shape
    pre = f"levt.block.{j}"
    normed = _bn(model, x, f"{pre}.bn1", train)
    tokens = T.transpose(T.reshape(normed, (n, c, h * w)), (0, 2, 1))
    glo, attn = smhsa_forward(model, tokens, j, scale_override)
    x_agg = T.reshape(T.transpose(glo, (0, 2, 1)), (n, c, h, w))
    x_lc = T.conv2d(x_agg, model[f"{pre}.lc.weight"], model[f"{pre}.lc.bias"], padding=1) + x_agg
    hidden = T.relu(T.conv2d(_bn(model, x_lc, f"{pre}.bn2", train), model[f"{pre}.mlp.fc1.weight"],
                             model[f"{pre}.mlp.fc1.bias"]))
    out = T.conv2d(hidden, model[f"{pre}.mlp.fc2.weight"], model[f"{pre}.mlp.fc2.bias"]) + x_lc
    return out, attn


def dtn_forward(
    model: Dtn,
    x,
    train: bool = False,
    rng: np.random.Generator | None = None,
    scale_override: float | None = None,
    gate_override: float | None = None,
    diagnostics: bool = False,
) -> ForwardOutput:
    """Full forward pass; accepts ``(3, H, W)`` or ``(n, 3, H, W)`` input."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype))
    elif x.dtype != model.dtype:
        x = Tensor(x.data.astype(model.dtype))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    feat = backbone_forward(model, x, train)
    backbone = feat
    moe_map = None
    if model.variant.use_moe:
        feat, A = moe_forward(model, feat, train, rng, gate_override)
        moe_map = A.data[:, 0]
    attention = []
    if model.variant.use_levt:
        feat = feat + model["levt.pos"]
        for j in range(model.config.depth):
            feat, attn = transformer_block_forward(model, feat, j, train, scale_override)
            if diagnostics:
                attention.append(attn.data)
    features = T.global_avg_pool(feat)
    logits = T.matmul(features, model["cls.weight"]) + model["cls.bias"]
    return ForwardOutput(logits, features, backbone, attention, moe_map)


def param_groups(model: Dtn) -> dict[str, int]:
    """Parameter counts per top-level component."""
    out: dict[str, int] = {}
    for name, t in model.params.items():
        key = name.split(".")[0]
        out[key] = out.get(key, 0) + t.size
    return out


def clone_params(model: Dtn) -> dict[str, np.ndarray]:
    return copy.deepcopy({k: v.data for k, v in model.params.items()})
