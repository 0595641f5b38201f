"""Ablation variants: the component ladder and attention/loss alternatives."""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import tensor as T
from .config import DtnConfig, VariantSpec
from .model import Dtn, init_params

LADDER = {
    "baseline": VariantSpec.baseline(),
    "+levt": VariantSpec.baseline(use_levt=True),
    "+levt+moe": VariantSpec.baseline(use_levt=True, use_moe=True),
    "+levt+moe+mas": VariantSpec(),
}


def build_variant(spec: VariantSpec, config: DtnConfig, rng=None, dtype=np.float64) -> Dtn:
    """Instantiate the model described by ``spec``.

    Scale factors never draw from ``rng``, so toggling MAS leaves every other
    initial weight unchanged at a fixed seed.
    """
    spec.validate()
    params, buffers = init_params(config, rng, spec, dtype)
    return Dtn(config, spec, params, buffers)


def mas_param_delta(config: DtnConfig) -> int:
    """Scalars added by MAS: one per expert plus one per head per block."""
    return config.num_experts + config.depth * config.heads


def forward_op_counts(model: Dtn, x) -> Counter:
    """Arithmetic tallies for one eval-mode forward pass."""
    with T.no_grad(), T.count_ops() as counter:
        model.forward(x, train=False)
    return counter
