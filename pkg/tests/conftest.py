import json

import numpy as np
import pytest

from dtn.config import DtnConfig, VariantSpec
from dtn.model import Dtn

TOY = dict(image_size=16, channels=(4, 8), num_experts=2, depth=2, heads=2, mlp_ratio=2)


def toy_config(**kw) -> DtnConfig:
    return DtnConfig(**{**TOY, **kw})


def jitter(model: Dtn, seed: int = 0, scale: float = 0.3) -> Dtn:
    """Move zero/one-initialised params and BN buffers off their defaults."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.endswith(("bias", "beta", "gamma", "theta")):
            p.data = p.data + scale * rng.standard_normal(p.shape)
    for name, b in model.buffers.items():
        if name.endswith("running_mean"):
            model.buffers[name] = scale * rng.standard_normal(b.shape)
        else:
            model.buffers[name] = rng.uniform(0.5, 2.0, b.shape)
    return model


@pytest.fixture
def toy():
    return toy_config()


@pytest.fixture
def toy_model(toy):
    return jitter(Dtn(toy, VariantSpec()))


@pytest.fixture
def toy_batch(toy):
    return np.random.default_rng(123).random((3, 3, toy.image_size, toy.image_size))


def pytest_terminal_summary(terminalreporter):
    """Print the one-line verdicts recorded by the acceptance tests."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            for key, value in getattr(rep, "user_properties", ()):
                if key == "criterion":
                    lines.append(json.loads(value))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for v in sorted(lines, key=lambda v: v["n"]):
        terminalreporter.write_line(f"criterion {v['n']}: {'PASS' if v['ok'] else 'FAIL'}  {v['detail']}")
