import math

import numpy as np
import pytest

import reference
from conftest import jitter, toy_config
from dtn import tensor as T
from dtn.config import ConfigError, DtnConfig, VariantSpec
from dtn.errors import DimensionError
from dtn.gradcheck import gradcheck
from dtn.model import (
    SIGMOID_ONE,
    Dtn,
    backbone_forward,
    init_params,
    moe_forward,
    smhsa_forward,
    transformer_block_forward,
)
from dtn.tensor import Tensor


def rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


def expected_param_count(c, s, B, L, d, r, plan=(16, 32, 64), cin=3):
    backbone = 0
    for co in plan:
        backbone += co * cin * 9 + co + 2 * co
        cin = co
    hid = c // 4
    moe = B * (hid * c + hid + hid + 1) + B
    hd = c // d
    block = 2 * c + 3 * d * hd * hd + d + c * c + 9 * c * c + c + 2 * c + (r * c * c + r * c) + (c * r * c + c)
    cls = 2 * c + 2 + 4
    return backbone + moe + c * s * s + L * block + cls


class TestConfig:
    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            DtnConfig(channels=(16, 30), heads=8, image_size=16)

    def test_positive_dims(self):
        with pytest.raises(ConfigError):
            DtnConfig(depth=0)


class TestInit:
    def test_same_seed_bit_identical(self):
        cfg = DtnConfig()
        a, _ = init_params(cfg, 7)
        b, _ = init_params(cfg, 7)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_scale_factors_start_at_half(self):
        params, _ = init_params(DtnConfig(), 0)
        thetas = [v for k, v in params.items() if k.endswith("theta")]
        assert len(thetas) == 1 + DtnConfig().depth
        for t in thetas:
            assert np.all(T.sigmoid(t).data == 0.5)

    def test_centers_are_one_hot(self):
        params, _ = init_params(DtnConfig(), 0)
        np.testing.assert_array_equal(params["cls.centers"].data, [[1.0, 0.0], [0.0, 1.0]])

    def test_param_count_formula(self):
        cfg = DtnConfig(channels=(16, 32, 64), image_size=32, num_experts=2, depth=6, heads=8, mlp_ratio=4)
        assert cfg.c == 64 and cfg.feature_size == 4
        assert Dtn(cfg).param_count() == expected_param_count(64, 4, 2, 6, 8, 4)


class TestBackbone:
    def test_shape(self):
        model = Dtn(DtnConfig())
        out = backbone_forward(model, Tensor(np.zeros((1, 3, 32, 32))))
        assert out.shape == (1, 64, 4, 4)

    def test_zero_propagation(self):
        model = Dtn(DtnConfig())
        out = backbone_forward(model, Tensor(np.zeros((2, 3, 32, 32))), train=False)
        assert np.all(out.data == 0)

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            backbone_forward(Dtn(DtnConfig()), Tensor(np.zeros((1, 3, 16, 16))))

    def test_matches_reference(self, toy_model, toy_batch):
        out = backbone_forward(toy_model, Tensor(toy_batch)).data
        p = {k: v.data for k, v in toy_model.params.items()}
        ref = reference.backbone(p, toy_model.buffers, toy_batch, 2)
        assert rel(out, ref) <= 1e-10


class TestMoE:
    def _feat(self, toy, seed=0):
        return Tensor(np.random.default_rng(seed).standard_normal((2, toy.c, 4, 4)) * 2)

    def test_map_bounds(self, toy_model, toy):
        for seed in range(5):
            _, A = moe_forward(toy_model, self._feat(toy, seed))
            assert A.data.min() >= 0.5 and A.data.max() <= SIGMOID_ONE
        assert SIGMOID_ONE == pytest.approx(0.73106, abs=1e-5)

    def test_zero_gate_limit(self, toy):
        model = Dtn(toy_config(num_experts=1))
        x = self._feat(toy)
        x_moe, A = moe_forward(model, x, gate_override=0.0)
        assert np.all(A.data == 0.5)
        np.testing.assert_array_equal(x_moe.data, 0.5 * x.data)

    def test_eval_matches_reference(self, toy_model, toy):
        x = self._feat(toy, 3)
        x_moe, A = moe_forward(toy_model, x)
        p = {k: v.data for k, v in toy_model.params.items()}
        ref_x, ref_A = reference.moe(p, x.data, 2)
        assert rel(x_moe.data, ref_x) <= 1e-10
        assert rel(A.data[:, 0], ref_A) <= 1e-10

    def test_eval_has_no_noise(self, toy_model, toy):
        x = self._feat(toy)
        a, _ = moe_forward(toy_model, x, train=False, rng=np.random.default_rng(1))
        b, _ = moe_forward(toy_model, x, train=False, rng=np.random.default_rng(2))
        np.testing.assert_array_equal(a.data, b.data)

    def test_train_noise_changes_output(self, toy_model, toy):
        x = self._feat(toy)
        a, _ = moe_forward(toy_model, x, train=True, rng=np.random.default_rng(1))
        b, _ = moe_forward(toy_model, x, train=True, rng=np.random.default_rng(2))
        assert not np.array_equal(a.data, b.data)


class TestSmhsa:
    def _tokens(self, toy, seed=0):
        return Tensor(np.random.default_rng(seed).standard_normal((2, 16, toy.c)))

    def test_rows_sum_to_one(self, toy_model, toy):
        for seed in range(5):
            _, attn = smhsa_forward(toy_model, self._tokens(toy, seed), 0)
            assert np.abs(attn.data.sum(-1) - 1).max() <= 1e-6
            assert attn.data.min() >= 0

    def test_zero_scale_is_uniform_mean(self, toy_model, toy):
        tok = self._tokens(toy)
        out, attn = smhsa_forward(toy_model, tok, 1, scale_override=0.0)
        np.testing.assert_allclose(attn.data, 1.0 / 16, rtol=1e-12)
        p = toy_model.params
        d, hd = toy.heads, toy.head_dim
        heads = []
        for i in range(d):
            v = tok.data[:, :, i * hd:(i + 1) * hd] @ p["levt.block.1.attn.w_value"].data[i]
            heads.append(v.mean(axis=1))
        expect = np.concatenate(heads, axis=-1) @ p["levt.block.1.attn.w_glo"].data
        for r in range(16):
            np.testing.assert_allclose(out.data[:, r], expect, rtol=1e-10, atol=1e-12)

    def test_unit_scale_equals_vanilla_mhsa(self, toy_model, toy):
        tok = self._tokens(toy, 4)
        out, _ = smhsa_forward(toy_model, tok, 0, scale_override=1.0)
        p = {k: v.data for k, v in toy_model.params.items()}
        ref, _ = reference.mhsa(p, tok.data, 0, toy.heads, [1.0] * toy.heads)
        assert rel(out.data, ref) <= 1e-10

    def test_learned_scale_matches_reference(self, toy_model, toy):
        tok = self._tokens(toy, 5)
        out, attn = smhsa_forward(toy_model, tok, 1)
        p = {k: v.data for k, v in toy_model.params.items()}
        ref, ref_attn = reference.mhsa(p, tok.data, 1, toy.heads, reference.sig(p["levt.block.1.attn.theta"]))
        assert rel(out.data, ref) <= 1e-10
        assert rel(attn.data, ref_attn) <= 1e-10

    def test_wrong_width(self, toy_model):
        with pytest.raises(DimensionError):
            smhsa_forward(toy_model, Tensor(np.ones((1, 16, 6))), 0)


class TestBlock:
    def test_shape_preserved(self, toy_model, toy):
        x = Tensor(np.random.default_rng(0).standard_normal((2, toy.c, 4, 4)))
        for j in range(toy.depth):
            x, _ = transformer_block_forward(toy_model, x, j)
            assert x.shape == (2, toy.c, 4, 4)

    def test_residual_identity(self, toy_model, toy):
        pre = "levt.block.0"
        for name in ("lc.weight", "lc.bias", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"):
            toy_model.params[f"{pre}.{name}"].data[...] = 0.0
        x = Tensor(np.random.default_rng(1).standard_normal((2, toy.c, 4, 4)))
        out, _ = transformer_block_forward(toy_model, x, 0)
        n, c = 2, toy.c
        normed = T.batch_norm(x, toy_model[f"{pre}.bn1.gamma"], toy_model[f"{pre}.bn1.beta"],
                              toy_model.buffers[f"{pre}.bn1.running_mean"],
                              toy_model.buffers[f"{pre}.bn1.running_var"], False)
        tokens = T.transpose(T.reshape(normed, (n, c, 16)), (0, 2, 1))
        glo, _ = smhsa_forward(toy_model, tokens, 0)
        x_agg = glo.data.transpose(0, 2, 1).reshape(n, c, 4, 4)
        np.testing.assert_array_equal(out.data, x_agg)

    def test_matches_reference(self, toy_model, toy):
        x = np.random.default_rng(2).standard_normal((2, toy.c, 4, 4))
        out, _ = transformer_block_forward(toy_model, Tensor(x), 1)
        p = {k: v.data for k, v in toy_model.params.items()}
        ref, _ = reference.block(p, toy_model.buffers, x, 1, toy.heads, reference.sig(p["levt.block.1.attn.theta"]))
        assert rel(out.data, ref) <= 1e-10


class TestDtnForward:
    def test_shapes(self):
        model = Dtn(DtnConfig(depth=2))
        out = model.forward(np.random.default_rng(0).random((3, 32, 32)), diagnostics=True)
        assert out.logits.shape == (1, 2)
        assert out.features.shape == (1, 64)
        assert len(out.attention) == 2 and out.attention[0].shape == (1, 8, 16, 16)
        assert out.moe_map.shape == (1, 4, 4)

    def test_deterministic_in_eval(self, toy_model, toy_batch):
        a = toy_model.forward(toy_batch).logits.data
        b = toy_model.forward(toy_batch.copy()).logits.data
        np.testing.assert_array_equal(a, b)

    def test_matches_reference_end_to_end(self, toy_model, toy_batch):
        out = toy_model.forward(toy_batch, diagnostics=True)
        logits, feats, attns = reference.forward(toy_model, toy_batch)
        assert rel(out.logits.data, logits) <= 1e-10
        assert rel(out.features.data, feats) <= 1e-10
        for a, b in zip(out.attention, attns):
            assert rel(a, b) <= 1e-10

    def test_tiny_8x8_config(self):
        cfg = DtnConfig(image_size=8, channels=(8,), num_experts=2, depth=1, heads=2, mlp_ratio=2)
        model = jitter(Dtn(cfg), 5)
        x = np.random.default_rng(9).random((2, 3, 8, 8))
        logits, _, _ = reference.forward(model, x)
        assert rel(model.forward(x).logits.data, logits) <= 1e-10

    def test_train_mode_updates_running_stats_only_in_train(self, toy_model, toy_batch):
        before = {k: v.copy() for k, v in toy_model.buffers.items()}
        toy_model.forward(toy_batch, train=False)
        assert all(np.array_equal(before[k], v) for k, v in toy_model.buffers.items())
        toy_model.forward(toy_batch, train=True, rng=np.random.default_rng(0))
        assert any(not np.array_equal(before[k], v) for k, v in toy_model.buffers.items())


def _slice_params(model, rng, count=10):
    names = sorted(model.params)
    return [model.params[names[i]] for i in rng.choice(len(names), size=count, replace=False)]


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient_eval(seed, toy):
    model = jitter(Dtn(toy), seed)
    x = np.random.default_rng(seed).random((2, 3, 16, 16))
    w = np.random.default_rng(seed + 100).standard_normal((2, 2))
    rng = np.random.default_rng(seed)
    picked = _slice_params(model, rng)
    err = gradcheck(lambda: (model.forward(x).logits * w).sum(), picked, max_entries=10, rng=rng)
    assert err < 1e-4


def test_full_model_gradient_train_mode(toy):
    model = jitter(Dtn(toy_config(noise_kind="none")), 11)
    x = np.random.default_rng(11).random((3, 3, 16, 16))
    rng = np.random.default_rng(11)
    picked = _slice_params(model, rng)
    saved = {k: v.copy() for k, v in model.buffers.items()}

    def f():
        model.buffers.update({k: v.copy() for k, v in saved.items()})
        return (model.forward(x, train=True).logits ** 2).sum()

    # biases ahead of a train-mode BN have an exactly zero gradient; the
    # numeric side is cancellation noise near 1e-7 against gradients of order 1-10
    assert gradcheck(f, picked, max_entries=10, rng=rng, floor=1e-3) < 1e-4


def test_contract_checks_on_by_default_in_float64(toy):
    assert Dtn(toy).check_contracts
    assert not Dtn(toy, dtype=np.float32).check_contracts


def test_theta_values_stay_finite_and_bounded(toy_model):
    for name, p in toy_model.params.items():
        if name.endswith("theta"):
            s = T.sigmoid(p).data
            assert np.all(np.isfinite(p.data)) and np.all((s > 0) & (s < 1))


def test_float32_forward_close_to_float64(toy_model, toy_batch):
    f32 = toy_model.astype(np.float32)
    a = toy_model.forward(toy_batch).logits.data
    b = f32.forward(toy_batch).logits.data
    assert b.dtype == np.float32
    np.testing.assert_allclose(b, a, rtol=1e-3, atol=1e-4)


def test_vanilla_variant_skips_scale_params(toy):
    spec = VariantSpec(mas_in_levt=False, attention_kind="vanilla")
    model = Dtn(toy, spec)
    assert not any(k.endswith("attn.theta") for k in model.params)
    assert math.isclose(Dtn(toy).param_count() - model.param_count(), toy.depth * toy.heads)
