import csv
import json
import math

import numpy as np
import pytest

from conftest import jitter, toy_config
from dtn.config import VariantSpec
from dtn.data import generate_dataset
from dtn.diagnostics import (
    attention_diversity,
    cam_from,
    export_features,
    grad_cam,
    pairwise_head_cosine,
    read_pgm,
    row_entropy,
    write_pgm,
)
from dtn.model import Dtn


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(12, 16, seed=1).train


class TestHeadCosine:
    def test_identical_heads(self):
        a = np.random.default_rng(0).random((3, 1, 4, 4))
        assert pairwise_head_cosine(np.repeat(a, 4, axis=1)) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_one_hot_rows(self):
        eye = np.eye(4)
        attn = np.stack([eye, eye[::-1]])[None]
        # the two maps share no nonzero entry
        assert pairwise_head_cosine(attn) == 0.0

    def test_hand_value(self):
        h1 = np.array([[1.0, 0.0], [0.5, 0.5]])
        h2 = np.array([[0.5, 0.5], [0.5, 0.5]])
        expect = (0.5 + 0.25 + 0.25) / (math.sqrt(1.5) * 1.0)
        assert pairwise_head_cosine(np.stack([h1, h2])[None]) == pytest.approx(expect, rel=1e-14)

    def test_excludes_self_pairs_and_averages_batch(self):
        h = np.eye(3)
        u = np.full((3, 3), 1 / 3)
        attn = np.stack([np.stack([h, h, u]), np.stack([h, u, u])])
        c = 1 / math.sqrt(3)
        expect = ((1 + c + c) / 3 + (c + c + 1) / 3) / 2
        assert pairwise_head_cosine(attn) == pytest.approx(expect, rel=1e-14)

    def test_range(self):
        a = np.random.default_rng(1).random((2, 5, 6, 6))
        v = pairwise_head_cosine(a)
        assert -1 <= v <= 1


class TestEntropy:
    def test_uniform_rows(self):
        attn = np.full((2, 3, 16, 16), 1 / 16)
        np.testing.assert_allclose(row_entropy(attn), math.log(16), rtol=1e-15)

    def test_one_hot_rows(self):
        attn = np.broadcast_to(np.eye(5), (1, 2, 5, 5))
        np.testing.assert_array_equal(row_entropy(attn), 0.0)


class TestAttentionReport:
    def test_fresh_model_scales_half(self, samples):
        rep = attention_diversity(Dtn(toy_config()), samples[:3])
        assert len(rep.blocks) == 2
        for b in rep.blocks:
            assert b.scale == [0.5, 0.5]
            assert -1 <= b.head_cosine <= 1
            assert all(0 <= e <= math.log(16) + 1e-12 for e in b.head_entropy)

    def test_no_levt_is_empty(self, samples):
        rep = attention_diversity(Dtn(toy_config(), VariantSpec.baseline()), samples[:2])
        assert rep.blocks == []

    def test_identical_heads_report_unit_similarity(self, samples):
        model = jitter(Dtn(toy_config()))
        for j in range(2):
            model.params[f"levt.block.{j}.attn.w_query"].data[...] = 0.0
        rep = attention_diversity(model, samples[:2])
        for b in rep.blocks:
            assert b.head_cosine == pytest.approx(1.0, abs=1e-14)
            assert b.head_entropy == pytest.approx([math.log(16)] * 2, abs=1e-12)

    def test_write(self, samples, tmp_path):
        rep = attention_diversity(Dtn(toy_config()), samples[:2])
        rep.write(tmp_path / "r.json")
        body = json.loads((tmp_path / "r.json").read_text())
        assert [b["block"] for b in body["blocks"]] == [0, 1]


class TestGradCam:
    def test_range_shape_and_determinism(self, samples):
        model = jitter(Dtn(toy_config()))
        a = grad_cam(model, samples[0])
        b = grad_cam(model, samples[0])
        assert a.shape == (4, 4)
        assert a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, b)

    def test_does_not_touch_params(self, samples):
        model = jitter(Dtn(toy_config()))
        before = {k: v.data.copy() for k, v in model.params.items()}
        grad_cam(model, samples[1], target_class=0)
        assert all(np.array_equal(before[k], v.data) for k, v in model.params.items())
        assert all(v.grad is None for v in model.params.values())

    def test_single_active_channel_oracle(self, samples):
        model = jitter(Dtn(toy_config(), VariantSpec.baseline()))
        feats = model.forward(samples[2].image[None]).backbone.data[0]
        k = int(feats.std(axis=(1, 2)).argmax())
        w = model.params["cls.weight"].data
        w[...] = 0.0
        w[k, 1] = 2.0
        cam = grad_cam(model, samples[2], target_class=1)
        feat = feats[k]
        expect = (feat - feat.min()) / (feat.max() - feat.min())
        np.testing.assert_allclose(cam, expect, rtol=1e-12, atol=1e-15)

    def test_localizes_constructed_region(self):
        feat = np.zeros((3, 6, 6))
        feat[1, 2:4, 1:3] = 1.0
        feat[0] = 0.7
        grads = np.zeros_like(feat)
        grads[1] = 1.0
        cam = cam_from(feat, grads)
        assert set(zip(*np.nonzero(cam))) == {(r, c) for r in (2, 3) for c in (1, 2)}

    def test_zero_gradient_warns(self, caplog):
        cam = cam_from(np.ones((2, 3, 3)), np.zeros((2, 3, 3)))
        assert not cam.any() and "flat" in caplog.text


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(img, tmp_path / "m.pgm")
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_allclose(read_pgm(tmp_path / "m.pgm"), img, atol=0.5 / 255 + 1e-12)


def test_export_features(samples, tmp_path):
    model = jitter(Dtn(toy_config()))
    export_features(model, samples, tmp_path / "a.csv")
    export_features(model, samples, tmp_path / "b.csv")
    rows = list(csv.reader((tmp_path / "a.csv").open()))
    assert rows[0][:2] == ["sample_id", "label"] and len(rows[0]) == 2 + 8
    assert len(rows) - 1 == len(samples)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    feats = model.forward(np.stack([s.image for s in samples])).features.data
    np.testing.assert_array_equal(np.array([[float(v) for v in r[2:]] for r in rows[1:]]), feats)
