import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtscene.model import JointSceneModel
from mtscene.recog_path import (ChannelAttention, GatedFusion, SceneClassifier,
                                SemanticExtractor, cam, channel_attention, classify,
                                gated_fusion, one_hot_encode)
from mtscene.training import scene_loss

from conftest import tiny_model_config
from helpers import module_grad_max_rel_err


class TestOneHot:
    def test_argmax_pixel(self):
        logits = torch.tensor([2.0, 1.0, 0.5]).reshape(3, 1, 1)
        assert one_hot_encode(logits).squeeze().tolist() == [1.0, 0.0, 0.0]

    def test_tie_picks_lowest_index(self):
        logits = torch.tensor([1.0, 1.0]).reshape(2, 1, 1)
        assert one_hot_encode(logits).squeeze().tolist() == [1.0, 0.0]

    def test_every_pixel_sums_to_one(self):
        torch.manual_seed(0)
        m = one_hot_encode(torch.randn(2, 7, 5, 6))
        assert torch.equal(m.sum(dim=1), torch.ones(2, 5, 6))
        assert set(m.unique().tolist()) <= {0.0, 1.0}

    def test_blocks_gradient(self):
        logits = torch.randn(3, 4, 4, requires_grad=True)
        out = one_hot_encode(logits)
        assert not out.requires_grad


class TestChannelAttention:
    def test_zero_parameters_give_half_gate(self):
        ca = ChannelAttention(4, reduction=2)
        with torch.no_grad():
            for p in ca.parameters():
                p.zero_()
        x = torch.randn(1, 4, 3, 3)
        w, out = channel_attention(ca, x)
        assert torch.allclose(w, torch.full_like(w, 0.5))
        assert torch.allclose(out, 0.5 * x)

    def test_weights_strictly_inside_unit_interval(self):
        torch.manual_seed(0)
        ca = ChannelAttention(8, reduction=4)
        w, _ = channel_attention(ca, torch.randn(2, 8, 5, 5))
        assert (w > 0).all() and (w < 1).all()

    def test_two_channel_hand_case(self):
        # r=1 keeps the bottleneck square so the arithmetic stays scalar
        ca = ChannelAttention(2, reduction=1)
        w1 = torch.tensor([[0.5, -0.25], [0.1, 0.3]])
        w2 = torch.tensor([[0.2, 0.4], [-0.3, 0.6]])
        with torch.no_grad():
            ca.bottleneck[0].weight.copy_(w1.reshape(2, 2, 1, 1))
            ca.bottleneck[2].weight.copy_(w2.reshape(2, 2, 1, 1))
        x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]],
                          [[-1.0, 0.0], [1.0, 2.0]]]).unsqueeze(0)

        def mlp(vec):
            hidden = np.maximum(w1.numpy() @ vec, 0.0)
            return w2.numpy() @ hidden

        avg = np.array([2.5, 0.5])
        mx = np.array([4.0, 2.0])
        expected_gate = 1 / (1 + np.exp(-(mlp(avg) + mlp(mx))))
        w, out = channel_attention(ca, x)
        assert np.allclose(w.detach().squeeze().numpy(), expected_gate, atol=1e-6)
        assert torch.allclose(out, x * w)

    def test_reduction_larger_than_channels_rejected(self):
        with pytest.raises(ValueError, match="reduction"):
            ChannelAttention(4, reduction=8)

    def test_gradients(self):
        torch.manual_seed(1)
        ca = ChannelAttention(4, reduction=2).double()
        x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
        err = module_grad_max_rel_err(lambda: ca(x).sum(), ca)
        assert err < 1e-4


class TestSemanticExtractor:
    def test_canonical_shape_alignment(self):
        ext = SemanticExtractor(150, [64, 128, 512], reduction=16)
        out = ext(torch.randn(1, 150, 96, 96))
        assert tuple(out.shape) == (1, 512, 12, 12)

    def test_toy_shape(self):
        ext = SemanticExtractor(5, [8, 16, 64], reduction=8)
        out = ext(torch.randn(1, 5, 16, 16))
        assert tuple(out.shape) == (1, 64, 2, 2)

    def test_deterministic(self):
        torch.manual_seed(0)
        ext = SemanticExtractor(5, [8, 16, 64], reduction=8).eval()
        x = torch.randn(1, 5, 16, 16)
        assert torch.equal(ext(x), ext(x))

    def test_indivisible_input_rejected(self):
        ext = SemanticExtractor(5, [8, 16, 64], reduction=8)
        with pytest.raises(ValueError, match="stride-2"):
            ext(torch.randn(1, 5, 12, 12))


class TestGatedFusion:
    def _zeroed(self):
        torch.manual_seed(0)
        gf = GatedFusion(4, 4, 4)
        with torch.no_grad():
            for p in gf.semantic.parameters():
                p.zero_()
        return gf

    def test_gate_saturates_high(self):
        gf = self._zeroed()
        with torch.no_grad():
            gf.semantic[-1].bias.fill_(20.0)
        out = gf(torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3))
        assert torch.allclose(out.f_a, out.f_ia, atol=1e-6)

    def test_gate_saturates_low(self):
        gf = self._zeroed()
        with torch.no_grad():
            gf.semantic[-1].bias.fill_(-20.0)
        out = gf(torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3))
        assert out.f_a.abs().max() < 1e-6

    def test_gate_ratio_in_unit_interval(self):
        torch.manual_seed(2)
        gf = GatedFusion(4, 4, 4)
        out = gated_fusion(gf, torch.randn(4, 3, 3), torch.randn(4, 3, 3))
        nonzero = out.f_ia != 0
        ratio = out.f_a[nonzero] / out.f_ia[nonzero]
        assert (ratio > 0).all() and (ratio < 1).all()
        assert (out.f_ma > 0).all() and (out.f_ma < 1).all()
        assert torch.allclose(out.f_a, out.f_ma * out.f_ia)

    def test_gate_monotone_in_preactivation_where_rgb_positive(self):
        torch.manual_seed(3)
        gf = GatedFusion(4, 4, 4)
        f_m, f_i = torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3)
        base = gf(f_m, f_i)
        with torch.no_grad():
            gf.semantic[-1].bias[1] += 1.0  # raise channel 1's pre-activation
        bumped = gf(f_m, f_i)
        positive = base.f_ia[:, 1] > 0
        assert (bumped.f_a[:, 1][positive] > base.f_a[:, 1][positive]).all()

    def test_spatial_mismatch_rejected(self):
        gf = GatedFusion(4, 4, 4)
        with pytest.raises(ValueError, match="mismatch"):
            gf(torch.randn(1, 4, 3, 3), torch.randn(1, 4, 4, 4))

    def test_gradients(self):
        torch.manual_seed(4)
        gf = GatedFusion(3, 3, 3).double()
        f_m = torch.randn(1, 3, 2, 2, dtype=torch.float64)
        f_i = torch.randn(1, 3, 2, 2, dtype=torch.float64)
        err = module_grad_max_rel_err(lambda: gf(f_m, f_i).f_a.sum(), gf)
        assert err < 1e-4


class TestClassify:
    def test_uniform_scores_give_log_k(self):
        clf = SceneClassifier(4, 5)
        with torch.no_grad():
            clf.linear.weight.zero_()
            clf.linear.bias.zero_()
        out = classify(clf, torch.randn(4, 3, 3))
        assert torch.allclose(out.y, torch.full((5,), -math.log(5)), atol=1e-6)

    def test_huge_scores_do_not_overflow(self):
        clf = SceneClassifier(2, 2)
        with torch.no_grad():
            clf.linear.weight.copy_(torch.tensor([[1000.0, 0.0], [0.0, 0.0]]))
            clf.linear.bias.zero_()
        out = classify(clf, torch.ones(2, 1, 1))
        assert torch.isfinite(out.y).all()
        assert abs(out.y[0].item()) < 1e-3
        assert abs(out.y[1].item() + 1000.0) < 1e-3

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_posterior_sums_to_one(self, seed):
        torch.manual_seed(seed)
        clf = SceneClassifier(3, 6)
        out = classify(clf, torch.randn(2, 3, 4, 4))
        assert torch.allclose(out.y.exp().sum(-1), torch.ones(2), atol=1e-6)

    def test_shift_invariance(self):
        torch.manual_seed(5)
        clf = SceneClassifier(3, 4)
        x = torch.randn(3, 4, 4)
        before = classify(clf, x)
        with torch.no_grad():
            clf.linear.bias += 7.3  # shifts every score by the same constant
        after = classify(clf, x)
        assert torch.allclose(before.y, after.y, atol=1e-6)
        assert not torch.allclose(before.f, after.f)

    def test_gradients(self):
        torch.manual_seed(6)
        clf = SceneClassifier(3, 4).double()
        x = torch.randn(2, 3, 2, 2, dtype=torch.float64)
        labels = torch.tensor([1, 3])
        err = module_grad_max_rel_err(lambda: scene_loss(clf(x), labels), clf)
        assert err < 1e-4


class TestCam:
    def test_identity_mean_raw_plus_bias_equals_score(self):
        torch.manual_seed(7)
        clf = SceneClassifier(6, 4).double()
        for trial in range(20):
            f_a = torch.randn(6, 5, 7, dtype=torch.float64)
            scores = classify(clf, f_a).f
            for t in range(4):
                raw, _ = cam(f_a, clf, t)
                lhs = raw.mean() + clf.linear.bias[t]
                assert abs(lhs.item() - scores[t].item()) < 1e-5

    def test_zero_weight_row_gives_zero_raw_map(self):
        clf = SceneClassifier(3, 2)
        with torch.no_grad():
            clf.linear.weight[0].zero_()
        raw, _ = cam(torch.randn(3, 4, 4), clf, 0)
        assert torch.equal(raw, torch.zeros(4, 4))

    def test_rendered_map_in_unit_interval_at_full_size(self):
        torch.manual_seed(8)
        clf = SceneClassifier(3, 2)
        raw, rendered = cam(torch.randn(3, 4, 4), clf, 1, output_size=(64, 64))
        assert rendered.shape == (64, 64)
        assert rendered.min() >= 0 and rendered.max() <= 1

    def test_class_out_of_range(self):
        clf = SceneClassifier(3, 2)
        with pytest.raises(IndexError, match="out of range"):
            cam(torch.randn(3, 4, 4), clf, 2)


def test_scene_loss_isolated_from_decoder_but_not_backbone():
    torch.manual_seed(0)
    model = JointSceneModel(tiny_model_config())
    out = model(torch.randn(2, 3, 32, 32))
    loss = scene_loss(out.scene, torch.tensor([1, 0]))
    model.zero_grad()
    loss.backward()
    decoder_grads = [p.grad for p in model.seg_decoder.parameters()]
    assert all(g is None or not g.abs().any() for g in decoder_grads)
    backbone_total = sum(p.grad.abs().sum() for p in model.backbone.parameters()
                         if p.grad is not None)
    assert backbone_total > 0
    recog_total = sum(p.grad.abs().sum() for p in model.recog.parameters()
                      if p.grad is not None)
    assert recog_total > 0
