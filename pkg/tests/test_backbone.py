import numpy as np
import pytest
import torch

from mtscene.backbone import (BackboneConfig, WeightLoadError, build_backbone,
                              encode, export_weights, load_weights)


def canonical():
    return BackboneConfig()


def toy():
    return BackboneConfig(stage_blocks=[1, 1, 1, 1], stage_channels=[8, 16, 32, 64])


def analytic_param_count(cfg: BackboneConfig) -> int:
    """Layer-by-layer closed-form sum, independent of parameter enumeration."""

    def bn(c):
        return 2 * c

    def basic(cin, cout, stride):
        n = 9 * cin * cout + bn(cout) + 9 * cout * cout + bn(cout)
        if stride != 1 or cin != cout:
            n += cin * cout + bn(cout)
        return n

    def bottleneck(cin, cout, stride):
        mid = cout // 4
        n = cin * mid + bn(mid) + 9 * mid * mid + bn(mid) + mid * cout + bn(cout)
        if stride != 1 or cin != cout:
            n += cin * cout + bn(cout)
        return n

    block = basic if cfg.block_type == "basic" else bottleneck
    total = 49 * cfg.input_channels * cfg.stage_channels[0] + bn(cfg.stage_channels[0])
    cin = cfg.stage_channels[0]
    for i, (blocks, cout) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
        stride = 1 if i == 0 else 2
        total += block(cin, cout, stride)
        total += (blocks - 1) * block(cout, cout, 1)
        cin = cout
    return total


class TestBuildAndEncode:
    def test_canonical_stage_shapes(self):
        bb = build_backbone(canonical())
        feats = encode(bb, torch.randn(1, 3, 384, 384))
        assert tuple(feats.s4.shape) == (1, 64, 96, 96)
        assert tuple(feats.s8.shape) == (1, 128, 48, 48)
        assert tuple(feats.s16.shape) == (1, 256, 24, 24)
        assert tuple(feats.s32.shape) == (1, 512, 12, 12)

    def test_toy_stage_shapes(self):
        bb = build_backbone(toy())
        feats = encode(bb, torch.randn(1, 3, 64, 64))
        assert tuple(feats.s32.shape) == (1, 64, 2, 2)

    def test_stride_schedule_property(self):
        bb = build_backbone(toy())
        for h, w in [(64, 96), (128, 64)]:
            feats = encode(bb, torch.randn(1, 3, h, w))
            for stride, t in zip((4, 8, 16, 32), feats.as_tuple()):
                assert t.shape[-2:] == (h // stride, w // stride)

    def test_indivisible_input_names_requirement(self):
        bb = build_backbone(toy())
        with pytest.raises(ValueError, match="divisible by 32"):
            bb(torch.randn(1, 3, 60, 64))

    def test_deterministic_forward(self):
        bb = build_backbone(toy()).eval()
        x = torch.randn(1, 3, 64, 64)
        a, b = bb(x), bb(x)
        for t1, t2 in zip(a.as_tuple(), b.as_tuple()):
            assert torch.equal(t1, t2)

    def test_canonical_parameter_count_near_11_2m(self):
        bb = build_backbone(canonical())
        count = sum(p.numel() for p in bb.parameters())
        assert count == analytic_param_count(canonical())
        assert abs(count / 1e6 - 11.2) < 0.1

    def test_toy_parameter_count_matches_layer_table(self):
        bb = build_backbone(toy())
        assert sum(p.numel() for p in bb.parameters()) == analytic_param_count(toy())

    def test_bottleneck_parameter_count_matches_layer_table(self):
        cfg = BackboneConfig(stage_blocks=[1, 1, 2, 1],
                             stage_channels=[16, 32, 64, 128],
                             block_type="bottleneck")
        bb = build_backbone(cfg)
        assert sum(p.numel() for p in bb.parameters()) == analytic_param_count(cfg)


class TestConfigValidation:
    def test_rejects_wrong_stage_count(self):
        with pytest.raises(ValueError, match="4 stages"):
            build_backbone(BackboneConfig(stage_blocks=[2, 2, 2]))

    def test_rejects_nonpositive_channels(self):
        with pytest.raises(ValueError, match="positive"):
            build_backbone(BackboneConfig(stage_channels=[64, 0, 256, 512]))


class TestWeightsFile:
    def test_round_trip(self, tmp_path):
        src = build_backbone(toy())
        path = tmp_path / "weights.npz"
        export_weights(src, path)
        dst = build_backbone(BackboneConfig(stage_blocks=[1, 1, 1, 1],
                                            stage_channels=[8, 16, 32, 64],
                                            pretrained_init=str(path)))
        x = torch.randn(1, 3, 64, 64)
        src.eval(), dst.eval()
        for a, b in zip(src(x).as_tuple(), dst(x).as_tuple()):
            assert torch.allclose(a, b)

    def test_shape_mismatch_names_first_bad_tensor(self, tmp_path):
        src = build_backbone(toy())
        path = tmp_path / "weights.npz"
        export_weights(src, path)
        other = BackboneConfig(stage_blocks=[1, 1, 1, 1],
                               stage_channels=[8, 16, 32, 128])
        with pytest.raises(WeightLoadError, match="shape mismatch for tensor"):
            load_weights(build_backbone(other), path)

    def test_missing_file(self):
        cfg = toy()
        cfg.pretrained_init = "/nonexistent/weights.npz"
        with pytest.raises(WeightLoadError, match="not found"):
            build_backbone(cfg)

    def test_missing_tensor_named(self, tmp_path):
        src = build_backbone(toy())
        arrays = {k: v.numpy() for k, v in src.state_dict().items()}
        first = sorted(arrays)[0]
        del arrays[first]
        path = tmp_path / "weights.npz"
        np.savez(path, **arrays)
        with pytest.raises(WeightLoadError, match=f"missing tensor '{first}'"):
            load_weights(build_backbone(toy()), path)


def test_freeze_norm_stats_flag():
    cfg = toy()
    cfg.freeze_norm_stats = True
    bb = build_backbone(cfg).train()
    x = torch.randn(4, 3, 64, 64)
    before = [m.running_mean.clone() for m in bb.modules()
              if isinstance(m, torch.nn.BatchNorm2d)]
    bb(x)
    after = [m.running_mean for m in bb.modules()
             if isinstance(m, torch.nn.BatchNorm2d)]
    for b, a in zip(before, after):
        assert torch.equal(b, a)


def test_unfrozen_norm_stats_update():
    bb = build_backbone(toy()).train()
    x = torch.randn(4, 3, 64, 64) + 3.0
    before = [m.running_mean.clone() for m in bb.modules()
              if isinstance(m, torch.nn.BatchNorm2d)]
    bb(x)
    after = [m.running_mean for m in bb.modules()
             if isinstance(m, torch.nn.BatchNorm2d)]
    assert any(not torch.equal(b, a) for b, a in zip(before, after))
