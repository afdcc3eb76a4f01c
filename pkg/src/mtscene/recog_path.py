"""Scene recognition head.

The segmentation path's stride-4 class scores are discretized to a one-hot
semantic message (no gradient flows back through it), compressed by a 3-layer
strided extractor with channel attention, and fused with the backbone's RGB
features by a sigmoid gate. A global-average-pooled linear classifier emits
log-posteriors, and the same weights drive class activation maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass
class RecogPathConfig:
    num_scene_classes: int = 16
    # Channels of the three stride-2 extractor blocks; the last entry must
    # equal the backbone's stride-32 channel count so F_M matches F_I's shape.
    extractor_channels: list[int] = field(default_factory=lambda: [64, 128, 512])
    attention_reduction: int = 16
    fusion_channels: int = 512
    gate_mode: str = "learned"  # "learned" or "constant" (ablation: gate == 0.5)

    def validate(self) -> None:
        if self.num_scene_classes < 1:
            raise ValueError("num_scene_classes must be positive")
        if len(self.extractor_channels) != 3:
            raise ValueError("extractor_channels must list exactly 3 stages")
        if self.gate_mode not in ("learned", "constant"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")


@dataclass
class SceneLogits:
    """Pre-softmax scores f and log-posteriors y = f - logsumexp(f)."""

    f: Tensor
    y: Tensor


@dataclass
class FusionFeatures:
    f_m: Tensor   # semantic representation (extractor output)
    f_i: Tensor   # RGB representation (backbone stride-32)
    f_ma: Tensor  # sigmoid gate, elementwise in (0, 1)
    f_ia: Tensor  # transformed RGB map
    f_a: Tensor   # gated product f_ma * f_ia


def one_hot_encode(seg_logits: Tensor) -> Tensor:
    """Per-pixel argmax as a one-hot float tensor, detached from the graph.

    Ties pick the lowest class index. Accepts (K, H, W) or (B, K, H, W);
    class dim stays where it was.
    """
    detached = seg_logits.detach()
    cls_dim = 0 if detached.dim() == 3 else 1
    idx = detached.argmax(dim=cls_dim)
    one_hot = F.one_hot(idx, num_classes=detached.shape[cls_dim])
    # one_hot appends the class dim last; move it back.
    return one_hot.movedim(-1, cls_dim).to(seg_logits.dtype)


class ChannelAttention(nn.Module):
    """Per-channel gate from pooled descriptors.

    Average- and max-pooled channel vectors pass through a shared two-layer
    bottleneck (reduction ``r``); their sum goes through a sigmoid and scales
    each input channel.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction:
            raise ValueError(
                f"channels ({channels}) must be >= reduction ratio ({reduction})"
            )
        hidden = channels // reduction
        self.bottleneck = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def gate(self, x: Tensor) -> Tensor:
        """Channel weights in (0, 1), shape (B, C, 1, 1)."""
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.bottleneck(avg) + self.bottleneck(mx))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


def channel_attention(module: ChannelAttention, x: Tensor) -> tuple[Tensor, Tensor]:
    """(weights, gated feature map) for a batch or single feature map."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    w = module.gate(x)
    out = x * w
    if squeeze:
        return w.squeeze(0), out.squeeze(0)
    return w, out


class SemanticExtractor(nn.Module):
    """Three stride-2 conv blocks, each followed by channel attention.

    Maps the one-hot message (K_seg x H/4 x W/4) down to the shape of the
    backbone's stride-32 features.
    """

    def __init__(self, in_channels: int, stage_channels: list[int], reduction: int):
        super().__init__()
        blocks = []
        ch = in_channels
        for out_ch in stage_channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(ch, out_ch, 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                    ChannelAttention(out_ch, reduction),
                )
            )
            ch = out_ch
        self.blocks = nn.Sequential(*blocks)

    def forward(self, m: Tensor) -> Tensor:
        h, w = m.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(
                f"semantic message dims {h}x{w} cannot survive three stride-2 blocks"
            )
        return self.blocks(m)


class GatedFusion(nn.Module):
    """Sigmoid-gated combination of semantic and RGB representations.

    Each path runs two convs; only the semantic path gets the sigmoid, and the
    result multiplies the transformed RGB map (Hadamard).
    """

    def __init__(self, semantic_channels: int, rgb_channels: int, out_channels: int,
                 gate_mode: str = "learned"):
        super().__init__()
        self.gate_mode = gate_mode
        self.semantic = nn.Sequential(
            nn.Conv2d(semantic_channels, out_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 1),
        )
        self.rgb = nn.Sequential(
            nn.Conv2d(rgb_channels, out_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 1),
        )

    def forward(self, f_m: Tensor, f_i: Tensor) -> FusionFeatures:
        if f_m.shape[-2:] != f_i.shape[-2:]:
            raise ValueError(
                f"semantic/RGB spatial mismatch: {tuple(f_m.shape)} vs {tuple(f_i.shape)}"
            )
        f_ia = self.rgb(f_i)
        if self.gate_mode == "constant":
            f_ma = torch.full_like(f_ia, 0.5)
        else:
            f_ma = torch.sigmoid(self.semantic(f_m))
        return FusionFeatures(f_m=f_m, f_i=f_i, f_ma=f_ma, f_ia=f_ia, f_a=f_ma * f_ia)


def gated_fusion(module: GatedFusion, f_m: Tensor, f_i: Tensor) -> FusionFeatures:
    squeeze = f_m.dim() == 3
    if squeeze:
        f_m, f_i = f_m.unsqueeze(0), f_i.unsqueeze(0)
    out = module(f_m, f_i)
    if squeeze:
        return FusionFeatures(*(t.squeeze(0) for t in
                                (out.f_m, out.f_i, out.f_ma, out.f_ia, out.f_a)))
    return out


class SceneClassifier(nn.Module):
    """Global average pooling + linear layer + stable log-softmax."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(in_channels, num_classes)

    def forward(self, f_a: Tensor) -> SceneLogits:
        squeeze = f_a.dim() == 3
        if squeeze:
            f_a = f_a.unsqueeze(0)
        pooled = f_a.mean(dim=(-2, -1))
        f = self.linear(pooled)
        y = F.log_softmax(f, dim=-1)
        if squeeze:
            f, y = f.squeeze(0), y.squeeze(0)
        return SceneLogits(f=f, y=y)


def classify(module: SceneClassifier, f_a: Tensor) -> SceneLogits:
    return module(f_a)


def cam(f_a: Tensor, classifier: SceneClassifier, class_idx: int,
        output_size: tuple[int, int] | None = None) -> tuple[Tensor, Tensor]:
    """Class activation map for one class.

    Returns (raw, rendered): ``raw`` is the weighted channel sum at feature
    resolution, whose spatial mean equals f_t - bias_t; ``rendered`` is
    bilinearly upsampled to ``output_size`` and min-max scaled into [0, 1].
    """
    num_classes = classifier.linear.out_features
    if not 0 <= class_idx < num_classes:
        raise IndexError(f"class {class_idx} out of range [0, {num_classes})")
    squeeze = f_a.dim() == 3
    if squeeze:
        f_a = f_a.unsqueeze(0)
    weights = classifier.linear.weight[class_idx]  # (C,)
    raw = torch.einsum("bchw,c->bhw", f_a, weights)
    rendered = raw.unsqueeze(1)
    if output_size is not None:
        rendered = F.interpolate(rendered, size=output_size, mode="bilinear",
                                 align_corners=False)
    rendered = rendered.squeeze(1)
    lo = rendered.amin(dim=(-2, -1), keepdim=True)
    hi = rendered.amax(dim=(-2, -1), keepdim=True)
    span = torch.where(hi > lo, hi - lo, torch.ones_like(hi))
    rendered = (rendered - lo) / span
    if squeeze:
        raw, rendered = raw.squeeze(0), rendered.squeeze(0)
    return raw, rendered


class RecogPath(nn.Module):
    """One-hot message -> extractor -> gated fusion with RGB -> classifier."""

    def __init__(self, config: RecogPathConfig, num_seg_classes: int,
                 rgb_channels: int):
        super().__init__()
        config.validate()
        if config.extractor_channels[-1] != rgb_channels:
            raise ValueError(
                f"extractor output channels ({config.extractor_channels[-1]}) must "
                f"equal backbone stride-32 channels ({rgb_channels})"
            )
        self.config = config
        self.extractor = SemanticExtractor(
            num_seg_classes, config.extractor_channels, config.attention_reduction
        )
        self.fusion = GatedFusion(
            config.extractor_channels[-1], rgb_channels, config.fusion_channels,
            gate_mode=config.gate_mode,
        )
        self.classifier = SceneClassifier(config.fusion_channels,
                                          config.num_scene_classes)

    def forward(self, seg_logits_s4: Tensor, f_i: Tensor) -> tuple[SceneLogits, FusionFeatures]:
        message = one_hot_encode(seg_logits_s4)
        if self.config.gate_mode == "constant":
            # Ablation: the semantic branch is cut, so skip its compute.
            f_m = message.new_zeros(
                (*f_i.shape[:-3], self.config.extractor_channels[-1], *f_i.shape[-2:])
            )
        else:
            f_m = self.extractor(message)
        fused = self.fusion(f_m, f_i)
        return self.classifier(fused.f_a), fused
