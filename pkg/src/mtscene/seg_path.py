"""Segmentation decoder: simplified SPP on the deepest features, then three
bilinear upsampling steps whose lateral connections run through fast attention
instead of plain skips. Class scores are predicted at stride 4 and upsampled
x4 to full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import FastAttention
from .backbone import ResidualEncoder, StageFeatures


@dataclass
class SegPathConfig:
    num_classes: int = 150
    decoder_channels: int = 128
    attn_channels: int = 32
    spp_grids: list[int] = field(default_factory=lambda: [1, 2, 4])
    # Which lateral levels (by skip stride) use fast attention; the rest fall
    # back to a plain projected skip. Default: all three.
    attention_levels: tuple[int, ...] = (4, 8, 16)
    upsample_mode: str = "bilinear"

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.attn_channels > self.decoder_channels:
            raise ValueError(
                f"attn_channels ({self.attn_channels}) must not exceed "
                f"decoder_channels ({self.decoder_channels})"
            )
        if list(self.spp_grids) != sorted(self.spp_grids) or any(
            g < 1 for g in self.spp_grids
        ):
            raise ValueError(f"spp_grids must be ascending positive ints: {self.spp_grids}")
        if any(s not in (4, 8, 16) for s in self.attention_levels):
            raise ValueError(f"attention_levels must be a subset of (4, 8, 16)")
        if self.upsample_mode != "bilinear":
            raise ValueError("only bilinear upsampling is supported")


def _upsample(x: Tensor, size) -> Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class SpatialPyramidPool(nn.Module):
    """Simplified SPP: per-grid average pool -> 1x1 conv -> upsample back,
    concatenated with the input and fused by a 1x1 conv."""

    def __init__(self, in_channels: int, grids: list[int], out_channels: int):
        super().__init__()
        self.grids = list(grids)
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, out_channels, 1) for _ in self.grids
        )
        cat_ch = in_channels + out_channels * len(self.grids)
        self.fuse = nn.Conv2d(cat_ch, out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if self.grids and max(self.grids) > min(h, w):
            raise ValueError(
                f"spp grid {max(self.grids)} larger than feature map {h}x{w}"
            )
        parts = [x]
        for g, conv in zip(self.grids, self.branches):
            pooled = F.adaptive_avg_pool2d(x, g)
            parts.append(_upsample(conv(pooled), (h, w)))
        return self.fuse(torch.cat(parts, dim=1))


class LateralFuse(nn.Module):
    """One decoder level: project the skip, optionally pass it through fast
    attention, and add it to the bilinearly upsampled decoder feature."""

    def __init__(self, skip_channels: int, decoder_channels: int, attn_channels: int,
                 use_attention: bool = True):
        super().__init__()
        self.proj = nn.Conv2d(skip_channels, decoder_channels, 1)
        self.attn = FastAttention(decoder_channels, attn_channels) if use_attention else None

    def forward(self, decoder_feat: Tensor, skip_feat: Tensor) -> Tensor:
        dh, dw = decoder_feat.shape[-2:]
        sh, sw = skip_feat.shape[-2:]
        if (sh, sw) != (2 * dh, 2 * dw):
            raise ValueError(
                f"skip dims {sh}x{sw} must be exactly 2x decoder dims {dh}x{dw}"
            )
        lateral = self.proj(skip_feat)
        if self.attn is not None:
            lateral = self.attn(lateral)
        return lateral + _upsample(decoder_feat, (sh, sw))


def lateral_fuse(module: LateralFuse, decoder_feat: Tensor, skip_feat: Tensor) -> Tensor:
    return module(decoder_feat, skip_feat)


class SegDecoder(nn.Module):
    """SPP + three lateral-fused upsampling levels + stride-4 classifier."""

    def __init__(self, config: SegPathConfig, stage_channels: list[int]):
        super().__init__()
        config.validate()
        self.config = config
        dec = config.decoder_channels
        self.spp = SpatialPyramidPool(stage_channels[3], config.spp_grids, dec)
        # Levels consume skips at strides 16, 8, 4 in decoding order.
        self.laterals = nn.ModuleList(
            LateralFuse(stage_channels[i], dec, config.attn_channels,
                        use_attention=(stride in config.attention_levels))
            for i, stride in ((2, 16), (1, 8), (0, 4))
        )
        self.blends = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(dec, dec, 3, padding=1, bias=False),
                nn.BatchNorm2d(dec),
                nn.ReLU(inplace=True),
            )
            for _ in range(3)
        )
        self.classifier = nn.Conv2d(dec, config.num_classes, 1)

    def forward(self, feats: StageFeatures) -> Tensor:
        """Returns stride-4 class logits (K_seg x H/4 x W/4)."""
        x = self.spp(feats.s32)
        for lateral, blend, skip in zip(
            self.laterals, self.blends, (feats.s16, feats.s8, feats.s4)
        ):
            x = blend(lateral(x, skip))
        return self.classifier(x)


class SegPath(nn.Module):
    """Full segmentation path over a (shared) backbone."""

    def __init__(self, backbone: ResidualEncoder, config: SegPathConfig):
        super().__init__()
        self.backbone = backbone
        self.decoder = SegDecoder(config, backbone.config.stage_channels)

    def forward(self, image: Tensor) -> Tensor:
        feats = self.backbone(image)
        logits_s4 = self.decoder(feats)
        h, w = image.shape[-2:] if image.dim() == 4 else image.shape[-2:]
        return _upsample(logits_s4, (h, w))


def segment(path: SegPath, image: Tensor) -> Tensor:
    """Full-resolution class logits (K_seg x H x W) for one image or a batch.

    Parameters live on ``path`` (built once from a backbone + config), so
    repeated calls with the same input are deterministic.
    """
    squeeze = image.dim() == 3
    logits = path(image.unsqueeze(0) if squeeze else image)
    return logits.squeeze(0) if squeeze else logits
