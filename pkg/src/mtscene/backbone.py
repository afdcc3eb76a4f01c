"""Compact residual encoder shared by the segmentation and recognition paths.

Four stages of residual blocks produce features at strides 4/8/16/32. The
stem (stride-2 conv + stride-2 pool) spends the first two stride halvings, so
stage 1 already works at H/4 x W/4. A single parameter set is shared by
reference: both task paths call ``forward`` on the same instance and their
gradients accumulate into the same tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

STRIDES = (4, 8, 16, 32)


class WeightLoadError(RuntimeError):
    """Raised when an external weights file does not match the model."""


@dataclass
class BackboneConfig:
    stage_blocks: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    input_channels: int = 3
    block_type: str = "basic"  # "basic" (2 convs) or "bottleneck" (1-3-1 convs)
    pretrained_init: str = "scratch"  # "scratch" or a path to a weights file
    freeze_norm_stats: bool = False

    def validate(self) -> None:
        if len(self.stage_blocks) != 4 or len(self.stage_channels) != 4:
            raise ValueError("backbone needs exactly 4 stages")
        if any(b < 1 for b in self.stage_blocks):
            raise ValueError(f"stage_blocks must be positive: {self.stage_blocks}")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be positive: {self.stage_channels}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if self.block_type not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block_type {self.block_type!r}")
        if self.block_type == "bottleneck" and any(c % 4 for c in self.stage_channels):
            raise ValueError("bottleneck stages need stage_channels divisible by 4")


@dataclass
class StageFeatures:
    """Encoder feature maps at strides 4, 8, 16, 32."""

    s4: Tensor
    s8: Tensor
    s16: Tensor
    s32: Tensor

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.s4, self.s8, self.s16, self.s32)


def _norm(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels)


class BasicBlock(nn.Module):
    """Two 3x3 convs with a skip connection."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = _norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch)
            )
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.down is None else self.down(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class BottleneckBlock(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand; mid width is out_ch / 4."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        mid = out_ch // 4
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.bn1 = _norm(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = _norm(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.bn3 = _norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch)
            )
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.down is None else self.down(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResidualEncoder(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.stage_channels
        block = BasicBlock if config.block_type == "basic" else BottleneckBlock

        self.stem = nn.Sequential(
            nn.Conv2d(config.input_channels, ch[0], 7, stride=2, padding=3, bias=False),
            _norm(ch[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        in_ch = ch[0]
        for i, (blocks, out_ch) in enumerate(zip(config.stage_blocks, ch)):
            stride = 1 if i == 0 else 2  # stem already provides stride 4
            layers = [block(in_ch, out_ch, stride=stride)]
            layers += [block(out_ch, out_ch) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self._init_scratch()

    def _init_scratch(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.config.freeze_norm_stats:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self

    def forward(self, image: Tensor) -> StageFeatures:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(
                f"input spatial dims must be divisible by 32, got {h}x{w}"
            )
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return StageFeatures(*feats)


def build_backbone(config: BackboneConfig) -> ResidualEncoder:
    """Construct the shared encoder; loads external weights if configured."""
    encoder = ResidualEncoder(config)
    if config.pretrained_init != "scratch":
        load_weights(encoder, config.pretrained_init)
    return encoder


def encode(backbone: ResidualEncoder, image: Tensor) -> StageFeatures:
    return backbone(image)


def export_weights(module: nn.Module, path) -> None:
    """Write parameters and buffers as a flat .npz archive of named tensors."""
    arrays = {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}
    np.savez(path, **arrays)


def load_weights(module: nn.Module, path) -> None:
    """Load a flat .npz tensor archive, validating names/shapes first.

    The archive's name -> shape manifest is checked in full against the
    module's state dict before any parameter is written.
    """
    try:
        archive = np.load(path)
    except FileNotFoundError:
        raise WeightLoadError(f"weights file not found: {path}") from None
    state = module.state_dict()
    for name in sorted(set(state) | set(archive.files)):
        if name not in archive.files:
            raise WeightLoadError(f"weights file {path} is missing tensor {name!r}")
        if name not in state:
            raise WeightLoadError(f"weights file {path} has unexpected tensor {name!r}")
        want, got = tuple(state[name].shape), tuple(archive[name].shape)
        if want != got:
            raise WeightLoadError(
                f"shape mismatch for tensor {name!r}: model {want}, file {got}"
            )
    with torch.no_grad():
        for name, tensor in state.items():
            value = torch.from_numpy(np.asarray(archive[name]))
            tensor.copy_(value.to(tensor.dtype))
