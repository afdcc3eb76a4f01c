"""Joint two-path model: a shared residual encoder feeding a segmentation
decoder and a scene recognition head, plus checkpoint serialization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import BackboneConfig, ResidualEncoder, build_backbone
from .recog_path import RecogPath, RecogPathConfig, SceneLogits
from .seg_path import SegDecoder, SegPathConfig

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    seg: SegPathConfig = field(default_factory=SegPathConfig)
    recog: RecogPathConfig = field(default_factory=RecogPathConfig)

    def validate(self) -> None:
        self.backbone.validate()
        self.seg.validate()
        self.recog.validate()
        if self.recog.extractor_channels[-1] != self.backbone.stage_channels[-1]:
            raise ValueError(
                "recog.extractor_channels[-1] must equal backbone.stage_channels[-1]"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            backbone=BackboneConfig(**d["backbone"]),
            seg=SegPathConfig(**{**d["seg"],
                                 "attention_levels": tuple(d["seg"]["attention_levels"])}),
            recog=RecogPathConfig(**d["recog"]),
        )
        cfg.validate()
        return cfg

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def toy_config(num_seg_classes: int, num_scene_classes: int) -> ModelConfig:
    """Desk-scale configuration for synthetic experiments and tests."""
    return ModelConfig(
        backbone=BackboneConfig(stage_blocks=[1, 1, 1, 1],
                                stage_channels=[16, 32, 64, 128]),
        seg=SegPathConfig(num_classes=num_seg_classes, decoder_channels=48,
                          attn_channels=16, spp_grids=[1, 2]),
        recog=RecogPathConfig(num_scene_classes=num_scene_classes,
                              extractor_channels=[16, 32, 128],
                              attention_reduction=8, fusion_channels=64),
    )


def canonical_config(num_seg_classes: int = 150,
                     num_scene_classes: int = 1055) -> ModelConfig:
    """ResNet-18-shaped configuration used for profiling comparisons."""
    return ModelConfig(
        backbone=BackboneConfig(),
        seg=SegPathConfig(num_classes=num_seg_classes),
        recog=RecogPathConfig(num_scene_classes=num_scene_classes),
    )


def preset_config(name: str, num_seg_classes: int = 150,
                  num_scene_classes: int = 1055) -> ModelConfig:
    """Named configurations for profiling comparisons.

    ``*-noattn`` variants replace the attention laterals with plain projected
    skips (test/profiling fixture, not a tuned baseline).
    """
    base = name.removesuffix("-noattn")
    if base == "toy":
        cfg = toy_config(num_seg_classes, num_scene_classes)
    elif base in ("r18", "canonical"):
        cfg = canonical_config(num_seg_classes, num_scene_classes)
    elif base == "r101":
        cfg = ModelConfig(
            backbone=BackboneConfig(stage_blocks=[3, 4, 23, 3],
                                    stage_channels=[256, 512, 1024, 2048],
                                    block_type="bottleneck"),
            seg=SegPathConfig(num_classes=num_seg_classes),
            recog=RecogPathConfig(num_scene_classes=num_scene_classes,
                                  extractor_channels=[256, 512, 2048],
                                  fusion_channels=512),
        )
    else:
        raise ValueError(
            f"unknown preset {name!r}; expected toy, r18, r101, or a -noattn variant"
        )
    if name.endswith("-noattn"):
        cfg.seg.attention_levels = ()
    return cfg


@dataclass
class JointOutput:
    seg_logits: Tensor          # (B, K_seg, H, W) full resolution
    seg_logits_s4: Tensor       # (B, K_seg, H/4, W/4) decoder-native scores
    scene: SceneLogits          # per-image scores and log-posteriors
    f_a: Tensor                 # fused scene feature, CAM source


class JointSceneModel(nn.Module):
    """Shared backbone + segmentation decoder + recognition head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone: ResidualEncoder = build_backbone(config.backbone)
        self.seg_decoder = SegDecoder(config.seg, config.backbone.stage_channels)
        self.recog = RecogPath(config.recog, config.seg.num_classes,
                               config.backbone.stage_channels[-1])

    def forward(self, image: Tensor) -> JointOutput:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        feats = self.backbone(image)
        logits_s4 = self.seg_decoder(feats)
        seg_logits = F.interpolate(logits_s4, size=(h, w), mode="bilinear",
                                   align_corners=False)
        scene, fused = self.recog(logits_s4, feats.s32)
        if squeeze:
            return JointOutput(
                seg_logits=seg_logits.squeeze(0),
                seg_logits_s4=logits_s4.squeeze(0),
                scene=SceneLogits(f=scene.f.squeeze(0), y=scene.y.squeeze(0)),
                f_a=fused.f_a.squeeze(0),
            )
        return JointOutput(seg_logits=seg_logits, seg_logits_s4=logits_s4,
                           scene=scene, f_a=fused.f_a)


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: JointSceneModel, *, epoch: int,
                    miou: float, mca: float) -> None:
    """Named tensors plus {epoch, miou, mca, config-hash} metadata."""
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "state_dict": model.state_dict(),
            "config": model.config.to_dict(),
            "config_hash": model.config.hash(),
            "epoch": epoch,
            "miou": miou,
            "mca": mca,
        },
        path,
    )


def load_checkpoint(path) -> tuple[JointSceneModel, dict]:
    """Rebuild the model from a checkpoint; refuses tampered config metadata."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    config = ModelConfig.from_dict(blob["config"])
    if config.hash() != blob["config_hash"]:
        raise CheckpointError(
            f"checkpoint {path}: stored config hash {blob['config_hash']} does not "
            f"match the hash of its config ({config.hash()}); refusing to load"
        )
    model = JointSceneModel(config)
    model.load_state_dict(blob["state_dict"])
    meta = {k: blob[k] for k in ("epoch", "miou", "mca", "config_hash")}
    return model, meta
