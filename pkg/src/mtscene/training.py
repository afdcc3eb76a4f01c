"""Joint optimization: per-pixel and per-image NLL losses combined by a
weighted sum, adaptive-moment updates with decoupled weight decay, cosine
learning-rate annealing, augmentation, per-epoch validation, and checkpoint
selection by the best mIoU + MCA sum.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import Tensor

from . import metrics
from .datasets import Sample
from .model import JointSceneModel, save_checkpoint
from .recog_path import SceneLogits


@dataclass
class LossWeights:
    """Weights of the segmentation and scene terms in the joint loss."""

    seg: float = 1.0
    scene: float = 1.0

    def validate(self) -> None:
        if self.seg < 0 or self.scene < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.seg == 0 and self.scene == 0:
            raise ValueError("at least one loss weight must be nonzero")


@dataclass
class TrainConfig:
    crop: int = 384
    lr0: float = 1.0e-4
    weight_decay: float = 2.5e-5
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    ignore_index: int | None = None

    def validate(self) -> None:
        if self.crop % 32:
            raise ValueError(f"crop ({self.crop}) must be divisible by 32")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


# --- losses -------------------------------------------------------------------

def seg_loss(seg_logits: Tensor, label_map: Tensor,
             ignore_index: int | None = None) -> Tensor:
    """Mean per-pixel negative log-likelihood over non-ignored pixels.

    Computed through a stable log-sum-exp; if every pixel is ignored the loss
    is defined as 0 and a warning is emitted.
    """
    if seg_logits.dim() == 3:
        seg_logits = seg_logits.unsqueeze(0)
        label_map = label_map.unsqueeze(0)
    k = seg_logits.shape[1]
    labels = label_map.long()
    scored = torch.ones_like(labels, dtype=torch.bool) if ignore_index is None \
        else labels != ignore_index
    valid = (labels >= 0) & (labels < k) | ~scored
    if not bool(valid.all()):
        bad = labels[~valid][0]
        raise ValueError(f"label value {int(bad)} outside [0, {k})")
    if not bool(scored.any()):
        warnings.warn("all pixels ignored; segmentation loss defined as 0")
        return seg_logits.sum() * 0.0
    log_probs = F.log_softmax(seg_logits, dim=1)
    picked = log_probs.gather(1, labels.clamp(0, k - 1).unsqueeze(1)).squeeze(1)
    return -(picked[scored]).mean()


def scene_loss(scene_logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood of the labeled scene class."""
    f = scene_logits.f if isinstance(scene_logits, SceneLogits) else scene_logits
    if f.dim() == 1:
        f = f.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long, device=f.device).reshape(-1)
    k = f.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"scene label outside [0, {k}): {labels.tolist()}")
    log_probs = F.log_softmax(f, dim=-1)
    return -log_probs.gather(1, labels.unsqueeze(1)).mean()


def joint_loss(l1: Tensor, l2: Tensor, weights: LossWeights) -> Tensor:
    weights.validate()
    return weights.seg * l1 + weights.scene * l2


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2, annealing to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# --- augmentation ---------------------------------------------------------------

@dataclass
class AugmentConfig:
    crop: int = 384
    flip: bool = True
    scale_range: tuple[float, float] | None = (0.75, 1.5)
    blur_prob: float = 0.3
    blur_sigma: tuple[float, float] = (0.1, 1.2)
    contrast_range: tuple[float, float] | None = (0.7, 1.3)

    @classmethod
    def identity(cls, crop: int) -> "AugmentConfig":
        return cls(crop=crop, flip=False, scale_range=None, blur_prob=0.0,
                   contrast_range=None)


def _resize(image: np.ndarray, label: np.ndarray, size_hw) -> tuple[np.ndarray, np.ndarray]:
    # bilinear for the image, nearest for the label so values never mix
    img = torch.from_numpy(image).unsqueeze(0)
    img = F.interpolate(img, size=size_hw, mode="bilinear", align_corners=False)
    lab = torch.from_numpy(label.astype(np.float32))[None, None]
    lab = F.interpolate(lab, size=size_hw, mode="nearest")
    return img.squeeze(0).numpy(), lab.squeeze().numpy().astype(label.dtype)


def augment(image: np.ndarray, seg_label: np.ndarray, rng: np.random.Generator,
            config: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random geometric + photometric draw to an image/label pair.

    Geometric transforms hit both arrays identically (nearest-neighbor on the
    label); blur and contrast touch only the image. Output is crop x crop.
    """
    crop = config.crop
    if crop < 1:
        raise ValueError(f"crop must be positive, got {crop}")
    if image.shape[-2:] != seg_label.shape:
        raise ValueError(
            f"image {image.shape[-2:]} and label {seg_label.shape} misaligned"
        )
    h, w = seg_label.shape
    if h < 1 or w < 1:
        raise ValueError("empty image cannot be cropped")

    if config.scale_range is not None:
        s = float(rng.uniform(*config.scale_range))
        h, w = max(1, round(h * s)), max(1, round(w * s))
        image, seg_label = _resize(image, seg_label, (h, w))
    if min(h, w) < crop:
        # minimal upscale so a crop x crop window fits
        s = crop / min(h, w)
        h, w = max(crop, math.ceil(h * s)), max(crop, math.ceil(w * s))
        image, seg_label = _resize(image, seg_label, (h, w))

    if config.scale_range is not None or config.flip:
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
    else:
        top, left = (h - crop) // 2, (w - crop) // 2
    image = image[:, top:top + crop, left:left + crop]
    seg_label = seg_label[top:top + crop, left:left + crop]

    if config.flip and rng.random() < 0.5:
        image = image[:, :, ::-1]
        seg_label = seg_label[:, ::-1]

    image = np.ascontiguousarray(image)
    seg_label = np.ascontiguousarray(seg_label)

    if config.blur_prob > 0 and rng.random() < config.blur_prob:
        sigma = float(rng.uniform(*config.blur_sigma))
        image = gaussian_filter(image, sigma=(0, sigma, sigma))
    if config.contrast_range is not None:
        c = float(rng.uniform(*config.contrast_range))
        mean = image.mean()
        image = np.clip(mean + c * (image - mean), 0.0, 1.0).astype(np.float32)
    return image, seg_label


# --- evaluation -----------------------------------------------------------------

def center_crop_multiple(arrays, multiple: int = 32):
    """Center-crop aligned (.., H, W) arrays so H and W divide ``multiple``."""
    h, w = arrays[0].shape[-2:]
    ch, cw = h - h % multiple, w - w % multiple
    if ch == 0 or cw == 0:
        raise ValueError(f"image {h}x{w} smaller than {multiple}")
    top, left = (h - ch) // 2, (w - cw) // 2
    return tuple(a[..., top:top + ch, left:left + cw] for a in arrays)


def model_predictor(model: JointSceneModel):
    """Wrap a model as the predict function evaluate() consumes."""

    def predict(sample: Sample) -> tuple[np.ndarray, np.ndarray]:
        model.eval()
        image, seg = center_crop_multiple((sample.image, sample.seg_label))
        with torch.no_grad():
            out = model(torch.from_numpy(image))
        pred = out.seg_logits.argmax(dim=0).numpy()
        return pred, out.scene.f.numpy(), seg

    return predict


def evaluate(predict, dataset, num_seg_classes: int,
             ignore_index: int | None = None) -> metrics.MetricsReport:
    """Run ``predict`` over a dataset and assemble the metric report.

    ``predict(sample)`` returns (pred_seg_map, scene_scores) or optionally
    (pred_seg_map, scene_scores, cropped_truth) when it had to crop.
    """
    confusion = metrics.new_confusion(num_seg_classes)
    scene_scores, scene_labels = [], []
    for sample in dataset:
        result = predict(sample)
        pred, scores = result[0], result[1]
        truth = result[2] if len(result) > 2 else sample.seg_label
        metrics.accumulate(confusion, pred, truth, ignore_index)
        scene_scores.append(np.asarray(scores))
        scene_labels.append(sample.scene_label)
    return metrics.build_report(confusion, np.stack(scene_scores),
                                np.asarray(scene_labels))


# --- training loop ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_seg_loss: float
    train_scene_loss: float
    miou: float
    pixel_acc: float
    top1: float
    top2: float | None
    top5: float | None
    mca: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def load(cls, path) -> "TrainingLog":
        records = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                records.append(EpochRecord(**json.loads(line)))
        return cls(records=records)


def select_checkpoint(log: TrainingLog) -> int:
    """Epoch index with the best mIoU + MCA sum; ties pick the earliest."""
    if not log.records:
        raise ValueError("empty training log")
    sums = [r.miou + r.mca for r in log.records]
    return int(np.argmax(sums))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _collate(samples, aug: AugmentConfig | None, rng) -> tuple[Tensor, Tensor, Tensor]:
    images, seg_labels, scene_labels = [], [], []
    for s in samples:
        img, lab = (s.image, s.seg_label) if aug is None else augment(
            s.image, s.seg_label, rng, aug)
        images.append(torch.from_numpy(img))
        seg_labels.append(torch.from_numpy(lab.astype(np.int64)))
        scene_labels.append(s.scene_label)
    return (torch.stack(images), torch.stack(seg_labels),
            torch.tensor(scene_labels, dtype=torch.long))


def fit(model: JointSceneModel, train_set, val_set, config: TrainConfig,
        weights: LossWeights | None = None,
        augment_config: AugmentConfig | None = None,
        out_dir=None) -> TrainingLog:
    """Train the joint model; returns the per-epoch log.

    Saves ``last.pt`` every epoch and ``best.pt`` whenever mIoU + MCA improves
    (strict improvement, so the earliest best epoch is the one retained).
    """
    config.validate()
    weights = weights or LossWeights()
    weights.validate()
    if len(train_set) == 0:
        raise ValueError("training dataset is empty")
    if augment_config is None:
        augment_config = AugmentConfig(crop=config.crop)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr0,
                                  weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = TrainingLog()
    best_sum = -math.inf
    step = 0
    for epoch in range(config.epochs):
        model.train()
        epoch_losses, epoch_l1, epoch_l2 = [], [], []
        for batch_idx in _batches(len(train_set), config.batch_size, rng):
            samples = [train_set[int(i)] for i in batch_idx]
            images, seg_labels, scene_labels = _collate(samples, augment_config, rng)
            lr = cosine_lr(step, total_steps, config.lr0)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            out = model(images)
            l1 = seg_loss(out.seg_logits, seg_labels, config.ignore_index)
            l2 = scene_loss(out.scene, scene_labels)
            loss = joint_loss(l1, l2, weights)
            if not torch.isfinite(loss):
                ids = [s.id for s in samples]
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, step {step}, batch {ids}: "
                    f"seg={float(l1):g} scene={float(l2):g}"
                )
            loss.backward()
            optimizer.step()
            step += 1
            epoch_losses.append(loss.item())
            epoch_l1.append(l1.item())
            epoch_l2.append(l2.item())

        report = evaluate(model_predictor(model), val_set,
                          model.config.seg.num_classes, config.ignore_index)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            train_seg_loss=float(np.mean(epoch_l1)),
            train_scene_loss=float(np.mean(epoch_l2)),
            miou=report.miou,
            pixel_acc=report.pixel_acc,
            top1=report.topk.get(1, 0.0),
            top2=report.topk.get(2),
            top5=report.topk.get(5),
            mca=report.mca,
        )
        log.records.append(record)
        if out_dir is not None:
            save_checkpoint(out_dir / "last.pt", model, epoch=epoch,
                            miou=record.miou, mca=record.mca)
            if record.miou + record.mca > best_sum:
                best_sum = record.miou + record.mca
                save_checkpoint(out_dir / "best.pt", model, epoch=epoch,
                                miou=record.miou, mca=record.mca)
            log.save(out_dir / "training_log.jsonl")
    return log
