"""Data ingestion.

Two sources: folder-format datasets (images/, annotations/, scene_labels.txt
plus a manifest of class vocabularies) and a deterministic synthetic generator
that renders colored geometric shapes on noise backgrounds. Synthetic scene
labels are a pure function of which shape classes appear, so a recognizer fed
correct segmentation can always recover the scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAX_DEPTH_M = 9.0
# triangle points up, triangle_down points down: the orientation pair makes
# composition legible to the segmentation path while staying hard to separate
# from heavily pooled image features
SHAPE_KINDS = ("circle", "square", "triangle", "triangle_down")


class DatasetError(RuntimeError):
    pass


# --- flat key-value files (manifest and config share the format) ------------

def read_kv_file(path) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv_file(path, entries: dict) -> None:
    text = "".join(f"{k} = {v}\n" for k, v in entries.items())
    Path(path).write_text(text)


# --- samples and the folder loader ------------------------------------------

@dataclass
class Sample:
    id: str
    image: np.ndarray              # float32 (3, H, W) in [0, 1]
    seg_label: np.ndarray          # int64 (H, W)
    scene_label: int
    depth: np.ndarray | None = None  # float32 (H, W) meters; 0 = invalid


@dataclass
class Manifest:
    num_seg_classes: int
    num_scene_classes: int
    seg_class_names: list[str]
    scene_class_names: list[str]
    ignore_index: int | None = None

    @classmethod
    def read(cls, path) -> "Manifest":
        if not Path(path).exists():
            raise DatasetError(f"missing manifest: {path}")
        kv = read_kv_file(path)
        try:
            num_seg = int(kv["num_seg_classes"])
            num_scene = int(kv["num_scene_classes"])
        except KeyError as e:
            raise DatasetError(f"{path}: manifest missing key {e}") from None
        seg_names = kv.get("seg_class_names", "")
        scene_names = kv.get("scene_class_names", "")
        m = cls(
            num_seg_classes=num_seg,
            num_scene_classes=num_scene,
            seg_class_names=seg_names.split(",") if seg_names else
            [f"class{i}" for i in range(num_seg)],
            scene_class_names=scene_names.split(",") if scene_names else
            [f"scene{i}" for i in range(num_scene)],
            ignore_index=int(kv["ignore_index"]) if "ignore_index" in kv else None,
        )
        if len(m.seg_class_names) != num_seg:
            raise DatasetError(f"{path}: {len(m.seg_class_names)} seg names for {num_seg} classes")
        if len(m.scene_class_names) != num_scene:
            raise DatasetError(f"{path}: {len(m.scene_class_names)} scene names for {num_scene} classes")
        return m

    def write(self, path) -> None:
        kv = {
            "num_seg_classes": self.num_seg_classes,
            "num_scene_classes": self.num_scene_classes,
            "seg_class_names": ",".join(self.seg_class_names),
            "scene_class_names": ",".join(self.scene_class_names),
        }
        if self.ignore_index is not None:
            kv["ignore_index"] = self.ignore_index
        write_kv_file(path, kv)


class FolderDataset:
    """Lazily iterable dataset over the documented folder layout.

    root/manifest.txt; root/<split>/{images,annotations[,depth]}/<id>.{png,npy}
    and root/<split>/scene_labels.txt with `<id> <scene_id>` lines. Label
    pixel values are validated when a sample is first loaded.
    """

    def __init__(self, root, split: str = "train"):
        self.root = Path(root)
        self.split = split
        self.manifest = Manifest.read(self.root / "manifest.txt")
        split_dir = self.root / split
        img_dir = split_dir / "images"
        if not img_dir.is_dir():
            raise DatasetError(f"missing images directory: {img_dir}")
        self.ids = sorted(p.stem for p in img_dir.glob("*.png"))
        labels_file = split_dir / "scene_labels.txt"
        if not labels_file.exists():
            raise DatasetError(f"missing scene labels file: {labels_file}")
        self.scene_labels: dict[str, int] = {}
        for lineno, line in enumerate(labels_file.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"{labels_file}:{lineno}: expected '<id> <label>'")
            self.scene_labels[parts[0]] = int(parts[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> Sample:
        sample_id = self.ids[index]
        split_dir = self.root / self.split
        img_path = split_dir / "images" / f"{sample_id}.png"
        ann_path = split_dir / "annotations" / f"{sample_id}.png"
        try:
            image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32)
        except OSError as e:
            raise DatasetError(f"unreadable image {img_path}: {e}") from None
        image = image.transpose(2, 0, 1) / 255.0
        if not ann_path.exists():
            raise DatasetError(f"missing annotation for {sample_id}: {ann_path}")
        seg = np.asarray(Image.open(ann_path), dtype=np.int64)
        if seg.shape != image.shape[1:]:
            raise DatasetError(
                f"{ann_path}: annotation {seg.shape} does not match image {image.shape[1:]}"
            )
        k = self.manifest.num_seg_classes
        bad = (seg < 0) | (seg >= k)
        if self.manifest.ignore_index is not None:
            bad &= seg != self.manifest.ignore_index
        if bad.any():
            raise DatasetError(
                f"{ann_path}: label value {int(seg[bad][0])} outside [0, {k})"
            )
        if sample_id not in self.scene_labels:
            raise DatasetError(f"no scene label for sample {sample_id!r}")
        scene = self.scene_labels[sample_id]
        if not 0 <= scene < self.manifest.num_scene_classes:
            raise DatasetError(
                f"scene label {scene} for {sample_id!r} outside "
                f"[0, {self.manifest.num_scene_classes})"
            )
        depth = None
        depth_path = split_dir / "depth" / f"{sample_id}.npy"
        if depth_path.exists():
            depth = np.load(depth_path).astype(np.float32)
            if depth.shape != seg.shape:
                raise DatasetError(f"{depth_path}: depth shape {depth.shape} mismatch")
            if depth.min() < 0 or depth.max() > MAX_DEPTH_M:
                raise DatasetError(
                    f"{depth_path}: depth outside [0, {MAX_DEPTH_M}] meters"
                )
        return Sample(id=sample_id, image=image, seg_label=seg,
                      scene_label=scene, depth=depth)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_folder_dataset(root, split: str = "train") -> FolderDataset:
    return FolderDataset(root, split)


# --- synthetic generator ------------------------------------------------------

def default_scene_rules(num_shape_classes: int) -> list[tuple[tuple[int, ...], int]]:
    """All singletons then all pairs of shape classes, scene ids in order."""
    shapes = list(range(1, num_shape_classes + 1))
    rules: list[tuple[tuple[int, ...], int]] = []
    for s in shapes:
        rules.append(((s,), len(rules)))
    for i, a in enumerate(shapes):
        for b in shapes[i + 1:]:
            rules.append(((a, b), len(rules)))
    return rules


@dataclass
class SyntheticConfig:
    num_shape_classes: int = 3          # circle / square / triangle; bg is class 0
    scene_rules: list[tuple[tuple[int, ...], int]] | None = None
    image_size: int = 64
    train_samples: int = 200
    val_samples: int = 50
    seed: int = 0
    with_depth: bool = True
    depth_dropout: float = 0.02         # fraction of invalid (0) depth pixels

    def resolved_rules(self) -> list[tuple[frozenset[int], int]]:
        raw = self.scene_rules or default_scene_rules(self.num_shape_classes)
        seen: dict[frozenset[int], int] = {}
        for shapes, scene in raw:
            key = frozenset(shapes)
            if not key:
                raise DatasetError("scene rule with empty shape set")
            if any(s < 1 or s > self.num_shape_classes for s in key):
                raise DatasetError(f"rule {sorted(key)} names unknown shape class")
            if key in seen and seen[key] != scene:
                raise DatasetError(
                    f"contradictory scene rules: {sorted(key)} -> {seen[key]} and {scene}"
                )
            seen[key] = scene
        return sorted(seen.items(), key=lambda kv: kv[1])

    def validate(self) -> None:
        if not 1 <= self.num_shape_classes <= len(SHAPE_KINDS):
            raise DatasetError(
                f"num_shape_classes must be in [1, {len(SHAPE_KINDS)}]"
            )
        if self.image_size < 32 or self.image_size % 32:
            raise DatasetError("image_size must be a positive multiple of 32")
        if not 0 <= self.depth_dropout < 1:
            raise DatasetError("depth_dropout must be in [0, 1)")
        rules = self.resolved_rules()
        scenes = sorted({scene for _, scene in rules})
        if scenes != list(range(len(scenes))):
            raise DatasetError(f"scene ids must be contiguous from 0, got {scenes}")


def _shape_mask(kind: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    if kind == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= r
    if kind.startswith("triangle"):
        # equilateral, circumradius r; y grows down, so a 90-degree vertex
        # angle puts the tip at the top of the image
        tip = 90.0 if kind == "triangle" else 270.0
        angles = np.deg2rad([tip, tip + 120.0, tip + 240.0])
        vx = cx + r * np.cos(angles)
        vy = cy - r * np.sin(angles)
        pos = np.ones((size, size), dtype=bool)
        neg = np.ones((size, size), dtype=bool)
        for i in range(3):
            x0, y0 = vx[i], vy[i]
            x1, y1 = vx[(i + 1) % 3], vy[(i + 1) % 3]
            cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
            pos &= cross >= 0
            neg &= cross <= 0
        return pos | neg  # winding-agnostic half-plane intersection
    raise ValueError(f"unknown shape kind {kind!r}")


def shape_area(kind: str, r: float) -> float:
    if kind == "circle":
        return np.pi * r ** 2
    if kind == "square":
        return (2 * r) ** 2
    if kind.startswith("triangle"):
        return 3 * np.sqrt(3) / 4 * r ** 2
    raise ValueError(f"unknown shape kind {kind!r}")


def shape_perimeter(kind: str, r: float) -> float:
    if kind == "circle":
        return 2 * np.pi * r
    if kind == "square":
        return 8 * r
    if kind.startswith("triangle"):
        return 3 * np.sqrt(3) * r
    raise ValueError(f"unknown shape kind {kind!r}")


def _draw_shapes(rng: np.random.Generator, size: int,
                 composition: frozenset[int]) -> list[dict]:
    shapes = []
    for cls in sorted(composition):
        kind = SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]
        r = float(rng.uniform(size / 8, size / 5))
        cx = float(rng.uniform(r + 1, size - r - 2))
        cy = float(rng.uniform(r + 1, size - r - 2))
        color = rng.uniform(0.3, 1.0, size=3)
        color[rng.integers(3)] = rng.uniform(0.75, 1.0)  # keep it clearly above bg
        z = float(rng.uniform(0.5, MAX_DEPTH_M))
        shapes.append(
            {"cls": cls, "kind": kind, "cx": cx, "cy": cy, "r": r,
             "depth": z, "color": [float(c) for c in color]}
        )
    return shapes


def _render_sample(rng: np.random.Generator, config: SyntheticConfig,
                   composition: frozenset[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[dict]]:
    size = config.image_size
    image = rng.uniform(0.05, 0.45, size=(size, size, 3)).astype(np.float32)
    seg = np.zeros((size, size), dtype=np.int64)
    depth = np.full((size, size), MAX_DEPTH_M, dtype=np.float32)

    # Redraw geometry until every shape stays substantially visible after
    # occlusion; otherwise the scene could not be recovered from the
    # segmentation label, breaking the generator's ground-truth guarantee.
    for attempt in range(50):
        shapes = _draw_shapes(rng, size, composition)
        masks = {s["cls"]: _shape_mask(s["kind"], s["cx"], s["cy"], s["r"], size)
                 for s in shapes}
        trial_seg = np.zeros((size, size), dtype=np.int64)
        for s in sorted(shapes, key=lambda s: -s["depth"]):
            trial_seg[masks[s["cls"]]] = s["cls"]
        if all(np.sum(trial_seg == s["cls"]) >= 0.3 * np.sum(masks[s["cls"]])
               for s in shapes):
            break
    else:
        raise DatasetError(
            f"could not place shapes {sorted(composition)} without heavy occlusion"
        )

    # painter's algorithm: far shapes first so near ones occlude them
    for s in sorted(shapes, key=lambda s: -s["depth"]):
        mask = masks[s["cls"]]
        texture = np.clip(
            np.array(s["color"], dtype=np.float32)
            + rng.uniform(-0.05, 0.05, size=(size, size, 3)).astype(np.float32),
            0.0, 1.0,
        )
        image[mask] = texture[mask]
        seg[mask] = s["cls"]
        depth[mask] = s["depth"]
    if config.with_depth and config.depth_dropout > 0:
        dropout = rng.random((size, size)) < config.depth_dropout
        depth[dropout] = 0.0
    return image, seg, depth, shapes


def generate_synthetic(config: SyntheticConfig, out_dir) -> Path:
    """Render the dataset to disk; byte-identical for a fixed seed."""
    config.validate()
    rules = config.resolved_rules()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    shape_names = [SHAPE_KINDS[i % len(SHAPE_KINDS)] for i in range(config.num_shape_classes)]
    scene_names = []
    for shapes, scene in rules:
        scene_names.append("+".join(shape_names[s - 1] for s in sorted(shapes)))
    Manifest(
        num_seg_classes=config.num_shape_classes + 1,
        num_scene_classes=len(rules),
        seg_class_names=["background"] + shape_names,
        scene_class_names=scene_names,
    ).write(root / "manifest.txt")

    rng = np.random.default_rng(config.seed)
    for split, count in (("train", config.train_samples), ("val", config.val_samples)):
        split_dir = root / split
        for sub in ("images", "annotations") + (("depth",) if config.with_depth else ()):
            (split_dir / sub).mkdir(parents=True, exist_ok=True)
        # cycle through rules so every scene class appears when count >= #rules
        order = np.tile(np.arange(len(rules)), count // len(rules) + 1)[:count]
        rng.shuffle(order)
        label_lines = []
        meta_lines = []
        for i, rule_idx in enumerate(order):
            composition, scene = rules[rule_idx]
            image, seg, depth, shapes = _render_sample(rng, config, composition)
            sample_id = f"{split}_{i:05d}"
            img8 = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
            Image.fromarray(img8, mode="RGB").save(split_dir / "images" / f"{sample_id}.png")
            Image.fromarray(seg.astype(np.uint8), mode="L").save(
                split_dir / "annotations" / f"{sample_id}.png")
            if config.with_depth:
                np.save(split_dir / "depth" / f"{sample_id}.npy", depth)
            label_lines.append(f"{sample_id} {scene}")
            meta_lines.append(json.dumps(
                {"id": sample_id, "scene": int(scene),
                 "composition": sorted(composition), "shapes": shapes}))
        (split_dir / "scene_labels.txt").write_text("\n".join(label_lines) + "\n")
        (split_dir / "metadata.jsonl").write_text("\n".join(meta_lines) + "\n")
    return root


def read_metadata(root, split: str) -> list[dict]:
    """Generator sidecar with per-shape geometry and depth ground truth."""
    path = Path(root) / split / "metadata.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line]
