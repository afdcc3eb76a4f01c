"""Command-line surface: train / eval / infer / profile / gen-data.

Every command reads an optional flat key-value config file; command-line
``--set key=value`` flags override file values. Exit code is 0 on success and
1 with a one-line diagnostic otherwise.

``nearby_objects`` implements the assistive feedback rule: a class is worth
announcing when enough of its pixels sit at a valid aligned depth within the
threshold (2 m by default).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import profiler
from .backbone import BackboneConfig
from .datasets import (FolderDataset, Manifest, SyntheticConfig, generate_synthetic,
                       read_kv_file)
from .model import JointSceneModel, ModelConfig, load_checkpoint, preset_config
from .recog_path import RecogPathConfig, cam
from .render import save_cam, save_overlay
from .seg_path import SegPathConfig
from .training import (AugmentConfig, LossWeights, TrainConfig, center_crop_multiple,
                       evaluate, fit, model_predictor)

RECORD_SCHEMA_VERSION = 1
DEFAULT_THRESHOLD_M = 2.0
DEFAULT_MIN_FRACTION = 0.005  # 0.5% of image pixels


# --- assistive feedback --------------------------------------------------------

@dataclass
class NearbyObject:
    class_id: int
    class_name: str
    pixel_fraction: float  # qualifying pixels / image pixels
    min_depth_m: float


@dataclass
class FeedbackReport:
    nearby: list[NearbyObject]
    scene_topk: list[tuple[str, float]]
    threshold_m: float


def nearby_objects(seg_map, depth_map, threshold_m: float = DEFAULT_THRESHOLD_M,
                   min_fraction: float = DEFAULT_MIN_FRACTION,
                   class_names: list[str] | None = None) -> list[NearbyObject]:
    """Classes with enough pixels at valid depth within the threshold.

    Depth 0 marks invalid readings (sensor dropout) and never qualifies.
    Entries are sorted by their minimum depth, nearest first.
    """
    seg = np.asarray(seg_map)
    depth = np.asarray(depth_map, dtype=np.float64)
    if seg.shape != depth.shape:
        raise ValueError(
            f"segmentation {seg.shape} and depth {depth.shape} are misaligned"
        )
    qualifying = (depth > 0) & (depth <= threshold_m)
    total = seg.size
    out: list[NearbyObject] = []
    for cls in np.unique(seg):
        mask = (seg == cls) & qualifying
        count = int(mask.sum())
        if count == 0 or count / total < min_fraction:
            continue
        name = class_names[cls] if class_names and cls < len(class_names) else str(int(cls))
        out.append(NearbyObject(
            class_id=int(cls), class_name=name,
            pixel_fraction=count / total,
            min_depth_m=float(depth[mask].min()),
        ))
    out.sort(key=lambda o: o.min_depth_m)
    return out


# --- flat config files -----------------------------------------------------------

def _parse_int_list(v: str) -> list[int]:
    return [int(x) for x in v.replace(" ", "").split(",") if x]


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


# key -> (parser, default); the single documented schema for config files.
CONFIG_SCHEMA: dict[str, tuple] = {
    # backbone
    "stage_blocks": (_parse_int_list, [2, 2, 2, 2]),
    "stage_channels": (_parse_int_list, [64, 128, 256, 512]),
    "input_channels": (int, 3),
    "block_type": (str, "basic"),
    "pretrained_init": (str, "scratch"),
    "freeze_norm_stats": (_parse_bool, False),
    # segmentation path
    "decoder_channels": (int, 128),
    "attn_channels": (int, 32),
    "spp_grids": (_parse_int_list, [1, 2, 4]),
    "attention_levels": (_parse_int_list, [4, 8, 16]),
    # recognition path
    "extractor_channels": (_parse_int_list, None),  # derived from stage_channels
    "attention_reduction": (int, 16),
    "fusion_channels": (int, None),                 # derived from stage_channels
    "gate_mode": (str, "learned"),
    # training
    "crop": (int, 384),
    "lr0": (float, 1.0e-4),
    "weight_decay": (float, 2.5e-5),
    "epochs": (int, 1),
    "batch_size": (int, 8),
    "seed": (int, 0),
    "ignore_index": (_parse_opt_int, None),
    "loss_weight_seg": (float, 1.0),
    "loss_weight_scene": (float, 1.0),
    "augment": (_parse_bool, True),
    # paths
    "data_root": (str, None),
    "out_dir": (str, None),
}


class ConfigError(ValueError):
    pass


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Resolve the flat config: defaults <- file <- --set overrides."""
    values = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}

    def apply(key: str, raw: str, source: str):
        if key not in CONFIG_SCHEMA:
            valid = ", ".join(sorted(CONFIG_SCHEMA))
            raise ConfigError(f"unknown config key {key!r} ({source}); valid keys: {valid}")
        parse = CONFIG_SCHEMA[key][0]
        try:
            values[key] = parse(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r} ({source}): {e}") from None

    if path is not None:
        for key, raw in read_kv_file(path).items():
            apply(key, raw, str(path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(key.strip(), raw, "--set")
    return values


def build_model_config(values: dict, num_seg_classes: int,
                       num_scene_classes: int) -> ModelConfig:
    s32 = values["stage_channels"][-1]
    extractor = values["extractor_channels"] or [max(8, s32 // 8), max(8, s32 // 4), s32]
    fusion = values["fusion_channels"] or s32
    cfg = ModelConfig(
        backbone=BackboneConfig(
            stage_blocks=values["stage_blocks"],
            stage_channels=values["stage_channels"],
            input_channels=values["input_channels"],
            block_type=values["block_type"],
            pretrained_init=values["pretrained_init"],
            freeze_norm_stats=values["freeze_norm_stats"],
        ),
        seg=SegPathConfig(
            num_classes=num_seg_classes,
            decoder_channels=values["decoder_channels"],
            attn_channels=values["attn_channels"],
            spp_grids=values["spp_grids"],
            attention_levels=tuple(values["attention_levels"]),
        ),
        recog=RecogPathConfig(
            num_scene_classes=num_scene_classes,
            extractor_channels=extractor,
            attention_reduction=values["attention_reduction"],
            fusion_channels=fusion,
            gate_mode=values["gate_mode"],
        ),
    )
    cfg.validate()
    return cfg


def build_train_config(values: dict) -> tuple[TrainConfig, LossWeights]:
    cfg = TrainConfig(
        crop=values["crop"], lr0=values["lr0"], weight_decay=values["weight_decay"],
        epochs=values["epochs"], batch_size=values["batch_size"], seed=values["seed"],
        ignore_index=values["ignore_index"],
    )
    cfg.validate()
    return cfg, LossWeights(seg=values["loss_weight_seg"],
                            scene=values["loss_weight_scene"])


# --- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    values = load_config(args.config, args.set)
    if args.data:
        values["data_root"] = args.data
    if args.out:
        values["out_dir"] = args.out
    if args.epochs is not None:
        values["epochs"] = args.epochs
    if args.seed is not None:
        values["seed"] = args.seed
    if not values["data_root"]:
        raise ConfigError("data_root is required (config key or --data)")
    if not values["out_dir"]:
        raise ConfigError("out_dir is required (config key or --out)")

    train_set = FolderDataset(values["data_root"], "train")
    val_set = FolderDataset(values["data_root"], "val")
    manifest = train_set.manifest
    if values["ignore_index"] is None:
        values["ignore_index"] = manifest.ignore_index
    model_cfg = build_model_config(values, manifest.num_seg_classes,
                                   manifest.num_scene_classes)
    train_cfg, weights = build_train_config(values)
    aug = AugmentConfig(crop=train_cfg.crop) if values["augment"] \
        else AugmentConfig.identity(train_cfg.crop)

    model = JointSceneModel(model_cfg)
    log = fit(model, train_set, val_set, train_cfg, weights, aug,
              out_dir=values["out_dir"])
    last = log.records[-1]
    print(f"trained {train_cfg.epochs} epochs: "
          f"miou={last.miou:.4f} top1={last.top1:.4f} mca={last.mca:.4f}")
    print(f"checkpoints and training_log.jsonl in {values['out_dir']}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    dataset = FolderDataset(args.data, args.split)
    report = evaluate(model_predictor(model), dataset,
                      model.config.seg.num_classes,
                      dataset.manifest.ignore_index)
    text = report.to_text()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
        Path(args.out).with_suffix(".json").write_text(
            json.dumps(report.to_dict(), indent=2))
    return 0


def _load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1) / 255.0


def cmd_infer(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    model.eval()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    image = _load_image(args.image)
    depth = np.load(args.depth).astype(np.float32) if args.depth else None
    arrays = (image,) if depth is None else (image, depth)
    cropped = center_crop_multiple(arrays)
    image = cropped[0]
    depth = cropped[1] if depth is not None else None

    with torch.no_grad():
        out = model(torch.from_numpy(image))
        pred_map = out.seg_logits.argmax(dim=0).numpy()
        log_posteriors = out.scene.y.numpy()
        k_scene = log_posteriors.shape[0]
        order = np.argsort(-log_posteriors, kind="stable")[: min(5, k_scene)]
        top_class = int(order[0])
        raw_cam, rendered_cam = cam(out.f_a, model.recog.classifier, top_class,
                                    output_size=image.shape[-2:])

    scene_names = [f"scene{i}" for i in range(k_scene)]
    seg_names = [f"class{i}" for i in range(model.config.seg.num_classes)]
    if args.data_manifest:
        manifest = Manifest.read(args.data_manifest)
        scene_names, seg_names = manifest.scene_class_names, manifest.seg_class_names

    save_overlay(out_dir / "overlay.png", pred_map, model.config.seg.num_classes)
    save_cam(out_dir / "cam.png", out_dir / "cam_raw.npy",
             raw_cam.numpy(), rendered_cam.numpy())

    record = {
        "schema_version": RECORD_SCHEMA_VERSION,
        "checkpoint": str(args.checkpoint),
        "config_hash": meta["config_hash"],
        "image": str(args.image),
        "image_size_hw": list(image.shape[-2:]),
        "scene_topk": [
            {"name": scene_names[i], "class_id": int(i),
             "log_prob": float(log_posteriors[i]),
             "prob": float(np.exp(log_posteriors[i]))}
            for i in order
        ],
        "cam_class": top_class,
        "artifacts": {"overlay": "overlay.png", "cam": "cam.png",
                      "cam_raw": "cam_raw.npy"},
    }
    if depth is not None:
        nearby = nearby_objects(pred_map, depth, args.threshold_m,
                                args.min_fraction, seg_names)
        feedback = FeedbackReport(
            nearby=nearby,
            scene_topk=[(scene_names[i], float(np.exp(log_posteriors[i])))
                        for i in order],
            threshold_m=args.threshold_m,
        )
        record["feedback"] = {
            "threshold_m": feedback.threshold_m,
            "nearby": [asdict(o) for o in feedback.nearby],
            "scene_topk": feedback.scene_topk,
        }
    (out_dir / "record.json").write_text(json.dumps(record, indent=2))
    for entry in record["scene_topk"]:
        print(f"{entry['name']}: p={entry['prob']:.4f}")
    if depth is not None and record["feedback"]["nearby"]:
        for o in record["feedback"]["nearby"]:
            print(f"nearby {o['class_name']}: min depth {o['min_depth_m']:.2f} m "
                  f"({100 * o['pixel_fraction']:.1f}% of pixels)")
    return 0


def cmd_profile(args) -> int:
    resolution = args.resolution
    reports = []
    for name in args.preset or []:
        cfg = preset_config(name, num_seg_classes=args.num_seg_classes,
                            num_scene_classes=args.num_scene_classes)
        model = JointSceneModel(cfg)
        rep = profiler.complexity_report(
            model, (cfg.backbone.input_channels, resolution, resolution), name=name)
        if args.fps:
            rep.fps, rep.fps_cv, rep.device = profiler.measure_fps(
                model, (cfg.backbone.input_channels, resolution, resolution))
        reports.append(rep)
    for path in args.config or []:
        values = load_config(path)
        cfg = build_model_config(values, args.num_seg_classes, args.num_scene_classes)
        model = JointSceneModel(cfg)
        rep = profiler.complexity_report(
            model, (cfg.backbone.input_channels, resolution, resolution),
            name=Path(path).stem)
        if args.fps:
            rep.fps, rep.fps_cv, rep.device = profiler.measure_fps(
                model, (cfg.backbone.input_channels, resolution, resolution))
        reports.append(rep)
    if not reports:
        raise ConfigError("nothing to profile: pass --preset and/or --config")

    print(f"# convention: {profiler.FLOP_CONVENTION}")
    print(f"# input resolution: {resolution}x{resolution}")
    header = f"{'config':24s} {'GFLOPs':>10s} {'Params (M)':>12s}"
    if args.fps:
        header += f" {'FPS':>8s}"
    print(header)
    for rep in reports:
        row = f"{rep.name:24s} {rep.gflops:10.3f} {rep.params_m:12.3f}"
        if args.fps and rep.fps is not None:
            row += f" {rep.fps:8.2f}"
        print(row)
    if args.out:
        Path(args.out).write_text("".join(r.to_text() + "\n" for r in reports))
    return 0


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        num_shape_classes=args.num_shapes,
        image_size=args.size,
        train_samples=args.train,
        val_samples=args.val,
        seed=args.seed,
        with_depth=not args.no_depth,
    )
    root = generate_synthetic(cfg, args.out)
    print(f"wrote {args.train} train / {args.val} val samples to {root}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtscene",
        description="Joint semantic segmentation + scene recognition toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the joint model on a folder dataset")
    p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--data", default=None, help="dataset root (overrides data_root)")
    p.add_argument("--out", default=None, help="output dir (overrides out_dir)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", default=None, help="write the report here (.txt + .json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one image and write rendered artifacts")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--depth", type=Path, default=None, help=".npy depth map in meters")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold-m", type=float, default=DEFAULT_THRESHOLD_M,
                   dest="threshold_m")
    p.add_argument("--min-fraction", type=float, default=DEFAULT_MIN_FRACTION,
                   dest="min_fraction")
    p.add_argument("--data-manifest", type=Path, default=None,
                   help="manifest.txt supplying class names")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("profile", help="FLOPs/params (and optional FPS) comparison")
    p.add_argument("--preset", action="append", default=[],
                   help="named config: toy, r18, r18-noattn, r101, r101-noattn")
    p.add_argument("--config", action="append", default=[], type=Path)
    p.add_argument("--resolution", type=int, default=384)
    p.add_argument("--num-seg-classes", type=int, default=150)
    p.add_argument("--num-scene-classes", type=int, default=1055)
    p.add_argument("--fps", action="store_true", help="also measure throughput")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--num-shapes", type=int, default=3, dest="num_shapes")
    p.add_argument("--no-depth", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except Exception as e:  # one-line diagnostic per the CLI contract
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
