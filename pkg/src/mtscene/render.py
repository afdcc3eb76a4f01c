"""Rendering of segmentation overlays and CAM heatmaps.

The overlay palette spreads each class index's bits across the RGB channels,
so every index in [0, 256) gets a distinct color and the class map can be
recovered from the overlay exactly. The same palette is published in the docs
for downstream tooling.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def class_palette(num_classes: int) -> np.ndarray:
    """(K, 3) uint8 colors, distinct for every index below 256."""
    if num_classes > 256:
        raise ValueError("palette supports at most 256 classes")
    pal = np.zeros((num_classes, 3), dtype=np.uint8)
    for i in range(num_classes):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


def render_overlay(label_map: np.ndarray, num_classes: int) -> np.ndarray:
    """Color-coded class map, (H, W, 3) uint8."""
    return class_palette(num_classes)[np.asarray(label_map)]


def decode_overlay(overlay: np.ndarray, num_classes: int) -> np.ndarray:
    """Invert render_overlay exactly; unknown colors raise."""
    pal = class_palette(num_classes)
    lookup = {tuple(color): idx for idx, color in enumerate(pal)}
    flat = overlay.reshape(-1, 3)
    out = np.empty(flat.shape[0], dtype=np.int64)
    for i, px in enumerate(map(tuple, flat)):
        if px not in lookup:
            raise ValueError(f"color {px} not in the {num_classes}-class palette")
        out[i] = lookup[px]
    return out.reshape(overlay.shape[:2])


def save_overlay(path, label_map: np.ndarray, num_classes: int) -> None:
    Image.fromarray(render_overlay(label_map, num_classes), mode="RGB").save(path)


def save_cam(path_png, path_npy, raw_map: np.ndarray, rendered_map: np.ndarray) -> None:
    """8-bit heatmap image plus the raw (unscaled) map as a sidecar .npy."""
    np.save(path_npy, np.asarray(raw_map, dtype=np.float32))
    img8 = (np.clip(rendered_map, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(img8, mode="L").save(path_png)
