"""Synthetic crack corpus: textured backgrounds with dark meandering cracks.

Two background styles with distinct texture statistics (pavement-like is
speckled and high-frequency, concrete-like is smooth and blotchy). Cracks
are random walks stamped as varying-width dark strokes; strokes are added
until the crack share of the mask reaches the configured target, so the
final share lands within a couple of percentage points above it.

Generation is a pure function of (seed, index), so a corpus regenerates
byte-identically.
"""
from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import ConfigError
from .datapipe import Manifest, SampleRecord, write_binary_png

STYLES = ("pavement-like", "concrete-like")


def _background(size: int, style: str, rng: np.random.Generator) -> np.ndarray:
    if style == "pavement-like":
        tex = np.full((size, size), 126.0)
        tex += rng.normal(0.0, 16.0, (size, size))  # grain
        illum = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), size / 8.0)
        tex += illum / (np.abs(illum).max() + 1e-9) * 18.0
    elif style == "concrete-like":
        tex = np.full((size, size), 168.0)
        blotch = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 6.0)
        tex += blotch / (np.abs(blotch).max() + 1e-9) * 28.0
        tex += rng.normal(0.0, 2.5, (size, size))
    else:
        raise ConfigError(f"unknown style {style!r}, expected one of {STYLES}")
    return np.clip(tex, 0.0, 255.0)


def _stamp_disk(mask: np.ndarray, cy: float, cx: float, radius: float) -> None:
    h, w = mask.shape
    y0 = max(0, int(math.floor(cy - radius)))
    y1 = min(h, int(math.ceil(cy + radius)) + 1)
    x0 = max(0, int(math.floor(cx - radius)))
    x1 = min(w, int(math.ceil(cx + radius)) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.ogrid[y0:y1, x0:x1]
    mask[y0:y1, x0:x1] |= ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius * radius


def _draw_crack(mask: np.ndarray, rng: np.random.Generator) -> None:
    h, w = mask.shape
    y = float(rng.uniform(0.1 * h, 0.9 * h))
    x = float(rng.uniform(0.1 * w, 0.9 * w))
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    width = float(rng.uniform(2.0, 4.5))
    steps = int(rng.integers(h // 2, int(h * 1.2)))
    for _ in range(steps):
        _stamp_disk(mask, y, x, width / 2.0)
        heading += float(rng.normal(0.0, 0.18))
        width = float(np.clip(width + rng.normal(0.0, 0.15), 1.5, 5.0))
        y += math.sin(heading)
        x += math.cos(heading)
        if not (0.0 <= y < h and 0.0 <= x < w):
            break


def generate_sample(
    size: int, style: str, fg_percent: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One (rgb uint8 HWC, mask {0,1} HW) pair with roughly fg_percent cracks."""
    if size < 64:
        raise ConfigError("synthetic images must be at least 64 px")
    if not 0.0 < fg_percent < 50.0:
        raise ConfigError("fg_percent must be in (0, 50)")
    tex = _background(size, style, rng)
    mask = np.zeros((size, size), dtype=bool)
    target = fg_percent / 100.0
    for _ in range(200):
        if mask.mean() >= target:
            break
        _draw_crack(mask, rng)
    crack_tex = tex * 0.32 + rng.normal(0.0, 5.0, tex.shape)
    gray = np.where(mask, crack_tex, tex)
    tints = rng.normal(0.0, 2.0, size=3)
    rgb = np.stack([np.clip(gray + t, 0, 255) for t in tints], axis=-1)
    return rgb.astype(np.uint8), mask.astype(np.uint8)


def texture_energy(rgb: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute Laplacian response over background pixels; a simple
    high-frequency statistic that separates the two styles."""
    gray = np.asarray(rgb, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    lap = ndimage.laplace(gray)
    if mask is not None:
        lap = lap[np.asarray(mask) == 0]
    return float(np.abs(lap).mean())


def generate_corpus(
    out_dir: str,
    count: int = 8,
    size: int = 256,
    style: str = "pavement-like",
    fg_percent: float = 5.0,
    seed: int = 0,
    tag: str | None = None,
) -> Manifest:
    """Write images/, masks/, and manifest.json under out_dir."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    if style not in STYLES:
        raise ConfigError(f"unknown style {style!r}, expected one of {STYLES}")
    images_dir = os.path.join(out_dir, "images")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        rgb, mask = generate_sample(size, style, fg_percent, rng)
        sample_id = f"sample_{i:04d}"
        image_path = os.path.join(images_dir, sample_id + ".png")
        mask_path = os.path.join(masks_dir, sample_id + ".png")
        Image.fromarray(rgb).save(image_path)
        write_binary_png(mask, mask_path)
        records.append(
            SampleRecord(
                sample_id=sample_id,
                image_path=image_path,
                mask_path=mask_path,
                height=size,
                width=size,
            )
        )
    manifest = Manifest(tag=tag or style, root=out_dir, records=records)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest
