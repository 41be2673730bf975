"""Dataset discovery, mask and edge I/O, holdout split, augmentation, batching.

A dataset root holds an images directory and a masks directory with files
paired by stem; an optional edges directory pairs ``<id>.edge.png`` files.
Masks and edges are strictly binary at rest (PNG values 0 and 255) and stay
two-valued through every transform here.
"""
from __future__ import annotations

import json
import logging
import math
import os
import random
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import AugmentConfig, DataConfig, DataError

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class SampleRecord:
    sample_id: str
    image_path: str
    mask_path: str
    edge_path: str | None = None
    height: int = 0
    width: int = 0


@dataclass
class Manifest:
    tag: str
    root: str
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def save(self, path: str) -> None:
        payload = {
            "tag": self.tag,
            "root": self.root,
            "samples": [vars(r) for r in self.records],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path: str) -> "Manifest":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        try:
            records = [SampleRecord(**r) for r in payload["samples"]]
            return Manifest(tag=payload["tag"], root=payload["root"], records=records)
        except (KeyError, TypeError) as exc:
            raise DataError(f"manifest {path} has an unexpected layout: {exc}") from exc


def _find_pair(directory: str, stem: str, exts) -> str | None:
    for ext in exts:
        candidate = os.path.join(directory, stem + ext)
        if os.path.isfile(candidate):
            return candidate
    return None


def scan_dataset(cfg: DataConfig) -> Manifest:
    """Walk the dataset root and pair images with masks (and edges if present).

    Images without a mask and masks without an image are skipped with a
    warning; pairs whose sizes disagree are rejected with a warning. An empty
    result is allowed here so callers can decide how fatal that is.
    """
    root = cfg.root
    images_dir = os.path.join(root, cfg.images_dir)
    masks_dir = os.path.join(root, cfg.masks_dir)
    if not os.path.isdir(images_dir):
        raise DataError(f"images directory not found: {images_dir}")
    if not os.path.isdir(masks_dir):
        raise DataError(f"masks directory not found: {masks_dir}")
    edges_dir = os.path.join(root, cfg.edges_dir) if cfg.edges_dir else None

    records = []
    stems_seen = set()
    for name in sorted(os.listdir(images_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in IMAGE_EXTS:
            continue
        stems_seen.add(stem)
        image_path = os.path.join(images_dir, name)
        mask_path = _find_pair(masks_dir, stem, IMAGE_EXTS)
        if mask_path is None:
            log.warning("image %s has no mask, skipping", name)
            continue
        with Image.open(image_path) as im:
            iw, ih = im.size
        with Image.open(mask_path) as im:
            mw, mh = im.size
        if (iw, ih) != (mw, mh):
            log.warning(
                "skipping %s: image is %dx%d but mask is %dx%d", stem, iw, ih, mw, mh
            )
            continue
        edge_path = None
        if edges_dir and os.path.isdir(edges_dir):
            edge_path = _find_pair(edges_dir, stem + ".edge", (".png",)) or _find_pair(
                edges_dir, stem, (".png",)
            )
        records.append(
            SampleRecord(
                sample_id=stem,
                image_path=image_path,
                mask_path=mask_path,
                edge_path=edge_path,
                height=ih,
                width=iw,
            )
        )
    for name in sorted(os.listdir(masks_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTS and stem not in stems_seen:
            log.warning("mask %s has no image", name)
    if not records:
        log.warning("dataset at %s contains no usable samples", root)
    return Manifest(tag=cfg.tag, root=root, records=records)


def load_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_mask(path: str) -> np.ndarray:
    """Read a mask PNG as a {0, 1} map. Values are binarised at 128."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.uint8)


def load_edge(path: str) -> np.ndarray:
    """Read an edge PNG; at rest these must hold only 0 and 255."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except OSError as exc:
        raise DataError(f"cannot read edge map {path}: {exc}") from exc
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise DataError(f"edge map {path} holds values other than 0/255: {bad[:8].tolist()}")
    return (arr == 255).astype(np.uint8)


def write_binary_png(arr: np.ndarray, path: str) -> None:
    arr = np.asarray(arr)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("binary PNG writer expects a {0, 1} map")
    Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(path)


def split_holdout(manifest: Manifest, fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Seeded shuffle, then the first floor(n * fraction) records hold out.

    The two halves are disjoint, cover the input exactly, and depend only on
    the seed and the record order.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"holdout fraction must lie strictly between 0 and 1, got {fraction}")
    idx = list(range(len(manifest.records)))
    random.Random(seed).shuffle(idx)
    k = int(len(idx) * fraction)
    test_idx, train_idx = idx[:k], idx[k:]
    train = Manifest(manifest.tag, manifest.root, [manifest.records[i] for i in train_idx])
    test = Manifest(manifest.tag, manifest.root, [manifest.records[i] for i in test_idx])
    return train, test


def imbalance_stats(manifest: Manifest) -> tuple[float, float]:
    """Crack and background pixel shares in percent, two decimals, pooled
    over all masks."""
    crack = total = 0
    for rec in manifest.records:
        mask = load_mask(rec.mask_path)
        crack += int(mask.sum())
        total += mask.size
    if total == 0:
        raise DataError("cannot compute class shares of an empty dataset")
    pct = 100.0 * crack / total
    return round(pct, 2), round(100.0 - pct, 2)


# --- geometric transforms -------------------------------------------------

Sample = tuple[np.ndarray, np.ndarray, np.ndarray | None]  # image HWC, mask HW, edge HW


def _check_sample(sample: Sample) -> Sample:
    image, mask, edge = sample
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} sizes differ")
    if edge is not None and edge.shape != mask.shape:
        raise ValueError(f"edge {edge.shape} and mask {mask.shape} sizes differ")
    return sample


def hflip(sample: Sample) -> Sample:
    image, mask, edge = _check_sample(sample)
    return (
        np.ascontiguousarray(image[:, ::-1]),
        np.ascontiguousarray(mask[:, ::-1]),
        None if edge is None else np.ascontiguousarray(edge[:, ::-1]),
    )


def vflip(sample: Sample) -> Sample:
    image, mask, edge = _check_sample(sample)
    return (
        np.ascontiguousarray(image[::-1]),
        np.ascontiguousarray(mask[::-1]),
        None if edge is None else np.ascontiguousarray(edge[::-1]),
    )


def largest_inscribed_size(h: int, w: int, angle_deg: float) -> tuple[int, int]:
    """Largest axis-aligned box inside an h x w frame rotated by angle_deg."""
    a = math.radians(angle_deg % 180.0)
    sin_a, cos_a = abs(math.sin(a)), abs(math.cos(a))
    if h <= 0 or w <= 0:
        return 0, 0
    wide = w >= h
    long_side, short_side = (w, h) if wide else (h, w)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * short_side
        wr, hr = (x / sin_a, x / cos_a) if wide else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr = (w * cos_a - h * sin_a) / cos_2a
        hr = (h * cos_a - w * sin_a) / cos_2a
    return max(1, int(wr)), max(1, int(hr))


def _center_crop(arr: np.ndarray, ch: int, cw: int) -> np.ndarray:
    h, w = arr.shape[:2]
    top = (h - ch) // 2
    left = (w - cw) // 2
    return arr[top : top + ch, left : left + cw]


def rotate_sample(sample: Sample, angle_deg: float) -> Sample:
    """Rotate about the centre with reflective fill, then crop to the largest
    rectangle that contains no reflected pixels. Image pixels interpolate
    bilinearly; mask and edge use nearest neighbour so they stay binary."""
    image, mask, edge = _check_sample(sample)
    if abs(angle_deg) < 1e-9:
        return sample
    h, w = mask.shape
    rot_image = ndimage.rotate(
        image, angle_deg, axes=(1, 0), reshape=False, order=1, mode="reflect"
    )
    rot_mask = ndimage.rotate(
        mask, angle_deg, axes=(1, 0), reshape=False, order=0, mode="reflect"
    )
    rot_edge = None
    if edge is not None:
        rot_edge = ndimage.rotate(
            edge, angle_deg, axes=(1, 0), reshape=False, order=0, mode="reflect"
        )
    cw, ch = largest_inscribed_size(h, w, angle_deg)
    return (
        _center_crop(rot_image, ch, cw),
        _center_crop(rot_mask, ch, cw),
        None if rot_edge is None else _center_crop(rot_edge, ch, cw),
    )


def crop_at(sample: Sample, top: int, left: int, size: int) -> Sample:
    image, mask, edge = _check_sample(sample)
    h, w = mask.shape
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ValueError(f"crop ({top},{left})+{size} leaves the {h}x{w} frame")
    sl = np.s_[top : top + size, left : left + size]
    return (
        np.ascontiguousarray(image[sl]),
        np.ascontiguousarray(mask[sl]),
        None if edge is None else np.ascontiguousarray(edge[sl]),
    )


def _resize_up(sample: Sample, size: int) -> Sample:
    image, mask, edge = sample
    h, w = mask.shape
    scale = size / min(h, w)
    nh, nw = max(size, math.ceil(h * scale)), max(size, math.ceil(w * scale))
    log.warning("sample smaller than crop size after rotation, resizing %sx%s -> %sx%s", h, w, nh, nw)
    im = Image.fromarray(image).resize((nw, nh), Image.BILINEAR)
    mk = Image.fromarray(mask).resize((nw, nh), Image.NEAREST)
    ed = None if edge is None else Image.fromarray(edge).resize((nw, nh), Image.NEAREST)
    return (
        np.asarray(im),
        np.asarray(mk),
        None if ed is None else np.asarray(ed),
    )


def augment_sample(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> list[Sample]:
    """One augmentation pass: random rotation, coin-flip mirrors, random crops.

    Returns ``crops_per_image`` samples of ``crop_size`` squared. When
    disabled the sample passes through untouched as a single-item list.
    """
    cfg.validate()
    _check_sample(sample)
    if not cfg.enabled:
        return [sample]
    angle = float(rng.uniform(0.0, cfg.rotation_range)) if cfg.rotation_range > 0 else 0.0
    work = rotate_sample(sample, angle)
    if cfg.horizontal_flip and rng.random() < 0.5:
        work = hflip(work)
    if cfg.vertical_flip and rng.random() < 0.5:
        work = vflip(work)
    h, w = work[1].shape
    if h < cfg.crop_size or w < cfg.crop_size:
        work = _resize_up(work, cfg.crop_size)
        h, w = work[1].shape
    out = []
    for _ in range(cfg.crops_per_image):
        top = int(rng.integers(0, h - cfg.crop_size + 1))
        left = int(rng.integers(0, w - cfg.crop_size + 1))
        out.append(crop_at(work, top, left, cfg.crop_size))
    return out


def batches(count: int, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True):
    """Yield index lists covering range(count) once; the tail batch may be short.

    The order is a pure function of (seed, epoch), so runs replay exactly.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = list(range(count))
    if shuffle:
        random.Random(seed * 1_000_003 + epoch).shuffle(idx)
    for start in range(0, count, batch_size):
        yield idx[start : start + batch_size]
