"""Edge prior: the binary edge map supplied as the network's fourth channel.

Three sources, picked by PriorConfig.mode:

* ``precomputed``   - the dataset ships per-sample edge PNGs,
* ``learned-edge-detector`` - a VGG-style holistic edge network loaded from
  a torch state-dict checkpoint,
* ``classical-fallback``    - Sobel gradient magnitude with hysteresis
  linking, for corpora without edge annotations or a detector checkpoint.

Also home to input assembly: RGB (plus the optional edge channel) mapped to
[-1, +1] float planes.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .config import ConfigError, PriorConfig


def normalize_image(rgb: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities to [-1, +1]: v / 127.5 - 1."""
    arr = np.asarray(rgb, dtype=np.float32)
    return arr / 127.5 - 1.0


def denormalize_image(norm: np.ndarray) -> np.ndarray:
    """Inverse of normalize_image, rounded back to uint8."""
    arr = (np.asarray(norm, dtype=np.float32) + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def assemble_input(rgb: np.ndarray, edge: np.ndarray | None = None) -> np.ndarray:
    """Stack normalized RGB planes (CHW float32), plus the edge plane if given.

    The edge map must be binary; its plane is 2 * e - 1, so edge pixels sit at
    +1 and the rest at -1, the extremes of the image range.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {rgb.shape}")
    planes = normalize_image(rgb).transpose(2, 0, 1)
    if edge is None:
        return np.ascontiguousarray(planes, dtype=np.float32)
    edge = np.asarray(edge)
    if edge.shape != rgb.shape[:2]:
        raise ValueError(f"edge shape {edge.shape} does not match image {rgb.shape[:2]}")
    if not np.all((edge == 0) | (edge == 1)):
        raise ValueError("edge map must contain only 0 and 1")
    edge_plane = (2.0 * edge.astype(np.float32) - 1.0)[None]
    return np.concatenate([planes, edge_plane], axis=0).astype(np.float32)


def sobel_edge_map(rgb: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Classical fallback: Sobel magnitude plus hysteresis linking.

    The magnitude is normalised by its maximum (a constant image therefore
    has no edges at all). Pixels above ``threshold`` seed edges; weak pixels
    above half the threshold survive only when 8-connected to a seed.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim == 3:
        gray = (
            0.299 * rgb[..., 0].astype(np.float64)
            + 0.587 * rgb[..., 1].astype(np.float64)
            + 0.114 * rgb[..., 2].astype(np.float64)
        )
    elif rgb.ndim == 2:
        gray = rgb.astype(np.float64)
    else:
        raise ValueError(f"expected a 2D or HxWx3 image, got shape {rgb.shape}")
    gx = ndimage.sobel(gray, axis=1)
    gy = ndimage.sobel(gray, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(gray.shape, dtype=np.uint8)
    mag /= peak
    strong = mag >= threshold
    weak = mag >= threshold / 2.0
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(gray.shape, dtype=np.uint8)
    keep = np.unique(labels[strong])
    keep = keep[keep > 0]
    edge = np.isin(labels, keep)
    return edge.astype(np.uint8)


class HedNetwork(nn.Module):
    """Holistic edge detector: VGG-16 trunk with per-stage side outputs.

    Each stage's last feature map feeds a 1x1 side conv; side maps are
    bilinearly resized to the input frame and fused by one more 1x1 conv.
    Works on any input size since pooling losses are undone by the resize.
    """

    CHANNELS = (64, 128, 256, 512, 512)
    CONVS = (2, 2, 3, 3, 3)

    def __init__(self):
        super().__init__()
        blocks = []
        prev = 3
        for ch, n_convs in zip(self.CHANNELS, self.CONVS):
            layers = []
            for _ in range(n_convs):
                layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(inplace=True)]
                prev = ch
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)
        self.side_convs = nn.ModuleList(nn.Conv2d(ch, 1, 1) for ch in self.CHANNELS)
        self.fuse = nn.Conv2d(len(self.CHANNELS), 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        sides = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.max_pool2d(x, 2, 2)
            x = block(x)
            side = self.side_convs[i](x)
            if side.shape[-2:] != size:
                side = F.interpolate(side, size=size, mode="bilinear", align_corners=False)
            sides.append(side)
        return torch.sigmoid(self.fuse(torch.cat(sides, dim=1)))


def load_edge_detector(path: str) -> HedNetwork:
    model = HedNetwork()
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise ConfigError(f"edge detector checkpoint not found: {path}") from exc
    except Exception as exc:
        raise ConfigError(f"cannot load edge detector checkpoint {path}: {exc}") from exc
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"edge detector checkpoint {path} does not fit: {exc}") from exc
    model.eval()
    return model


class EdgePrior:
    """Produces the binary edge map for a sample according to the config."""

    def __init__(self, cfg: PriorConfig):
        cfg.validate()
        self.cfg = cfg
        self._detector: HedNetwork | None = None

    def edge_map(self, rgb: np.ndarray, precomputed: np.ndarray | None = None) -> np.ndarray:
        if self.cfg.mode == "precomputed":
            if precomputed is None:
                raise ValueError("prior mode is 'precomputed' but no edge map was supplied")
            edge = np.asarray(precomputed)
            if not np.all((edge == 0) | (edge == 1)):
                raise ValueError("precomputed edge map must contain only 0 and 1")
            if edge.shape != np.asarray(rgb).shape[:2]:
                raise ValueError("precomputed edge map does not match the image size")
            return edge.astype(np.uint8)
        if self.cfg.mode == "classical-fallback":
            return sobel_edge_map(rgb, self.cfg.threshold)
        # learned-edge-detector
        if self._detector is None:
            self._detector = load_edge_detector(self.cfg.checkpoint)
        x = torch.from_numpy(normalize_image(rgb).transpose(2, 0, 1)[None])
        with torch.no_grad():
            prob = self._detector(x)[0, 0].numpy()
        return (prob >= self.cfg.threshold).astype(np.uint8)
