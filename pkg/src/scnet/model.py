"""Network components for scale-aware crack segmentation.

Four sub-networks wired around a VGG-16 style trunk:

* an encoder whose five max-pool stages record pooling indices and emit a
  compressed attention side map per scale,
* a mirror decoder that undoes each pool with the recorded indices and emits
  its own per-scale side maps,
* an enhancement path that fuses the encoder side maps from the deepest
  scale up to the shallowest by repeated upsample-and-add,
* a fused head that pairs enhancement and decoder side maps scale by scale,
  feeding every earlier stage's map into the next, and combines all stage
  maps into one fused crack logit.

All probability maps are plain sigmoids over logits; thresholding is left to
the evaluation code.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig

CHECKPOINT_MAGIC = b"scnet-ckpt-v1\n"


class ScaleAttention(nn.Module):
    """Self-gating block used at every scale of the encoder and decoder.

    A 1x1 convolution predicts a saliency mask which is squashed to [0, 1]
    and multiplied back onto the features. A second 1x1 convolution
    compresses the gated features to ``refined_channels`` maps for the side
    paths. No pooling happens here; spatial size is preserved.
    """

    def __init__(self, channels: int, refined_channels: int = 1):
        super().__init__()
        self.channels = channels
        self.mask_conv = nn.Conv2d(channels, 1, kernel_size=1)
        self.refine_conv = nn.Conv2d(channels, refined_channels, kernel_size=1)

    def forward(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(
                f"attention block expects {self.channels} channels, got shape {tuple(x.shape)}"
            )
        mask = torch.sigmoid(self.mask_conv(x))
        attended = mask * x
        refined = self.refine_conv(attended)
        return mask, attended, refined


class ScalarGate(nn.Module):
    """Ablation stand-in for attention: one sigmoid-squashed scalar per site."""

    def __init__(self):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.weight) * x


def _trunk_block(in_channels: int, out_channels: list[int], use_norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_channels
    for out in out_channels:
        layers.append(nn.Conv2d(prev, out, kernel_size=3, padding=1))
        if use_norm:
            layers.append(nn.InstanceNorm2d(out, affine=False, track_running_stats=False))
        layers.append(nn.ReLU(inplace=True))
        prev = out
    return nn.Sequential(*layers)


@dataclass
class EncoderState:
    """Everything the decoder and enhancement path need from the encoder."""

    trunk: torch.Tensor
    side_inputs: list[torch.Tensor]
    pool_indices: list[torch.Tensor]
    pre_pool_sizes: list[tuple[int, int]]


class AttentionEncoder(nn.Module):
    """VGG-style trunk with per-scale pooling, gating, and side taps.

    Each stage runs its 3x3 convolutions, 2x2 max-pools with stored indices,
    then gates the pooled features. With attention enabled the gate is a
    ScaleAttention block and the side tap is its refined map; without it the
    trunk passes through untouched and the side tap is the channel mean, so
    enabling attention changes the parameter count by exactly the attention
    filters' parameters.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        blocks = []
        prev = cfg.input_channels
        for ch, n_convs in zip(cfg.encoder_channels, cfg.convs_per_block):
            blocks.append(_trunk_block(prev, [ch] * n_convs, cfg.use_instance_norm))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2, return_indices=True)
        if cfg.attention_in_encoder:
            self.attention = nn.ModuleList(
                ScaleAttention(ch, cfg.attention_out_channels) for ch in cfg.encoder_channels
            )
        elif cfg.use_scalar_weight_variant:
            self.gates = nn.ModuleList(ScalarGate() for _ in cfg.encoder_channels)

    def side_channels(self) -> int:
        return self.cfg.attention_out_channels if self.cfg.attention_in_encoder else 1

    def forward(self, x: torch.Tensor) -> EncoderState:
        if x.dim() != 4:
            raise ValueError(f"encoder expects a 4D batch, got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.input_channels:
            raise ValueError(
                f"encoder expects {self.cfg.input_channels} input channels, got {x.shape[1]}"
            )
        div = 2 ** self.cfg.num_scales
        if x.shape[-2] % div or x.shape[-1] % div:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} must be divisible by {div}"
            )
        sides, indices, sizes = [], [], []
        for i, block in enumerate(self.blocks):
            x = block(x)
            sizes.append((x.shape[-2], x.shape[-1]))
            x, idx = self.pool(x)
            indices.append(idx)
            if self.cfg.attention_in_encoder:
                _, x, refined = self.attention[i](x)
                sides.append(refined)
            elif self.cfg.use_scalar_weight_variant:
                x = self.gates[i](x)
                sides.append(x.mean(dim=1, keepdim=True))
            else:
                sides.append(x.mean(dim=1, keepdim=True))
        return EncoderState(trunk=x, side_inputs=sides, pool_indices=indices, pre_pool_sizes=sizes)


class EnhancementEncoder(nn.Module):
    """Deep-to-shallow additive fusion of the encoder side maps.

    Each input is projected to one channel; starting from the deepest map the
    running result is upsampled to the next shallower size and added to that
    scale's projection, so fusing n maps costs exactly n - 1 additions. A 1x1
    head turns every fused map into a side output at its own resolution.
    """

    def __init__(self, in_channels: list[int]):
        super().__init__()
        self.in_channels = list(in_channels)
        self.proj = nn.ModuleList(nn.Conv2d(c, 1, kernel_size=1) for c in in_channels)
        self.heads = nn.ModuleList(nn.Conv2d(1, 1, kernel_size=1) for _ in in_channels)

    def forward(self, side_inputs: list[torch.Tensor]) -> list[torch.Tensor]:
        n = len(self.proj)
        if len(side_inputs) != n:
            raise ValueError(f"expected {n} side maps, got {len(side_inputs)}")
        for x, c in zip(side_inputs, self.in_channels):
            if x.shape[1] != c:
                raise ValueError(f"side map has {x.shape[1]} channels, expected {c}")
        fused: list[torch.Tensor | None] = [None] * n
        fused[n - 1] = self.proj[n - 1](side_inputs[n - 1])
        for i in range(n - 2, -1, -1):
            up = F.interpolate(
                fused[i + 1], size=side_inputs[i].shape[-2:], mode="bilinear", align_corners=False
            )
            fused[i] = self.proj[i](side_inputs[i]) + up
        return [self.heads[i](fused[i]) for i in range(n)]


class AttentionDecoder(nn.Module):
    """Mirror of the encoder: unpool with stored indices, convolve, gate.

    Stage j undoes encoder scale n-1-j; its convolutions run at that scale's
    width and the last one steps down to the next shallower width (the first
    scale keeps its own). Side maps come out deepest first, ending at the
    input resolution.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        n = cfg.num_scales
        blocks = []
        out_channels = []
        for j in range(n):
            s = n - 1 - j
            ch = cfg.encoder_channels[s]
            out = cfg.encoder_channels[s - 1] if s >= 1 else cfg.encoder_channels[0]
            plan = [ch] * (cfg.convs_per_block[s] - 1) + [out]
            blocks.append(_trunk_block(ch, plan, cfg.use_instance_norm))
            out_channels.append(out)
        self.blocks = nn.ModuleList(blocks)
        self.stage_out_channels = out_channels
        if cfg.attention_in_decoder:
            self.attention = nn.ModuleList(
                ScaleAttention(ch, cfg.attention_out_channels) for ch in out_channels
            )
        elif cfg.use_scalar_weight_variant:
            self.gates = nn.ModuleList(ScalarGate() for _ in out_channels)

    def side_channels(self) -> int:
        return self.cfg.attention_out_channels if self.cfg.attention_in_decoder else 1

    def forward(self, state: EncoderState) -> list[torch.Tensor]:
        n = self.cfg.num_scales
        if len(state.pool_indices) != n or len(state.pre_pool_sizes) != n:
            raise ValueError("encoder state does not match the decoder depth")
        x = state.trunk
        sides = []
        for j, block in enumerate(self.blocks):
            s = n - 1 - j
            idx = state.pool_indices[s]
            if idx.shape != x.shape:
                raise ValueError(
                    f"pool indices for scale {s} have shape {tuple(idx.shape)}, "
                    f"expected {tuple(x.shape)}"
                )
            x = F.max_unpool2d(x, idx, kernel_size=2, stride=2, output_size=state.pre_pool_sizes[s])
            x = block(x)
            if self.cfg.attention_in_decoder:
                _, x, refined = self.attention[j](x)
                sides.append(refined)
            elif self.cfg.use_scalar_weight_variant:
                x = self.gates[j](x)
                sides.append(x.mean(dim=1, keepdim=True))
            else:
                sides.append(x.mean(dim=1, keepdim=True))
        return sides


class FusedNetwork(nn.Module):
    """Scale-by-scale pairing of enhancement and decoder side maps.

    Stage k concatenates enhancement map k (upsampled 2x) with decoder map
    n+1-k plus every earlier stage's full-resolution logit resampled to the
    stage's working size, so the 1x1 stage convolutions see 2, 3, ..., n+1
    channels. Each stage logit is brought to full resolution by a learned
    transposed convolution; a final 1x1 convolution over the n stage maps
    yields the fused logit.
    """

    def __init__(self, num_scales: int, enh_channels: int = 1, dec_channels: int = 1):
        super().__init__()
        self.num_scales = num_scales
        self.enh_channels = enh_channels
        self.dec_channels = dec_channels
        convs, deconvs = [], []
        for k in range(1, num_scales + 1):
            convs.append(nn.Conv2d(enh_channels + dec_channels + (k - 1), 1, kernel_size=1))
            if k == 1:
                deconvs.append(nn.ConvTranspose2d(1, 1, kernel_size=3, stride=1, padding=1))
            else:
                f = 2 ** (k - 1)
                deconvs.append(nn.ConvTranspose2d(1, 1, kernel_size=2 * f, stride=f, padding=f // 2))
        self.stage_convs = nn.ModuleList(convs)
        self.deconvs = nn.ModuleList(deconvs)
        self.fuse_conv = nn.Conv2d(num_scales, 1, kernel_size=1)

    def forward(self, enh_sides: list[torch.Tensor], dec_sides: list[torch.Tensor]):
        n = self.num_scales
        if len(enh_sides) != n or len(dec_sides) != n:
            raise ValueError(f"fused head expects {n} enhancement and {n} decoder maps")
        full = dec_sides[-1].shape[-2:]
        stage_logits: list[torch.Tensor] = []  # construction order: shallowest pairing first
        for k in range(1, n + 1):
            fe = enh_sides[k - 1]
            fd = dec_sides[n - k]
            target = fd.shape[-2:]
            parts = [F.interpolate(fe, size=target, mode="bilinear", align_corners=False), fd]
            parts += [
                F.interpolate(prev, size=target, mode="bilinear", align_corners=False)
                for prev in stage_logits
            ]
            cat = torch.cat(parts, dim=1)
            expected = self.enh_channels + self.dec_channels + (k - 1)
            if cat.shape[1] != expected:
                raise ValueError(f"stage {k} expects {expected} channels, got {cat.shape[1]}")
            z = self.deconvs[k - 1](self.stage_convs[k - 1](cat))
            if z.shape[-2:] != full:
                raise ValueError(
                    f"stage {k} produced size {tuple(z.shape[-2:])}, expected {tuple(full)}"
                )
            stage_logits.append(z)
        fused_logit = self.fuse_conv(torch.cat(stage_logits, dim=1))
        # expose deepest pairing first so index i lines up with scale weight i
        return list(reversed(stage_logits)), fused_logit


@dataclass
class ForwardOutput:
    """Per-scale and fused crack maps at the input resolution, plus the
    decoder side maps at their native (deepest-first, doubling) sizes."""

    scale_logits: list[torch.Tensor]
    fused_logit: torch.Tensor
    scale_probs: list[torch.Tensor]
    fused_prob: torch.Tensor
    decoder_sides: list[torch.Tensor]

    def all_logits(self) -> list[torch.Tensor]:
        return [self.fused_logit, *self.scale_logits]


class SCNet(nn.Module):
    """Full model: encoder, enhancement path, decoder, fused head."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.validate()
        self.encoder = AttentionEncoder(self.config)
        self.enhancement = EnhancementEncoder(
            [self.encoder.side_channels()] * self.config.num_scales
        )
        self.decoder = AttentionDecoder(self.config)
        self.fused = FusedNetwork(
            self.config.num_scales,
            enh_channels=self.encoder.side_channels(),
            dec_channels=self.decoder.side_channels(),
        )

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        state = self.encoder(x)
        enh_sides = self.enhancement(state.side_inputs)
        dec_sides = self.decoder(state)
        scale_logits, fused_logit = self.fused(enh_sides, dec_sides)
        return ForwardOutput(
            scale_logits=scale_logits,
            fused_logit=fused_logit,
            scale_probs=[torch.sigmoid(z) for z in scale_logits],
            fused_prob=torch.sigmoid(fused_logit),
            decoder_sides=dec_sides,
        )


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def attention_site_channels(cfg: ModelConfig) -> tuple[list[int], list[int]]:
    """Channel width at every potential gating site (encoder list, decoder list)."""
    n = cfg.num_scales
    enc = list(cfg.encoder_channels)
    dec = []
    for j in range(n):
        s = n - 1 - j
        dec.append(cfg.encoder_channels[s - 1] if s >= 1 else cfg.encoder_channels[0])
    return enc, dec


def attention_parameter_count(cfg: ModelConfig) -> int:
    """Exact number of parameters the attention blocks add to this config."""
    enc, dec = attention_site_channels(cfg)
    sites = []
    if cfg.attention_in_encoder:
        sites += enc
    if cfg.attention_in_decoder:
        sites += dec
    cp = cfg.attention_out_channels
    return sum((c + 1) + (c * cp + cp) for c in sites)


def init_weights(
    model: nn.Module,
    scheme: str = "xavier",
    seed: int | None = None,
    encoder_checkpoint: str | None = None,
) -> None:
    """Initialise all weights in place.

    ``xavier`` draws Glorot-uniform conv weights and zero biases; seeding
    makes the draw reproducible. ``pretrained-encoder`` first runs the xavier
    pass, then overwrites every ``encoder.*`` tensor with the matching array
    from the given checkpoint.
    """
    if scheme not in ("xavier", "pretrained-encoder"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    if seed is not None:
        torch.manual_seed(seed)
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.xavier_uniform_(mod.weight)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, ScalarGate):
            nn.init.zeros_(mod.weight)
    if scheme == "pretrained-encoder":
        if not encoder_checkpoint:
            raise ConfigError("pretrained-encoder init needs a checkpoint path")
        _, arrays, _ = read_checkpoint_arrays(encoder_checkpoint)
        own = dict(model.named_parameters())
        loaded = 0
        with torch.no_grad():
            for name, arr in arrays.items():
                if not name.startswith("encoder."):
                    continue
                if name not in own:
                    raise ValueError(f"checkpoint tensor {name} has no counterpart in the model")
                if tuple(own[name].shape) != tuple(arr.shape):
                    raise ValueError(
                        f"checkpoint tensor {name} has shape {arr.shape}, "
                        f"model expects {tuple(own[name].shape)}"
                    )
                own[name].copy_(torch.from_numpy(arr.copy()))
                loaded += 1
        if loaded == 0:
            raise ValueError(f"no encoder tensors found in {encoder_checkpoint}")


_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def save_checkpoint(model: SCNet, path: str, extra: dict | None = None) -> None:
    """Write a deterministic binary checkpoint.

    Layout: magic line, little-endian uint64 header length, a sorted-keys
    JSON header (model config, extra metadata, array table), then the raw
    little-endian array bytes in table order. Saving the same state twice
    yields byte-identical files.
    """
    state = model.state_dict()
    table = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        if str(arr.dtype) not in _DTYPES:
            arr = arr.astype(np.float32)
        table.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = {
        "format": CHECKPOINT_MAGIC.decode().strip(),
        "model_config": dataclasses.asdict(model.config),
        "extra": extra or {},
        "arrays": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint_arrays(path: str) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return (model config dict, name -> array, extra metadata) from a checkpoint."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path} is not a recognised checkpoint (bad magic)")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            arrays = {}
            for entry in header["arrays"]:
                dtype = _DTYPES[entry["dtype"]]
                count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
                raw = fh.read(count * np.dtype(dtype).itemsize)
                arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
    except OSError as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    return header["model_config"], arrays, header.get("extra", {})


def load_checkpoint(path: str) -> tuple[SCNet, dict]:
    """Rebuild the model a checkpoint was saved from. Returns (model, extra)."""
    cfg_dict, arrays, extra = read_checkpoint_arrays(path)
    cfg = ModelConfig(**cfg_dict)
    model = SCNet(cfg)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    model.load_state_dict(state)
    return model, extra


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    """Replicate-pad a 4D batch so both spatial sizes divide ``multiple``.

    Returns the padded batch and (top, left, height, width) for cropping
    maps back to the original frame.
    """
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    top, left = ph // 2, pw // 2
    if ph or pw:
        x = F.pad(x, (left, pw - left, top, ph - top), mode="replicate")
    return x, (top, left, h, w)


def crop_back(x: torch.Tensor, frame: tuple[int, int, int, int]) -> torch.Tensor:
    top, left, h, w = frame
    return x[..., top : top + h, left : left + w]


def predict(model: SCNet, x: torch.Tensor) -> ForwardOutput:
    """Run the model on inputs of arbitrary size by padding and cropping back.

    Decoder side maps live at reduced scales where the crop frame has no
    meaning, so they are dropped from the result.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            padded, frame = pad_to_multiple(x, 2 ** model.config.num_scales)
            out = model(padded)
    finally:
        if was_training:
            model.train()
    return ForwardOutput(
        scale_logits=[crop_back(z, frame) for z in out.scale_logits],
        fused_logit=crop_back(out.fused_logit, frame),
        scale_probs=[crop_back(p, frame) for p in out.scale_probs],
        fused_prob=crop_back(out.fused_prob, frame),
        decoder_sides=[],
    )
