import numpy as np
import pytest
import torch
import torch.nn.functional as F

from scnet.config import ConfigError, ModelConfig
from scnet.model import (
    CHECKPOINT_MAGIC,
    AttentionDecoder,
    AttentionEncoder,
    EnhancementEncoder,
    FusedNetwork,
    ScaleAttention,
    SCNet,
    attention_parameter_count,
    init_weights,
    load_checkpoint,
    parameter_count,
    predict,
    read_checkpoint_arrays,
    save_checkpoint,
)

from conftest import tiny4_config, tiny5_config, zero_parameters


# --- attention block --------------------------------------------------------


def test_attention_zero_weights_gate_at_half():
    att = ScaleAttention(8)
    zero_parameters(att)
    x = torch.randn(2, 8, 6, 6)
    mask, attended, refined = att(x)
    assert torch.equal(mask, torch.full_like(mask, 0.5))  # sigmoid(0)
    assert torch.allclose(attended, 0.5 * x)
    assert torch.equal(refined, torch.zeros_like(refined))


def test_attention_constant_input_gives_constant_mask():
    att = ScaleAttention(4)
    x = torch.arange(4, dtype=torch.float32).reshape(1, 4, 1, 1).expand(1, 4, 9, 9)
    mask, _, refined = att(x)
    assert torch.allclose(mask, mask[..., :1, :1].expand_as(mask))
    assert torch.allclose(refined, refined[..., :1, :1].expand_as(refined))


def test_attention_shapes_and_range():
    att = ScaleAttention(64, refined_channels=1)
    x = torch.randn(1, 64, 32, 32)
    mask, attended, refined = att(x)
    assert mask.shape == (1, 1, 32, 32)
    assert attended.shape == x.shape
    assert refined.shape == (1, 1, 32, 32)
    assert mask.min() > 0 and mask.max() < 1


def test_attention_rejects_channel_mismatch():
    att = ScaleAttention(8)
    with pytest.raises(ValueError, match="8 channels"):
        att(torch.randn(1, 4, 6, 6))


# --- encoder ----------------------------------------------------------------


def test_encoder_side_map_sizes_at_256():
    enc = AttentionEncoder(tiny5_config())
    state = enc(torch.randn(1, 4, 256, 256))
    assert [s.shape[-1] for s in state.side_inputs] == [128, 64, 32, 16, 8]
    assert [sz for sz, _ in state.pre_pool_sizes] == [256, 128, 64, 32, 16]
    assert state.trunk.shape[-2:] == (8, 8)


def test_encoder_rejects_indivisible_input():
    enc = AttentionEncoder(tiny4_config())
    with pytest.raises(ValueError, match="divisible"):
        enc(torch.randn(1, 4, 100, 100))
    with pytest.raises(ValueError, match="channels"):
        enc(torch.randn(1, 3, 64, 64))


def test_encoder_zero_input_pools_first_window_position():
    # with all parameters zero every pre-pool map is zero, so the tie-break
    # must pick the first (row-major) slot of each 2x2 window
    cfg = tiny4_config(use_instance_norm=False)
    enc = AttentionEncoder(cfg)
    zero_parameters(enc)
    state = enc(torch.zeros(1, 4, 16, 16))
    idx0 = state.pool_indices[0][0, 0]
    rows = torch.arange(0, 16, 2)
    expected = (rows[:, None] * 16 + rows[None, :]).to(idx0.dtype)
    assert torch.equal(idx0, expected)


def test_encoder_without_attention_keeps_plain_trunk():
    cfg = tiny4_config(attention_in_encoder=False, attention_in_decoder=False)
    enc = AttentionEncoder(cfg)
    x = torch.randn(1, 4, 32, 32)
    state = enc(x)

    # replay the forward by hand: blocks and pools only, no gating
    with torch.no_grad():
        ref = x
        for block in enc.blocks:
            ref = block(ref)
            ref, _ = enc.pool(ref)
    assert torch.equal(state.trunk, ref)
    # side taps are parameter-free channel means of the trunk maps
    assert torch.allclose(state.side_inputs[-1], ref.mean(dim=1, keepdim=True))


# --- enhancement path -------------------------------------------------------


def test_enhancement_additive_chain():
    # identity projections turn the fusion into plain sums; constant inputs
    # stay constant through bilinear upsampling, so map k must equal the sum
    # of constants from scale k down to the deepest scale
    n = 4
    enh = EnhancementEncoder([1] * n)
    with torch.no_grad():
        for conv in list(enh.proj) + list(enh.heads):
            conv.weight.fill_(1.0)
            conv.bias.zero_()
    consts = [1.0, 2.0, 4.0, 8.0]
    sides = [torch.full((1, 1, 2 ** (n - i), 2 ** (n - i)), consts[i]) for i in range(n)]
    fused = enh(sides)
    for i in range(n):
        expected = sum(consts[i:])
        assert torch.allclose(fused[i], torch.full_like(fused[i], expected), atol=1e-5)
    assert fused[0].shape[-1] == 16 and fused[-1].shape[-1] == 2


def test_enhancement_zero_parameters_zero_sides():
    enh = EnhancementEncoder([1, 1, 1, 1, 1])
    zero_parameters(enh)
    sides = [torch.randn(1, 1, 2 ** (5 - i), 2 ** (5 - i)) for i in range(5)]
    for out in enh(sides):
        assert torch.equal(out, torch.zeros_like(out))


def test_enhancement_rejects_wrong_inputs():
    enh = EnhancementEncoder([1, 1])
    with pytest.raises(ValueError):
        enh([torch.randn(1, 1, 4, 4)])
    with pytest.raises(ValueError):
        enh([torch.randn(1, 2, 4, 4), torch.randn(1, 1, 2, 2)])


# --- decoder ----------------------------------------------------------------


def test_unpool_places_value_at_recorded_slot():
    x = torch.tensor([[[[5.0]]]])
    idx = torch.tensor([[[[0]]]])
    out = F.max_unpool2d(x, idx, kernel_size=2, stride=2, output_size=(2, 2))
    assert torch.equal(out[0, 0], torch.tensor([[5.0, 0.0], [0.0, 0.0]]))


def test_decoder_side_sizes_ascend():
    cfg = tiny5_config()
    enc = AttentionEncoder(cfg)
    dec = AttentionDecoder(cfg)
    state = enc(torch.randn(1, 4, 256, 256))
    sides = dec(state)
    assert [s.shape[-1] for s in sides] == [16, 32, 64, 128, 256]
    assert all(s.shape[1] == 1 for s in sides)


def test_decoder_rejects_bad_indices():
    cfg = tiny4_config()
    enc = AttentionEncoder(cfg)
    dec = AttentionDecoder(cfg)
    state = enc(torch.randn(1, 4, 32, 32))
    state.pool_indices[-1] = state.pool_indices[-1][..., :1, :1]
    with pytest.raises(ValueError, match="indices"):
        dec(state)
    state.pool_indices.pop()
    with pytest.raises(ValueError):
        dec(state)


def test_pool_unpool_pool_round_trip():
    g = torch.Generator().manual_seed(3)
    for _ in range(20):
        x = torch.rand(2, 3, 8, 8, generator=g)
        pooled, idx = F.max_pool2d(x, 2, 2, return_indices=True)
        restored = F.max_unpool2d(pooled, idx, 2, 2)
        pooled_again, _ = F.max_pool2d(restored, 2, 2, return_indices=True)
        assert torch.equal(pooled_again, pooled)


# --- fused head -------------------------------------------------------------


def test_fused_stage_channel_plan():
    fused = FusedNetwork(5)
    assert [c.in_channels for c in fused.stage_convs] == [2, 3, 4, 5, 6]
    assert fused.fuse_conv.in_channels == 5
    assert all(c.out_channels == 1 for c in fused.stage_convs)
    # deconv k upsamples by 2^(k-1)
    assert [d.stride[0] for d in fused.deconvs] == [1, 2, 4, 8, 16]


def test_fused_zero_everything_gives_half_probability():
    model = SCNet(tiny4_config())
    zero_parameters(model)
    out = model(torch.randn(1, 4, 32, 32))
    assert torch.equal(out.fused_logit, torch.zeros_like(out.fused_logit))
    assert torch.equal(out.fused_prob, torch.full_like(out.fused_prob, 0.5))
    for p in out.scale_probs:
        assert torch.equal(p, torch.full_like(p, 0.5))


def test_fused_rejects_wrong_list_lengths():
    fused = FusedNetwork(3)
    sides = [torch.randn(1, 1, 2 ** (3 - i), 2 ** (3 - i)) for i in range(3)]
    with pytest.raises(ValueError):
        fused(sides[:2], sides)


# --- full model -------------------------------------------------------------


@pytest.mark.parametrize("size", [64, 128, 256])
def test_forward_output_shapes_and_range(size):
    model = SCNet(tiny4_config())
    init_weights(model, seed=1)
    model.eval()
    with torch.no_grad():
        out = model(torch.randn(1, 4, size, size))
    maps = [out.fused_prob, *out.scale_probs]
    assert len(maps) == 5  # four scales plus fused
    for p in maps:
        assert p.shape == (1, 1, size, size)
        assert p.min() > 0 and p.max() < 1
    assert len(out.decoder_sides) == 4


def test_forward_is_deterministic_in_eval_mode():
    model = SCNet(tiny4_config())
    init_weights(model, seed=2)
    model.eval()
    x = torch.randn(1, 4, 32, 32)
    with torch.no_grad():
        a = model(x)
        b = model(x)
    assert torch.equal(a.fused_prob, b.fused_prob)
    for pa, pb in zip(a.scale_probs, b.scale_probs):
        assert torch.equal(pa, pb)


def test_predict_pads_and_crops_arbitrary_sizes():
    model = SCNet(tiny4_config())
    init_weights(model, seed=3)
    out = predict(model, torch.randn(1, 4, 70, 90))
    assert out.fused_prob.shape == (1, 1, 70, 90)
    assert all(p.shape == (1, 1, 70, 90) for p in out.scale_probs)

    # on an already-divisible input predict() must equal a plain forward
    x = torch.randn(1, 4, 32, 32)
    model.eval()
    with torch.no_grad():
        direct = model(x)
    assert torch.equal(predict(model, x).fused_prob, direct.fused_prob)


# --- parameter accounting ---------------------------------------------------


def test_attention_changes_count_by_attention_parameters_only():
    cfg_on = tiny4_config()
    cfg_off = tiny4_config(attention_in_encoder=False, attention_in_decoder=False)
    delta = parameter_count(SCNet(cfg_on)) - parameter_count(SCNet(cfg_off))
    assert delta == attention_parameter_count(cfg_on)
    assert delta > 0

    enc_only = tiny4_config(attention_in_decoder=False)
    delta_enc = parameter_count(SCNet(enc_only)) - parameter_count(SCNet(cfg_off))
    assert delta_enc == attention_parameter_count(enc_only)


def test_scalar_variant_adds_one_parameter_per_site():
    plain = tiny4_config(attention_in_encoder=False, attention_in_decoder=False)
    scalar = tiny4_config(
        attention_in_encoder=False,
        attention_in_decoder=False,
        use_scalar_weight_variant=True,
    )
    extra = parameter_count(SCNet(scalar)) - parameter_count(SCNet(plain))
    assert extra == 2 * plain.num_scales  # one gate per encoder and decoder stage


# --- initialization ---------------------------------------------------------


def test_init_weights_reproducible_and_zero_bias():
    a = SCNet(tiny4_config())
    b = SCNet(tiny4_config())
    init_weights(a, seed=9)
    init_weights(b, seed=9)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)
    for name, p in a.named_parameters():
        if name.endswith(".bias"):
            assert torch.count_nonzero(p) == 0

    c = SCNet(tiny4_config())
    init_weights(c, seed=10)
    assert not torch.equal(
        next(a.encoder.parameters()), next(c.encoder.parameters())
    )


def test_init_weights_glorot_bound():
    model = SCNet(tiny4_config())
    init_weights(model, seed=4)
    conv = model.encoder.blocks[1][0]  # 4 -> 8 channels, 3x3
    fan_in = conv.in_channels * 9
    fan_out = conv.out_channels * 9
    bound = (6.0 / (fan_in + fan_out)) ** 0.5
    w = conv.weight.detach()
    assert w.abs().max() <= bound + 1e-7
    assert w.abs().max() > 0.8 * bound  # uniform draws should approach the bound


def test_init_weights_unknown_scheme():
    with pytest.raises(ConfigError):
        init_weights(SCNet(tiny4_config()), scheme="kaiming")


def test_pretrained_encoder_scheme(tmp_path):
    donor = SCNet(tiny4_config())
    init_weights(donor, seed=21)
    ckpt = tmp_path / "donor.ckpt"
    save_checkpoint(donor, str(ckpt))

    model = SCNet(tiny4_config())
    init_weights(model, scheme="pretrained-encoder", seed=22, encoder_checkpoint=str(ckpt))
    donor_params = dict(donor.named_parameters())
    for name, p in model.named_parameters():
        if name.startswith("encoder."):
            assert torch.equal(p, donor_params[name]), name
    # everything outside the encoder still comes from the fresh draw
    assert not torch.equal(
        model.fused.fuse_conv.weight, donor.fused.fuse_conv.weight
    )

    wrong = SCNet(tiny4_config(encoder_channels=[8, 8, 8, 8]))
    with pytest.raises(ValueError, match="shape"):
        init_weights(wrong, scheme="pretrained-encoder", encoder_checkpoint=str(ckpt))


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = SCNet(tiny4_config())
    init_weights(model, seed=5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, str(path), extra={"threshold": 0.37})

    with open(path, "rb") as fh:
        assert fh.read(len(CHECKPOINT_MAGIC)) == CHECKPOINT_MAGIC

    restored, extra = load_checkpoint(str(path))
    assert extra == {"threshold": 0.37}
    assert restored.config == model.config
    for (_, pa), (_, pb) in zip(model.named_parameters(), restored.named_parameters()):
        assert torch.equal(pa, pb)

    x = torch.randn(1, 4, 32, 32)
    model.eval(), restored.eval()
    with torch.no_grad():
        assert torch.equal(model(x).fused_prob, restored(x).fused_prob)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    model = SCNet(tiny4_config())
    init_weights(model, seed=6)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, str(p1))
    save_checkpoint(model, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint_arrays(str(path))
    with pytest.raises(ValueError):
        load_checkpoint(str(tmp_path / "missing.ckpt"))
