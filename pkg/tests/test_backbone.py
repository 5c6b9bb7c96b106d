import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fewseg.backbone import (EncoderConfig, ImageEncoder, freeze, load_pretrained, param_hash, patch_embed,
                             save_encoder)
from fewseg.errors import GeometryMismatch, ShapeMismatch
from fewseg.model import ModelConfig, build_model
from fewseg.prompts import coarse_bbox
from fewseg.training import combined_loss

from conftest import small_config


def test_patch_embed_shape():
    enc = ImageEncoder(EncoderConfig(64, 8, 96, 4, 3))
    assert patch_embed(enc, torch.randn(1, 3, 64, 64)).shape == (1, 96, 8, 8)


def test_patch_embed_zero_projection_gives_positional_term():
    enc = ImageEncoder(EncoderConfig(64, 8, 96, 4, 3))
    with torch.no_grad():
        enc.patch_embed.proj.weight.zero_()
        enc.patch_embed.proj.bias.zero_()
    out = enc.embed(torch.zeros(1, 3, 64, 64))
    torch.testing.assert_close(out, enc.pos_embed.detach())


def test_patch_locality():
    enc = ImageEncoder(EncoderConfig(64, 8, 96, 4, 3))
    a = torch.randn(1, 3, 64, 64)
    b = a.clone()
    b[:, :, 16:24, 40:48] += 1.0  # grid cell (2, 5)
    with torch.no_grad():
        diff = (enc.patch_embed(a) - enc.patch_embed(b)).abs().sum(1)[0]
    changed = (diff > 0).nonzero().tolist()
    assert changed == [[2, 5]]


@pytest.mark.parametrize("shape", [(1, 3, 32, 32), (1, 1, 64, 64), (3, 64, 64)])
def test_wrong_input(shape):
    enc = ImageEncoder(EncoderConfig(64, 8, 32, 2, 2))
    with pytest.raises(ShapeMismatch):
        enc(torch.zeros(shape))


def test_encode_without_adapters_is_plain_pass():
    enc = ImageEncoder(EncoderConfig(32, 4, 16, 2, 2)).eval()
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        feats = enc(x)
        h = enc.embed(x)
        for k, blk in enumerate(enc.blocks):
            h = blk(h)
            torch.testing.assert_close(feats.layers[k], h, rtol=0, atol=0)
    assert len(feats.layers) == 2


def test_zeroed_adapters_match_plain_pass():
    m = build_model(small_config(seed=1)).double()
    with torch.no_grad():
        for p in m.adapters.parameters():
            p.zero_()
    x = torch.randn(1, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        plain = m.encoder(x)
        adapted = m.encode(x)
    for a, b in zip(plain.layers, adapted.layers):
        torch.testing.assert_close(b, a, rtol=1e-6, atol=1e-6)


def test_encode_deterministic(toy_model):
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        a = toy_model.encode(x)
        b = toy_model.encode(x)
    for u, v in zip(a.layers, b.layers):
        assert torch.equal(u, v)


def test_adapter_shape_mismatch():
    enc = ImageEncoder(EncoderConfig(32, 4, 16, 2, 2))

    class Bad:
        def prepare(self, image, x0):
            return None

        def fused(self, k, x, ctx):
            return torch.zeros(1, 16, 4, 4)

    with pytest.raises(ShapeMismatch):
        enc(torch.zeros(1, 3, 32, 32), Bad())


def test_freeze_keeps_encoder_and_moves_adapters():
    m = build_model(small_config(seed=0))
    before_enc = param_hash(m.encoder)
    before_ad = param_hash(m.adapters)
    opt = torch.optim.Adam(m.trainable_parameters(), lr=1e-2)
    x = torch.randn(1, 3, 32, 32)
    y = (torch.rand(1, 1, 32, 32) > 0.5).float()
    for _ in range(10):
        loss = combined_loss(m(x, [coarse_bbox(32, 32, 0.95)]), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert param_hash(m.encoder) == before_enc
    assert param_hash(m.adapters) != before_ad
    assert all(p.grad is None for p in m.encoder.parameters())


def test_freeze_idempotent():
    enc = ImageEncoder(EncoderConfig(32, 4, 16, 2, 2))
    h = param_hash(freeze(enc))
    assert param_hash(freeze(freeze(enc))) == h
    assert not any(p.requires_grad for p in enc.parameters())


def test_checkpoint_round_trip(tmp_path):
    cfg = EncoderConfig(32, 4, 16, 2, 2)
    torch.manual_seed(0)
    src = ImageEncoder(cfg)
    save_encoder(src, tmp_path / "enc.ckpt")
    torch.manual_seed(1)
    dst = ImageEncoder(cfg)
    report = load_pretrained(dst, tmp_path / "enc.ckpt")
    assert report["missing"] == []
    assert sorted(report["loaded"]) == sorted(src.state_dict())
    for k, v in src.state_dict().items():
        assert torch.equal(dst.state_dict()[k], v)


def test_checkpoint_geometry_mismatch(tmp_path):
    save_encoder(ImageEncoder(EncoderConfig(32, 4, 16, 2, 2)), tmp_path / "enc.ckpt")
    with pytest.raises(GeometryMismatch, match=r"\(1, 16, 8, 8\) vs encoder \(1, 24, 8, 8\)"):
        load_pretrained(ImageEncoder(EncoderConfig(32, 4, 24, 2, 2)), tmp_path / "enc.ckpt")


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pretrained(ImageEncoder(EncoderConfig(32, 4, 16, 2, 2)), tmp_path / "nope.ckpt")


def test_pretrained_weights_via_config(tmp_path):
    cfg = EncoderConfig(32, 4, 16, 2, 2)
    torch.manual_seed(5)
    src = ImageEncoder(cfg)
    save_encoder(src, tmp_path / "enc.ckpt")
    m = build_model(small_config(encoder=EncoderConfig(32, 4, 16, 2, 2, pretrained_weights=str(tmp_path / "enc.ckpt"))))
    assert param_hash(m.encoder) == param_hash(src)


def test_checkpoint_file_layout(tmp_path):
    import json
    import struct

    enc = ImageEncoder(EncoderConfig(32, 4, 16, 2, 2))
    save_encoder(enc, tmp_path / "enc.ckpt")
    raw = (tmp_path / "enc.ckpt").read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    manifest = json.loads(raw[8:8 + n])
    e = manifest["tensors"]["encoder.pos_embed"]
    payload = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=8 + n + e["offset"])
    np.testing.assert_array_equal(payload.reshape(e["shape"]), enc.pos_embed.detach().numpy())
    assert manifest["geometry"]["embed_dim"] == 16


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([4, 8]), st.integers(8, 12), st.sampled_from([8, 16, 24]), st.integers(1, 3), st.sampled_from([1, 2, 4]))
def test_layer_shapes_property(patch, grid, dim, blocks, heads):
    cfg = EncoderConfig(patch * grid, patch, dim, blocks, heads)
    m = build_model(ModelConfig(encoder=cfg, decoder_heads=1))
    with torch.no_grad():
        feats = m.encode(torch.randn(1, 3, cfg.input_size, cfg.input_size))
    assert len(feats.layers) == blocks
    assert all(f.shape == (1, dim, grid, grid) for f in feats.layers)
