import math

import numpy as np
import numpy.testing as npt
import pytest

from tunet import autodiff as ad
from tunet.autodiff import Tensor
from tunet.errors import ConfigError, DimensionError
from tunet.model import (
    ModelConfig,
    decoder,
    embed,
    forward,
    init_params,
    map_to_tokens,
    mha,
    param_shapes,
    patchify,
    tokens_to_map,
    transformer,
    transformer_block,
    unet_encoder,
    unpatchify,
)

from conftest import TINY


# ---------------------------------------------------------------------------
# config


def test_default_config():
    cfg = ModelConfig()
    assert (cfg.seq_len, cfg.token_dim, cfg.num_stages) == (1024, 256, 5)
    assert cfg.encoder_widths == (16, 32, 64, 128, 256)
    assert cfg.decoder_widths == (256, 128, 64, 32, 16)
    assert (cfg.num_heads, cfg.num_layers) == (8, 6)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(height=32, width=64),  # non-square
        dict(height=36, width=36, patch_size=8),  # not divisible
        dict(height=48, width=48, patch_size=8),  # H/n not a power of two
        dict(num_heads=3),  # d=64 not divisible
        dict(encoder_widths=(4, 8, 16)),  # wrong stage count
    ],
)
def test_invalid_configs(kwargs):
    base = {**TINY, **kwargs}
    with pytest.raises(ConfigError):
        ModelConfig(**base)


def test_config_dict_roundtrip(tiny_config):
    assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


# ---------------------------------------------------------------------------
# patchify / embed


def test_patchify_hand_enumeration():
    image = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    tokens = patchify(Tensor(image), 2).data
    npt.assert_array_equal(tokens, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])


def test_patchify_single_patch_is_flat_image(rng):
    image = rng.normal(size=(2, 4, 4))
    npt.assert_array_equal(patchify(Tensor(image), 4).data, image.reshape(1, -1))


def test_patchify_channel_major_within_token():
    image = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    npt.assert_array_equal(patchify(Tensor(image), 2).data, [[0, 0, 0, 0, 1, 1, 1, 1]])


def test_patchify_full_size_shape():
    assert patchify(Tensor(np.zeros((1, 512, 512))), 16).shape == (1024, 256)


def test_patchify_indivisible():
    with pytest.raises(ConfigError):
        patchify(Tensor(np.zeros((1, 6, 6))), 4)


def test_patchify_unpatchify_roundtrip_bitwise(rng):
    image = rng.normal(size=(3, 16, 16))
    back = unpatchify(patchify(Tensor(image), 4), 3, 16, 16, 4).data
    assert back.tobytes() == image.tobytes()


def _identity_embedding(params):
    params["embed.w"].data[...] = 1.0
    params["embed.b"].data[...] = 0.0


def test_embed_identity_without_positions_is_patchify(tiny_config, rng):
    p = init_params(tiny_config, 0)
    _identity_embedding(p)
    p["pos_embed"].data[...] = 0.0
    image = rng.normal(size=(1, 32, 32))
    npt.assert_array_equal(embed(Tensor(image), p, tiny_config).data, patchify(Tensor(image), 8).data)


def test_embed_constant_positions_on_zero_image(tiny_config):
    p = init_params(tiny_config, 0)
    _identity_embedding(p)
    p["pos_embed"].data[...] = 0.5
    out = embed(Tensor(np.zeros((1, 32, 32))), p, tiny_config).data
    npt.assert_array_equal(out, np.full((16, 64), 0.5))


def test_embed_shape_mismatch(tiny_config):
    with pytest.raises(ConfigError):
        embed(Tensor(np.zeros((1, 16, 16))), init_params(tiny_config, 0), tiny_config)


# ---------------------------------------------------------------------------
# attention / block


def _layer(d, r=2, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    p = {}
    for k in "qkvo":
        p[f"attn.w{k}"] = rng.normal(size=(d, d)) * scale
        p[f"attn.b{k}"] = rng.normal(size=d) * scale
    p["mlp.w1"] = rng.normal(size=(d, r * d)) * scale
    p["mlp.b1"] = rng.normal(size=r * d) * scale
    p["mlp.w2"] = rng.normal(size=(r * d, d)) * scale
    p["mlp.b2"] = rng.normal(size=d) * scale
    for ln in ("ln1", "ln2"):
        p[f"{ln}.gamma"] = 1 + rng.normal(size=d) * 0.1
        p[f"{ln}.beta"] = rng.normal(size=d) * 0.1
    return p


def _tensors(p):
    return {k: Tensor(v) for k, v in p.items()}


def test_mha_single_token(rng):
    p = _layer(4)
    x = rng.normal(size=(1, 4))
    out, attn = mha(Tensor(x), _tensors(p), 2, return_attention=True)
    npt.assert_array_equal(attn.data, np.ones((2, 1, 1)))
    v = x @ p["attn.wv"] + p["attn.bv"]
    npt.assert_allclose(out.data, v @ p["attn.wo"] + p["attn.bo"], rtol=1e-13)


def test_mha_identical_tokens_give_identical_outputs(rng):
    x = np.tile(rng.normal(size=(1, 8)), (5, 1))
    out = mha(Tensor(x), _tensors(_layer(8)), 2).data
    npt.assert_allclose(out, np.tile(out[:1], (5, 1)), rtol=1e-13)


def test_mha_two_tokens_hand_computed():
    p = {f"attn.b{k}": np.zeros(2) for k in "qkvo"}
    p["attn.wq"] = np.array([[1.0, 0.0], [0.0, 0.0]])
    p["attn.wk"] = np.array([[1.0, 0.0], [0.0, 0.0]])
    p["attn.wv"] = np.eye(2)
    p["attn.wo"] = np.eye(2)
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    # q = k = (x0, 0); scores[i, j] = x_i0 * x_j0 / sqrt(2)
    s = 1 / math.sqrt(2)
    w00 = 1 / (1 + math.exp(3 * s - 1 * s))  # token 0: scores (1s, 3s)
    w10 = 1 / (1 + math.exp(9 * s - 3 * s))  # token 1: scores (3s, 9s)
    expected = [
        [w00 * 1 + (1 - w00) * 3, w00 * 2 + (1 - w00) * 4],
        [w10 * 1 + (1 - w10) * 3, w10 * 2 + (1 - w10) * 4],
    ]
    npt.assert_allclose(mha(Tensor(x), _tensors(p), 1).data, expected, rtol=1e-13)


def test_mha_indivisible_heads():
    with pytest.raises(ConfigError):
        mha(Tensor(np.zeros((2, 6))), _tensors(_layer(6)), 4)


def test_block_with_zero_output_projections_is_identity(rng):
    p = _layer(8)
    p["attn.wo"][...] = 0
    p["attn.bo"][...] = 0
    p["mlp.w2"][...] = 0
    p["mlp.b2"][...] = 0
    z = rng.normal(size=(5, 8))
    out = transformer_block(Tensor(z), _tensors(p), 2).data
    assert out.shape == z.shape
    npt.assert_array_equal(out, z)


def _block_straight_line(z, p, h, alpha=1.0, eps=1e-5):
    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    s, d = z.shape
    dh = d // h
    y = ln(z, p["ln1.gamma"], p["ln1.beta"])
    q, k, v = (y @ p[f"attn.w{c}"] + p[f"attn.b{c}"] for c in "qkv")
    heads = []
    for i in range(h):
        cols = slice(i * dh, (i + 1) * dh)
        sc = q[:, cols] @ k[:, cols].T / math.sqrt(dh)
        e = np.exp(sc - sc.max(1, keepdims=True))
        heads.append((e / e.sum(1, keepdims=True)) @ v[:, cols])
    z1 = np.concatenate(heads, axis=1) @ p["attn.wo"] + p["attn.bo"] + z
    y = ln(z1, p["ln2.gamma"], p["ln2.beta"])
    a = y @ p["mlp.w1"] + p["mlp.b1"]
    a = np.where(a > 0, a, alpha * (np.exp(a) - 1))
    return a @ p["mlp.w2"] + p["mlp.b2"] + z1


@pytest.mark.parametrize("alpha", [1.0, 0.5])
def test_block_matches_straight_line_oracle(rng, alpha):
    p = _layer(8, seed=3)
    z = rng.normal(size=(6, 8))
    got = transformer_block(Tensor(z), _tensors(p), 2, alpha).data
    npt.assert_allclose(got, _block_straight_line(z, p, 2, alpha), rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# token map / encoder / decoder


def test_tokens_to_map_full_size_shape():
    assert tokens_to_map(Tensor(np.zeros((1024, 256))), 1, 16).shape == (1024, 16, 16)


def test_tokens_to_map_single_token():
    z = np.arange(16, dtype=np.float64).reshape(1, 16)
    npt.assert_array_equal(tokens_to_map(Tensor(z), 1, 4).data, z.reshape(1, 4, 4))


def test_tokens_to_map_channel_placement(rng):
    z = rng.normal(size=(3, 2 * 4))  # S=3, E_c=2, n=2
    out = tokens_to_map(Tensor(z), 2, 2).data
    for s in range(3):
        for c in range(2):
            npt.assert_array_equal(out[s * 2 + c], z[s, c * 4 : (c + 1) * 4].reshape(2, 2))
    assert map_to_tokens(Tensor(out), 2, 2).data.tobytes() == z.tobytes()


def test_tokens_to_map_wrong_dim():
    with pytest.raises(ConfigError):
        tokens_to_map(Tensor(np.zeros((4, 10))), 1, 3)


def test_encoder_skip_shapes():
    cfg = ModelConfig(height=64, width=64, patch_size=16, num_heads=2, num_layers=1, encoder_widths=(8, 16))
    skips = unet_encoder(Tensor(np.zeros((1, 64, 64))), init_params(cfg, 0), cfg)
    assert [s.shape for s in skips] == [(8, 64, 64), (16, 32, 32)]
    assert len(skips) == int(math.log2(64 / 16))


def test_encoder_zero_weights_give_zero_skips(tiny_config, rng):
    p = init_params(tiny_config, 0)
    for name, t in p.items():
        if name.startswith("encoder."):
            t.data[...] = 0
    for s in unet_encoder(Tensor(rng.normal(size=(1, 32, 32))), p, tiny_config):
        assert not s.data.any()


def test_decoder_shape_walk_and_zero_head():
    cfg = ModelConfig(height=64, width=64, patch_size=16, num_heads=2, num_layers=1, encoder_widths=(8, 16))
    p = init_params(cfg, 0)
    image = Tensor(np.random.default_rng(0).normal(size=(1, 64, 64)))
    tmap = tokens_to_map(transformer(embed(image, p, cfg), p, cfg), 1, 16)
    assert tmap.shape == (16, 16, 16)
    skips = unet_encoder(image, p, cfg)
    assert ad.bilinear_upsample2x(tmap).shape[1:] == (32, 32)
    assert decoder(tmap, skips, p, cfg).shape == (1, 64, 64)
    p["head.w"].data[...] = 0
    p["head.b"].data[...] = 0
    npt.assert_array_equal(forward(image, p, cfg).data, np.full((1, 64, 64), 0.5))


def test_decoder_resolution_mismatch_names_stage(tiny_config):
    p = init_params(tiny_config, 0)
    skips = [Tensor(np.zeros((4, 32, 32))), Tensor(np.zeros((8, 8, 8)))]
    with pytest.raises(DimensionError, match="stage 0"):
        decoder(Tensor(np.zeros((16, 8, 8))), skips, p, tiny_config)


def test_full_size_param_shapes():
    shapes = param_shapes(ModelConfig())
    assert shapes["pos_embed"] == (1024, 256)
    assert shapes["decoder.0.conv1.w"][1] == 1024 + 256
    assert shapes["head.w"] == (1, 16, 1, 1)
    assert sum(1 for k in shapes if k.startswith("encoder.") and k.endswith(".w")) == 5


# ---------------------------------------------------------------------------
# forward / init


def test_forward_range_shape_and_determinism(tiny_config, rng):
    p = init_params(tiny_config, 0)
    image = rng.normal(size=(1, 32, 32))
    a = forward(image, p, tiny_config).data
    b = forward(image, p, tiny_config).data
    assert a.shape == (1, 32, 32)
    assert np.all((a > 0) & (a < 1))
    assert a.tobytes() == b.tobytes()


def test_init_same_seed_is_bit_identical(tiny_config):
    a, b = init_params(tiny_config, 7), init_params(tiny_config, 7)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    c = init_params(tiny_config, 8)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_init_rules(tiny_config):
    p = init_params(tiny_config, 0)
    for name, t in p.items():
        if name.endswith("gamma"):
            assert np.all(t.data == 1)
        elif name.endswith("beta") or t.ndim == 1:
            assert not t.data.any(), name
    w = p["blocks.0.attn.wq"].data
    assert np.abs(w).max() <= math.sqrt(1 / 64)
    cw = p["decoder.0.conv1.w"].data
    assert np.abs(cw).max() <= math.sqrt(1 / (24 * 9))


def test_param_count_closed_form(tiny_config):
    d, hidden, s = 64, 256, 16
    embed_ = 1 + 1 + s * d
    block = 2 * 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    encoder = (4 * 1 * 9 + 4) + (8 * 4 * 9 + 8)
    dec0 = (8 * (16 + 8) * 9 + 8) + (8 * 8 * 9 + 8)
    dec1 = (4 * (8 + 4) * 9 + 4) + (4 * 4 * 9 + 4)
    head = 4 + 1
    expected = embed_ + block + encoder + dec0 + dec1 + head
    assert expected == 54255
    assert init_params(tiny_config, 0).num_parameters() == expected


def _swap_patches(image, n, a, b):
    out = image.copy()
    (ar, ac), (br, bc) = a, b
    pa = image[:, ar * n : (ar + 1) * n, ac * n : (ac + 1) * n].copy()
    pb = image[:, br * n : (br + 1) * n, bc * n : (bc + 1) * n].copy()
    out[:, ar * n : (ar + 1) * n, ac * n : (ac + 1) * n] = pb
    out[:, br * n : (br + 1) * n, bc * n : (bc + 1) * n] = pa
    return out


def _tokens_out(image, p, cfg):
    return transformer(embed(Tensor(image), p, cfg), p, cfg).data


def test_attention_permutation_equivariance(tiny_config, rng):
    p = init_params(tiny_config, 0)
    p["pos_embed"].data[...] = 0
    image = rng.normal(size=(1, 32, 32))
    swapped = _swap_patches(image, 8, (0, 1), (2, 3))  # tokens 1 and 11
    z, zs = _tokens_out(image, p, tiny_config), _tokens_out(swapped, p, tiny_config)
    perm = np.arange(16)
    perm[[1, 11]] = perm[[11, 1]]
    npt.assert_allclose(zs, z[perm], rtol=1e-12, atol=1e-12)


def test_positional_embedding_breaks_equivariance(tiny_config, rng):
    p = init_params(tiny_config, 0)
    assert np.abs(p["pos_embed"].data).max() > 0
    image = rng.normal(size=(1, 32, 32))
    swapped = _swap_patches(image, 8, (0, 1), (2, 3))
    z, zs = _tokens_out(image, p, tiny_config), _tokens_out(swapped, p, tiny_config)
    perm = np.arange(16)
    perm[[1, 11]] = perm[[11, 1]]
    assert np.abs(zs - z[perm]).max() > 1e-6
