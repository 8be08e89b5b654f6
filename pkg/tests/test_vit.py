"""Global-attention encoder: shapes, attention structure, equivariance."""

import numpy as np
import pytest

from gradcheck import FD_TOL, fd_max_rel_error
from ctsseg.errors import ConfigError, DimensionError
from ctsseg.policy import select_top_s
from ctsseg.scenes import SceneSpec, generate_scene
from ctsseg.sharing import TokenSet, partition, share
from ctsseg.tensor import Tensor, mul, tsum
from ctsseg.vit import ViTConfig, init_params, vit_forward


def rng_for(seed):
    return np.random.default_rng([29, seed])


def plain_token_set(m, e, seed=0, pos_zero=False):
    rng = rng_for(seed)
    tokens = Tensor(rng.normal(size=(m, e)))
    pos = Tensor(np.zeros((m, e)) if pos_zero else rng.normal(size=(m, e)) * 0.1)
    return TokenSet(tokens, pos, np.arange(m), np.zeros(m, dtype=bool))


def test_config_validation():
    with pytest.raises(ConfigError):
        ViTConfig(embed_dim=30, heads=4)
    with pytest.raises(ConfigError):
        ViTConfig(depth=0)


def test_init_params_layout_and_determinism():
    cfg = ViTConfig(depth=2, heads=2, embed_dim=8, mlp_ratio=2)
    a = init_params(cfg, seed=3)
    b = init_params(cfg, seed=3)
    c = init_params(cfg, seed=4)
    assert set(a) == set(b)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)
    assert any(
        not np.array_equal(a[n].data, c[n].data) for n in a
    )
    assert a["block0.attn.wq"].data.shape == (8, 8)
    assert a["block0.mlp.w1"].data.shape == (8, 16)
    assert np.array_equal(a["lnf.g"].data, np.ones(8))
    assert np.array_equal(a["block1.ln1.b"].data, np.zeros(8))


def test_forward_preserves_token_count_across_sharing():
    cfg = ViTConfig()
    params = init_params(cfg, seed=0)
    img = generate_scene(SceneSpec(seed=60))[0]
    grid = partition(img, 4)
    rng = rng_for(1)
    pos = Tensor(rng.normal(size=(256, 64)) * 0.1)
    proj = Tensor(rng.normal(size=(48, 64)) * 0.1)
    for s in (0, 26, 64):
        ts = share(grid, pos, select_top_s(rng.uniform(size=(8, 8)), s), proj)
        out = vit_forward(ts, params, cfg)
        assert out.data.shape == (256 - 3 * s, 64)
        assert np.all(np.isfinite(out.data))


def test_forward_rejects_wrong_embed_dim():
    cfg = ViTConfig(embed_dim=64)
    params = init_params(cfg, seed=0)
    with pytest.raises(DimensionError):
        vit_forward(plain_token_set(6, 32), params, cfg)


def test_attention_rows_are_distributions():
    cfg = ViTConfig(depth=2, heads=2, embed_dim=8)
    params = init_params(cfg, seed=1)
    collected = []
    vit_forward(plain_token_set(10, 8, seed=2), params, cfg, collect_attn=collected)
    assert len(collected) == 2  # one map per block
    for attn in collected:
        assert attn.shape == (2, 10, 10)
        assert np.all(attn > 0)
        assert np.allclose(attn.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_permutation_equivariance_with_zero_pos():
    # Global attention has no builtin order; with zero positional embeddings
    # permuting input tokens must permute outputs identically.
    cfg = ViTConfig(depth=2, heads=2, embed_dim=8)
    params = init_params(cfg, seed=5)
    for seed in range(5):
        rng = rng_for(100 + seed)
        ts = plain_token_set(9, 8, seed=200 + seed, pos_zero=True)
        perm = rng.permutation(9)
        permuted = TokenSet(
            Tensor(ts.tokens.data[perm]),
            Tensor(ts.pos_embeds.data[perm]),
            np.arange(9),
            np.zeros(9, dtype=bool),
        )
        base = vit_forward(ts, params, cfg).data
        swapped = vit_forward(permuted, params, cfg).data
        assert np.allclose(swapped, base[perm], rtol=0, atol=1e-10)


def test_pos_embeds_are_added_to_tokens():
    cfg = ViTConfig(depth=1, heads=1, embed_dim=4)
    params = init_params(cfg, seed=6)
    rng = rng_for(7)
    tok = rng.normal(size=(5, 4))
    pos = rng.normal(size=(5, 4))
    a = TokenSet(Tensor(tok), Tensor(pos), np.arange(5), np.zeros(5, dtype=bool))
    b = TokenSet(Tensor(tok + pos), Tensor(np.zeros((5, 4))), np.arange(5),
                 np.zeros(5, dtype=bool))
    assert np.array_equal(
        vit_forward(a, params, cfg).data, vit_forward(b, params, cfg).data
    )


def test_full_block_gradients_against_fd():
    cfg = ViTConfig(depth=1, heads=2, embed_dim=8, mlp_ratio=2)
    params = init_params(cfg, seed=8)
    ts = plain_token_set(5, 8, seed=9)
    weight = rng_for(10).normal(size=(5, 8))

    def forward():
        return tsum(mul(vit_forward(ts, params, cfg), Tensor(weight)))

    tensors = list(params.values())
    err = fd_max_rel_error(forward, tensors)
    assert err < FD_TOL
