"""Toy ViT encoder: pre-norm blocks with full global self-attention.

The backbone is deliberately plain. Each block is
LN -> multi-head self-attention -> residual, LN -> MLP(gelu) -> residual,
followed by one final LayerNorm, with no class token and no windowing.
Token count M passes through unchanged; attention is the full M x M map.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .sharing import TokenSet
from .tensor import (Tensor, add, add_bias, gelu, layernorm, matmul,
                     reshape, scale, softmax, transpose)

LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 2
    patch_size: int = 4

    def __post_init__(self):
        if self.depth < 1 or self.heads < 1:
            raise ConfigError("depth and heads must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.heads} heads"
            )


def init_params(config: ViTConfig, seed: int) -> dict:
    """Deterministic init: scaled-normal weights (std 0.02), identity LN."""
    rng = np.random.default_rng(seed)
    e = config.embed_dim
    hidden = config.mlp_ratio * e

    def normal(*shape):
        return Tensor(0.02 * rng.standard_normal(shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params = {}
    for i in range(config.depth):
        b = f"block{i}"
        params[f"{b}.ln1.g"] = ones(e)
        params[f"{b}.ln1.b"] = zeros(e)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{b}.attn.{name}"] = normal(e, e)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{b}.attn.{name}"] = zeros(e)
        params[f"{b}.ln2.g"] = ones(e)
        params[f"{b}.ln2.b"] = zeros(e)
        params[f"{b}.mlp.w1"] = normal(e, hidden)
        params[f"{b}.mlp.b1"] = zeros(hidden)
        params[f"{b}.mlp.w2"] = normal(hidden, e)
        params[f"{b}.mlp.b2"] = zeros(e)
    params["lnf.g"] = ones(e)
    params["lnf.b"] = zeros(e)
    return params


def _attention(x: Tensor, params: dict, prefix: str, config: ViTConfig,
               collect_attn: list | None) -> Tensor:
    m = x.data.shape[0]
    e = config.embed_dim
    heads = config.heads
    dh = e // heads

    def project(name):
        out = add_bias(matmul(x, params[f"{prefix}.w{name}"]),
                       params[f"{prefix}.b{name}"])
        # [M, E] -> [heads, M, dh]
        return transpose(reshape(out, (m, heads, dh)), (1, 0, 2))

    q = project("q")
    k = project("k")
    v = project("v")
    kt = transpose(k, (0, 2, 1))
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    if collect_attn is not None:
        collect_attn.append(attn.data.copy())
    ctx = matmul(attn, v)
    merged = reshape(transpose(ctx, (1, 0, 2)), (m, e))
    return add_bias(matmul(merged, params[f"{prefix}.wo"]),
                    params[f"{prefix}.bo"])


def vit_forward(tokens: TokenSet, params: dict, config: ViTConfig,
                collect_attn: list | None = None) -> Tensor:
    """Map M input tokens to M output tokens (L' = f(T'))."""
    e = config.embed_dim
    if tokens.tokens.data.shape[1] != e:
        raise DimensionError(
            f"token dim {tokens.tokens.data.shape[1]} != embed_dim {e}"
        )
    x = add(tokens.tokens, tokens.pos_embeds)
    for i in range(config.depth):
        b = f"block{i}"
        h = layernorm(x, params[f"{b}.ln1.g"], params[f"{b}.ln1.b"], LN_EPS)
        x = add(x, _attention(h, params, f"{b}.attn", config, collect_attn))
        h = layernorm(x, params[f"{b}.ln2.g"], params[f"{b}.ln2.b"], LN_EPS)
        h = add_bias(matmul(h, params[f"{b}.mlp.w1"]), params[f"{b}.mlp.b1"])
        h = gelu(h)
        h = add_bias(matmul(h, params[f"{b}.mlp.w2"]), params[f"{b}.mlp.b2"])
        x = add(x, h)
    return layernorm(x, params["lnf.g"], params["lnf.b"], LN_EPS)
