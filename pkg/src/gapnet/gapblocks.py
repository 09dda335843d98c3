"""Attention core, granular pyramid convolution (GPC), cross-scale attention
(CSA) and the global feature extractor (GFE)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .backbone import InvertedResidual
from .nnops import (
    BatchNorm2d,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    adaptive_avg_pool2d,
    bilinear_upsample,
)
from .tensorcore import ShapeError, Tensor, flatten_tokens, split_sizes, tokens_to_map


@dataclass
class AttentionConfig:
    dim: int
    heads: int = 1
    inner_dim: int | None = None  # width of Q/K/V; defaults to dim

    def __post_init__(self):
        if self.inner_dim is None:
            self.inner_dim = self.dim
        if self.inner_dim % self.heads:
            raise ValueError(f"width {self.inner_dim} not divisible by {self.heads} heads")

    @property
    def d_k(self) -> int:
        return self.inner_dim // self.heads


@dataclass
class GPCConfig:
    channels: int = 48
    m: int = 7
    split_ratios: tuple[float, ...] = (1 / 8, 1 / 8, 1 / 4, 1 / 2)
    atrous_rates: tuple[int, ...] = (8, 4, 2, 1)
    heads: int = 1
    attention: bool = True
    # residual skip from the pooled map around the attention branch; off by
    # default so the block is exactly the identity with zeroed weights.
    pooled_residual: bool = False

    def __post_init__(self):
        if self.channels % 8:
            raise ValueError(f"GPC channels {self.channels} must be divisible by 8")
        if self.m < 1:
            raise ValueError("pooled extent m must be >= 1")
        if len(self.split_ratios) != len(self.atrous_rates):
            raise ValueError("one atrous rate per split is required")

    @property
    def split(self) -> list[int]:
        return split_sizes(self.channels, self.split_ratios)


@dataclass
class CSAConfig:
    dim: int = 64
    heads: int = 1
    ffn_expansion: int = 4


class Attention(Module):
    """Linear(softmax(Q K^T / sqrt(d_k)) V) with Q/K/V linear projections."""

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.q = Linear(cfg.dim, cfg.inner_dim, rng=rng)
        self.k = Linear(cfg.dim, cfg.inner_dim, rng=rng)
        self.v = Linear(cfg.dim, cfg.inner_dim, rng=rng)
        self.proj = Linear(cfg.inner_dim, cfg.dim, rng=rng)
        self.last_weights_shape: tuple[int, ...] | None = None

    def _heads(self, t: Tensor) -> Tensor:
        n, length, _ = t.shape
        h = self.cfg.heads
        return tc.permute(tc.reshape(t, (n, length, h, self.cfg.d_k)), (0, 2, 1, 3))

    def forward(self, x: Tensor, kv: Tensor | None = None) -> Tensor:
        """Queries from ``x``; keys and values from ``kv`` (``x`` if omitted)."""
        if x.shape[-1] != self.cfg.dim:
            raise ShapeError(f"attention width {self.cfg.dim} vs tokens {x.shape}")
        kv = x if kv is None else kv
        n, lq, _ = x.shape
        q = self._heads(self.q(x))
        k = self._heads(self.k(kv))
        v = self._heads(self.v(kv))
        scores = tc.scale(tc.matmul(q, tc.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.cfg.d_k))
        weights = tc.softmax(scores)
        self.last_weights_shape = weights.shape
        ctx = tc.matmul(weights, v)
        ctx = tc.reshape(tc.permute(ctx, (0, 2, 1, 3)), (n, lq, self.cfg.inner_dim))
        return self.proj(ctx)


def attention_core(x: Tensor, attn: Attention, kv: Tensor | None = None) -> Tensor:
    return attn(x, kv)


class GPC(Module):
    """Granular pyramid convolution with a pooled self-attention branch.

    out = Upsample(attention on the m x m pooled map) + Conv1x1(concat of
    per-split atrous 3x3 convs) + input.
    """

    def __init__(self, cfg: GPCConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        if cfg.attention:
            self.norm = LayerNorm(c)
            self.attn = Attention(AttentionConfig(c, cfg.heads), rng=rng)
        for i, (ci, rate) in enumerate(zip(cfg.split, cfg.atrous_rates)):
            setattr(self, f"branch{i}", Conv2d(ci, ci, 3, 1, rate, rate, bias=False, rng=rng))
            setattr(self, f"bn{i}", BatchNorm2d(ci))
        self.fuse = Conv2d(c, c, 1, rng=rng)

    def attention_branch(self, f_in: Tensor) -> Tensor:
        n, c, h, w = f_in.shape
        m = self.cfg.m
        pooled = adaptive_avg_pool2d(f_in, m)
        tokens = flatten_tokens(pooled)
        att = self.attn(self.norm(tokens))
        if self.cfg.pooled_residual:
            att = tc.add(att, tokens)
        return bilinear_upsample(tokens_to_map(att, m, m), (h, w))

    def conv_branch(self, f_in: Tensor) -> Tensor:
        parts = tc.split(f_in, self.cfg.split, axis=1)
        outs = []
        for i, part in enumerate(parts):
            outs.append(getattr(self, f"bn{i}")(getattr(self, f"branch{i}")(part)))
        return self.fuse(tc.concat(outs, axis=1))

    def forward(self, f_in: Tensor) -> Tensor:
        if f_in.shape[1] != self.cfg.channels:
            raise ShapeError(f"GPC expects {self.cfg.channels} channels, got {f_in.shape[1]}")
        out = tc.add(self.conv_branch(f_in), f_in)
        if self.cfg.attention:
            out = tc.add(out, self.attention_branch(f_in))
        return out


def gpc_forward(f_in: Tensor, block: GPC) -> Tensor:
    return block(f_in)


class CSA(Module):
    """Cross-scale attention: queries from both streams, keys/values from the second.

    Both token streams are first projected to ``cfg.dim``. The output holds
    L1 + L2 tokens: attention with residual, then a two-layer feed-forward
    with residual.
    """

    def __init__(self, cfg: CSAConfig, in_dims: tuple[int, int], rng=None):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.in1 = Linear(in_dims[0], d, rng=rng)
        self.in2 = Linear(in_dims[1], d, rng=rng)
        self.norm1 = LayerNorm(d)
        self.attn = Attention(AttentionConfig(d, cfg.heads), rng=rng)
        self.norm2 = LayerNorm(d)
        self.ffn1 = Linear(d, d * cfg.ffn_expansion, rng=rng)
        self.ffn2 = Linear(d * cfg.ffn_expansion, d, rng=rng)

    def forward(self, x1: Tensor | None, x2: Tensor) -> Tensor:
        return self.fuse_tokens(None if x1 is None else self.in1(x1), self.in2(x2))

    def fuse_tokens(self, x1: Tensor | None, x2: Tensor) -> Tensor:
        """Attention on already-projected streams ``x1`` [N, L1, dim], ``x2`` [N, L2, dim]."""
        if x2.shape[-1] != self.cfg.dim or (x1 is not None and x1.shape[-1] != self.cfg.dim):
            raise ShapeError("CSA streams must both be projected to the shared width")
        l1 = 0 if x1 is None else x1.shape[1]
        x = x2 if l1 == 0 else tc.concat([x1, x2], axis=1)
        xn = self.norm1(x)
        kv = xn if l1 == 0 else tc.split(xn, [l1, x2.shape[1]], axis=1)[1]
        y = tc.add(x, self.attn(xn, kv))
        h = tc.relu(self.ffn1(self.norm2(y)))
        return tc.add(y, self.ffn2(h))


def csa_forward(x1: Tensor | None, x2: Tensor, block: CSA) -> Tensor:
    return block.fuse_tokens(x1, x2)


def fold_tokens(tokens: Tensor, fine: tuple[int, int], coarse: tuple[int, int]) -> Tensor:
    """Map L1 + L2 CSA output tokens back onto the fine grid.

    The first L1 tokens fill the fine grid directly; the last L2 are laid on
    the coarse grid and bilinearly upsampled before the two are summed.
    """
    l1 = fine[0] * fine[1]
    l2 = coarse[0] * coarse[1]
    if tokens.shape[1] != l1 + l2:
        raise ShapeError(f"{tokens.shape[1]} tokens != {l1} + {l2}")
    t1, t2 = tc.split(tokens, [l1, l2], axis=1)
    up = bilinear_upsample(tokens_to_map(t2, *coarse), fine)
    return tc.add(tokens_to_map(t1, *fine), up)


@dataclass
class GFEConfig:
    channels: int = 320
    inner_dim: int = 32
    hidden: int = 32
    heads: int = 1


class GFE(Module):
    """Transformer block over the stride-32 map with an inverted residual FFN."""

    def __init__(self, cfg: GFEConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.norm1 = LayerNorm(c)
        self.attn = Attention(AttentionConfig(c, cfg.heads, cfg.inner_dim), rng=rng)
        self.norm2 = LayerNorm(c)
        irb = InvertedResidual(c, c, 1, cfg.hidden / c, rng=rng)
        irb.use_residual = False  # the block's own skip supplies the residual
        self.irb = irb

    def forward(self, e4: Tensor) -> Tensor:
        n, c, h, w = e4.shape
        if c != self.cfg.channels:
            raise ShapeError(f"GFE expects {self.cfg.channels} channels, got {c}")
        x = flatten_tokens(e4)
        att = tc.add(x, self.attn(self.norm1(x)))
        ffn_in = tokens_to_map(self.norm2(att), h, w)
        ffn = flatten_tokens(self.irb(ffn_in))
        return tokens_to_map(tc.add(att, ffn), h, w)


def gfe_forward(e4: Tensor, block: GFE) -> Tensor:
    return block(e4)


def zero_parameters(module: Module) -> None:
    for p in module.parameters():
        p.data[...] = 0
