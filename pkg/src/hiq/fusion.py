"""Convolutional cross-attention fusion blocks (CvT style).

A low-resolution, semantically deeper map supplies the queries; a
higher-resolution map supplies keys and values. The low map is first
bilinearly resized to the key/value grid, and the fused map is returned at
that grid.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .config import ConfigError
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter, channel_layer_norm


def split_heads(t: Tensor, n_heads: int) -> Tensor:
    b, n, d = t.shape
    return ops.transpose(ops.reshape(t, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1, 3)), (b, n, h * dh))


def attention_weights(q: Tensor, k: Tensor, n_heads: int) -> Tensor:
    """Softmax over keys of scaled dot products; (B, n_heads, T_q, T_kv)."""
    d = q.shape[-1]
    if d % n_heads:
        raise ConfigError(f"width {d} not divisible by {n_heads} heads")
    qh, kh = split_heads(q, n_heads), split_heads(k, n_heads)
    scores = ops.matmul(qh, ops.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(d // n_heads))
    return ops.softmax(scores, axis=-1)


def attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention of (B, T_q, d) over (B, T_kv, d)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ConfigError(f"attention widths differ: {q.shape}, {k.shape}, {v.shape}")
    weights = attention_weights(q, k, n_heads)
    return merge_heads(ops.matmul(weights, split_heads(v, n_heads)))


class AttentionParams(Module):
    """Linear Q/K/V/output projections for token cross attention."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator | None = None) -> None:
        if d % n_heads:
            raise ConfigError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        rng = rng or np.random.default_rng(0)
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng, bias=False)

    @classmethod
    def identity(cls, d: int, n_heads: int = 1) -> "AttentionParams":
        p = cls(d, n_heads)
        for lin in (p.wq, p.wk, p.wv, p.wo):
            lin.weight.data[...] = np.eye(d)
        return p


def cross_attention(q_tokens: Tensor, kv_tokens: Tensor, params: AttentionParams) -> Tensor:
    """Project, attend per head, mix heads, add the query residual."""
    if q_tokens.shape[-1] != kv_tokens.shape[-1]:
        raise ConfigError(f"query width {q_tokens.shape[-1]} != key/value width {kv_tokens.shape[-1]}")
    att = attend(params.wq(q_tokens), params.wk(kv_tokens), params.wv(kv_tokens), params.n_heads)
    return q_tokens + params.wo(att)


class ConvProjection(Module):
    """Depthwise 3x3 followed by pointwise 1x1 convolution."""

    def __init__(self, d: int, rng: np.random.Generator) -> None:
        self.depthwise = Conv2d(d, d, 3, rng, depthwise=True, bias=False)
        self.pointwise = Conv2d(d, d, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


def tokens_from_map(feature_map: Tensor, pos: Tensor | None = None, proj: ConvProjection | None = None) -> Tensor:
    """(B, d, H, W) -> (B, H*W, d) tokens, optionally conv-projected, plus positional embedding."""
    x = proj(feature_map) if proj is not None else feature_map
    b, d, h, w = x.shape
    tokens = ops.transpose(ops.reshape(x, (b, d, h * w)), (0, 2, 1))
    if pos is not None:
        if pos.shape != (h * w, d):
            raise ShapeError(f"positional embedding {pos.shape} does not match token grid {(h * w, d)}")
        tokens = tokens + pos
    return tokens


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    b, n, d = tokens.shape
    return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (b, d, h, w))


def interim_size(low_hw: tuple[int, int], high_hw: tuple[int, int]) -> tuple[int, int]:
    """Fusion grid: the key/value (higher-resolution) map's grid."""
    if min(high_hw) < 1:
        raise ShapeError(f"non-positive interim size {high_hw}")
    return tuple(high_hw)


class FTBlock(Module):
    """One fusion transformer block for a fixed key/value grid."""

    def __init__(self, d: int, n_heads: int, kv_hw: tuple[int, int], rng: np.random.Generator) -> None:
        if d % n_heads:
            raise ConfigError(f"d_q={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.kv_hw = tuple(kv_hw)
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.proj_q = ConvProjection(d, rng)
        self.proj_k = ConvProjection(d, rng)
        self.proj_v = ConvProjection(d, rng)
        self.pos = Parameter(np.zeros((kv_hw[0] * kv_hw[1], d)))
        self.mix = Conv2d(d, d, 1, rng)

    def __call__(self, low: Tensor, high: Tensor) -> Tensor:
        (h, w), (H, W) = low.shape[-2:], high.shape[-2:]
        if h > H or w > W:
            raise ShapeError(f"query map {(h, w)} is larger than key/value map {(H, W)}")
        if (H, W) != self.kv_hw:
            raise ShapeError(f"block built for key/value grid {self.kv_hw}, got {(H, W)}")
        size = interim_size((h, w), (H, W))
        low_r = ops.resize_bilinear(low, size)
        q = tokens_from_map(channel_layer_norm(low_r, self.norm_q), None, self.proj_q)
        kv = channel_layer_norm(high, self.norm_kv)
        k = tokens_from_map(kv, self.pos, self.proj_k)
        v = tokens_from_map(kv, self.pos, self.proj_v)
        att = tokens_to_map(attend(q, k, v, self.n_heads), *size)
        return low_r + self.mix(att)


def progressive_fuse(taps: list[Tensor], blocks: list[FTBlock]) -> Tensor:
    """Left fold from the deepest tap toward shallower ones.

    ``taps`` are ordered shallow to deep; the running fused map always plays
    the query role.
    """
    if len(taps) < 2:
        raise ConfigError(f"progressive fusion needs at least 2 taps, got {len(taps)}")
    if len(blocks) != len(taps) - 1:
        raise ConfigError(f"{len(taps)} taps need {len(taps) - 1} fusion blocks, got {len(blocks)}")
    fused = taps[-1]
    for block, tap in zip(blocks, reversed(taps[:-1])):
        fused = block(fused, tap)
    return fused


class LevelFusion(Module):
    """Per-level channel projections of the selected taps plus the fusion fold."""

    def __init__(
        self,
        tap_channels: list[int],
        tap_sizes: list[int],
        d: int,
        n_heads: int,
        rng: np.random.Generator,
    ) -> None:
        self.projections = [Conv2d(c, d, 1, rng) for c in tap_channels]
        # the k-th block fuses onto the (k+2)-th tap counted from the deep end
        self.blocks = [FTBlock(d, n_heads, (s, s), rng) for s in reversed(tap_sizes[:-1])]

    def __call__(self, taps: list[Tensor]) -> Tensor:
        projected = [proj(t) for proj, t in zip(self.projections, taps)]
        return progressive_fuse(projected, self.blocks)
