"""Query-conditioned decoder: query maps attend over a fused feature map, get refined
by two conv+ReLU blocks, and are reduced to one logit per query by 1x1 conv + GAP."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops
from .config import ConfigError
from .fusion import AttentionParams, attend, tokens_from_map
from .nn import Conv2d, LayerNorm, Linear, Module


class LevelDecoder(Module):
    def __init__(self, n_slots: int, query_channels: int, d: int, n_heads: int, rng: np.random.Generator) -> None:
        if n_slots < 1:
            raise ConfigError("a level decoder needs at least one query slot")
        self.n_slots = n_slots
        self.query_channels = query_channels
        self.query_proj = Linear(query_channels, d, rng, bias=False)
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = AttentionParams(d, n_heads, rng)
        self.refine1 = Conv2d(d, d, 3, rng)
        self.refine2 = Conv2d(d, d, 3, rng)
        self.logit = Conv2d(d, 1, 1, rng)

    def query_tokens(self, queries: Tensor) -> Tensor:
        """(..., Q, c_q, h, w) query maps -> (..., Q, h*w, d) projected tokens."""
        *lead, q, c, h, w = queries.shape
        if c != self.query_channels:
            raise ConfigError(f"query maps have {c} channels, decoder expects {self.query_channels}")
        flat = ops.reshape(queries, (*lead, q, c, h * w))
        perm = tuple(range(len(lead))) + (len(lead), len(lead) + 2, len(lead) + 1)
        return self.query_proj(ops.transpose(flat, perm))

    def query_vectors(self, queries: Tensor) -> Tensor:
        """Spatial mean of the projected query tokens: one d-vector per query."""
        return ops.mean(self.query_tokens(queries), axis=-2)


def decode_level(queries: Tensor, fused: Tensor, dec: LevelDecoder) -> Tensor:
    """Decoded maps (B, Q, d, h_q, w_q).

    ``queries`` is either shared (Q, c_q, h, w) or per sample (B, Q, c_q, h, w).
    Each query token attends independently over the fused-map tokens.
    """
    if queries.ndim not in (4, 5):
        raise ConfigError(f"queries must be 4-D or 5-D, got {queries.shape}")
    if queries.shape[-4] < 1:
        raise ConfigError("zero queries")
    b, d, fh, fw = fused.shape
    *_, n_q, _, qh, qw = queries.shape
    tokens = dec.query_tokens(queries)  # (.., Q, hw, d)
    if tokens.shape[-1] != d:
        raise ConfigError(f"query width {tokens.shape[-1]} != fused width {d}")
    lead = tokens.shape[0] if queries.ndim == 5 else 1
    q_tok = ops.reshape(tokens, (lead, n_q * qh * qw, d))
    kv = dec.norm_kv(tokens_from_map(fused))
    qn = dec.norm_q(q_tok)
    att = attend(dec.attn.wq(qn), dec.attn.wk(kv), dec.attn.wv(kv), dec.attn.n_heads)
    out = q_tok + dec.attn.wo(att)  # (B, Q*hw, d)
    maps = ops.transpose(ops.reshape(out, (b * n_q, qh * qw, d)), (0, 2, 1))
    maps = ops.reshape(maps, (b * n_q, d, qh, qw))
    maps = ops.relu(dec.refine2(ops.relu(dec.refine1(maps))))
    return ops.reshape(maps, (b, n_q, d, qh, qw))


def logits_from_decoded(decoded: Tensor, dec: LevelDecoder) -> Tensor:
    """Per-query 1x1 conv to one channel, then GAP: (B, Q, d, h, w) -> (B, Q)."""
    b, q, d, h, w = decoded.shape
    one = dec.logit(ops.reshape(decoded, (b * q, d, h, w)))
    return ops.reshape(ops.global_avg_pool(one), (b, q))
