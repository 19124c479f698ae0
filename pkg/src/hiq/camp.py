"""Cross attention on multi-level queries with a prior (CAMP).

Every coarse query and every fused fine query is scored against the pooled
penultimate backbone feature by a dot product in a shared width d_p. Scores
are trained with binary cross entropy against a two-hot target (the true
coarse class and the true fine slot).
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .autodiff import NEG_SENTINEL, Tensor, ops
from .config import ConfigError
from .hierarchy import HierarchyError, LabelHierarchy
from .nn import Linear, Module


class CampHead(Module):
    def __init__(self, query_dim: int, prior_dim: int, d_p: int, rng: np.random.Generator, scale: float = 1.0) -> None:
        self.query_dim = query_dim
        self.prior_dim = prior_dim
        self.query_proj = Linear(query_dim, d_p, rng)
        self.prior_proj = Linear(prior_dim, d_p, rng)
        self.scale = scale


def camp_scores(query_emb: Tensor, prior_emb: Tensor, scale: float) -> Tensor:
    """score_i = <query_i, prior> * scale for (B, Q, d_p) queries and a (B, d_p) prior."""
    if query_emb.shape[-1] != prior_emb.shape[-1]:
        raise ConfigError(f"query width {query_emb.shape[-1]} != prior width {prior_emb.shape[-1]}")
    b, d = prior_emb.shape
    return ops.reshape(ops.matmul(query_emb, ops.reshape(prior_emb, (b, d, 1))), query_emb.shape[:-1]) * scale


def _flatten_queries(queries: Tensor, batch: int) -> Tensor:
    if queries.ndim == 4:  # shared across the batch
        n = queries.shape[0]
        flat = ops.reshape(queries, (1, n, -1))
        return ops.broadcast_to(flat, (batch, n, flat.shape[-1]))
    b, n = queries.shape[:2]
    return ops.reshape(queries, (b, n, -1))


def camp_forward(q1: Tensor, q2: Tensor | None, prior: Tensor, p: CampHead) -> Tensor:
    """Scores of shape (B, N_1 + k_2) for shared level-1 and per-sample level-2 queries.

    With ``q2=None`` only the N_1 coarse scores are produced.
    """
    if prior.shape[-1] != p.prior_dim:
        raise ConfigError(f"prior width {prior.shape[-1]} != {p.prior_dim}")
    b = prior.shape[0]
    parts = [_flatten_queries(q1, b)]
    if q2 is not None:
        parts.append(_flatten_queries(q2, b))
    joint = ops.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    if joint.shape[-1] != p.query_dim:
        raise ConfigError(f"flattened query width {joint.shape[-1]} != {p.query_dim}")
    return camp_scores(p.query_proj(joint), p.prior_proj(prior), p.scale)


def camp_targets(h: LabelHierarchy, coarse_gt: int, fine_gt: int) -> np.ndarray:
    """Two-hot target of length N_1 + k_2."""
    if h.parent_of(fine_gt) != coarse_gt:
        raise HierarchyError(f"fine class {fine_gt} is not a child of coarse class {coarse_gt}")
    t = np.zeros(h.n_coarse + h.k[1])
    t[coarse_gt] = 1.0
    t[h.n_coarse + h.local_slot(fine_gt)] = 1.0
    return t


def camp_targets_batch(h: LabelHierarchy, coarse_gt, fine_gt) -> np.ndarray:
    return np.stack([camp_targets(h, int(c), int(f)) for c, f in zip(coarse_gt, fine_gt)])


def refine_logits(logits: np.ndarray, scores: np.ndarray, lam: float) -> np.ndarray:
    """logits + lam * log(sigmoid(scores)); sentinel entries are preserved."""
    if lam == 0:
        return logits
    log_sig = ops.log_sigmoid(Tensor(scores)).data
    out = logits + lam * log_sig
    return np.where(logits <= NEG_SENTINEL, NEG_SENTINEL, out)


def camp_refine(out, scores: np.ndarray, lam: float):
    """Blend CAMP scores into a HierarchicalOutput's coarse and local fine logits.

    ``lam == 0`` returns the input unchanged.
    """
    if lam == 0:
        return out
    scores = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    n1 = out.coarse_logits.shape[-1]
    if scores.shape[-1] != n1 + out.fine_logits_local.shape[-1]:
        raise ConfigError(f"expected {n1 + out.fine_logits_local.shape[-1]} CAMP scores, got {scores.shape[-1]}")
    coarse = refine_logits(out.coarse_logits.data, scores[..., :n1], lam)
    fine = refine_logits(out.fine_logits_local.data, scores[..., n1:], lam)
    return replace(
        out,
        coarse_logits=Tensor(coarse),
        fine_logits_local=Tensor(fine),
        fine_logits_global=out.scatter_fine(fine),
    )
