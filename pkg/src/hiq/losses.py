"""Per-level cross entropy, Cluster Focal Loss (CFL), CAMP binary cross entropy and their sum.

CFL as implemented here is a reconstruction: the cosine similarity S_i
between a pooled feature f and each query Q(i) of a level is scaled by a
temperature tau and softmax-normalised, and the focal form
``-alpha * (1 - p_y)**gamma * log(p_y)`` is applied to the target's
probability p_y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NEG_SENTINEL, Tensor, ops
from .config import ConfigError, LossConfig

COS_EPS = 1e-12


class LabelError(ValueError):
    pass


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels out of range [0, {n_classes}): {labels}")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood; sentinel-masked logits get zero probability."""
    labels = _check_labels(labels, logits.shape[-1])
    logp = ops.log_softmax(logits, axis=-1)
    return -ops.mean(logp[np.arange(len(labels)), labels])


def cosine_similarities(f: Tensor, queries: Tensor) -> Tensor:
    """S[b, i] = <f_b, Q_i> / (|f_b| |Q_i|).

    ``f`` is (B, d); ``queries`` is shared (K, d) or per sample (B, K, d).
    """
    if f.shape[-1] != queries.shape[-1]:
        raise ConfigError(f"feature width {f.shape[-1]} != query width {queries.shape[-1]}")
    b, d = f.shape
    q = queries if queries.ndim == 3 else ops.reshape(queries, (1,) + queries.shape)
    dots = ops.reshape(ops.matmul(q, ops.reshape(f, (b, d, 1))), (b, q.shape[1]))
    # eps inside the root keeps the gradient finite for all-zero (masked) queries
    f_norm = ops.sqrt(ops.sum(f * f, axis=-1, keepdims=True) + COS_EPS**2)
    q_norm = ops.sqrt(ops.sum(q * q, axis=-1) + COS_EPS**2)
    return dots / (f_norm * q_norm)


def focal_term(logp: Tensor, alpha: float, gamma: float) -> Tensor:
    """-alpha * (1 - p)**gamma * log p, elementwise on log-probabilities."""
    if gamma == 0:
        return -alpha * logp
    return -alpha * ops.power(1.0 - ops.exp(logp), gamma) * logp


def cluster_focal_loss(
    f: Tensor,
    queries: Tensor,
    labels,
    cfg: LossConfig,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Batch mean of the focal loss over softmax(tau * cosine similarity).

    ``valid`` (B, K) excludes masked query slots from the softmax.
    """
    sims = cosine_similarities(f, queries)
    labels = _check_labels(labels, sims.shape[-1])
    scaled = sims * cfg.tau
    if valid is not None:
        scaled = ops.masked_fill(scaled, ~np.asarray(valid, dtype=bool), NEG_SENTINEL)
    logp = ops.log_softmax(scaled, axis=-1)[np.arange(len(labels)), labels]
    return ops.mean(focal_term(logp, cfg.alpha, cfg.gamma))


def binary_cross_entropy_with_logits(scores: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over all entries of -(t log sigmoid(s) + (1 - t) log sigmoid(-s))."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != scores.shape:
        raise ConfigError(f"target shape {t.shape} != score shape {scores.shape}")
    return -ops.mean(ops.log_sigmoid(scores) * t + ops.log_sigmoid(-scores) * (1.0 - t))


@dataclass
class LossTerms:
    """Inputs of the total objective for one batch."""

    coarse_logits: Tensor
    fine_logits_local: Tensor  # masked slots hold the sentinel
    coarse_labels: np.ndarray
    fine_slots: np.ndarray  # local slot of the true fine class
    feat1: Tensor | None = None  # pooled fused features per level (B, d)
    feat2: Tensor | None = None
    qvec1: Tensor | None = None  # (N_1, d)
    qvec2: Tensor | None = None  # (B, k_2, d)
    slot_valid: np.ndarray | None = None  # (B, k_2)
    camp_scores: Tensor | None = None
    camp_targets: np.ndarray | None = None


def total_loss(terms: LossTerms, cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of enabled terms; terms with zero weight are not evaluated."""
    weights = {
        "ce1": cfg.w_ce1,
        "ce2": cfg.w_ce2,
        "cfl1": cfg.w_cfl1,
        "cfl2": cfg.w_cfl2,
        "bce": cfg.w_bce,
    }
    if all(w == 0 for w in weights.values()):
        raise ConfigError("all loss weights are zero")
    parts: dict[str, Tensor] = {}
    if cfg.w_ce1:
        parts["ce1"] = cross_entropy(terms.coarse_logits, terms.coarse_labels)
    if cfg.w_ce2:
        parts["ce2"] = cross_entropy(terms.fine_logits_local, terms.fine_slots)
    if cfg.w_cfl1:
        parts["cfl1"] = cluster_focal_loss(terms.feat1, terms.qvec1, terms.coarse_labels, cfg)
    if cfg.w_cfl2:
        parts["cfl2"] = cluster_focal_loss(terms.feat2, terms.qvec2, terms.fine_slots, cfg, terms.slot_valid)
    if cfg.w_bce:
        if terms.camp_scores is None:
            raise ConfigError("w_bce > 0 but the model produced no CAMP scores")
        parts["bce"] = binary_cross_entropy_with_logits(terms.camp_scores, terms.camp_targets)
    total = None
    for name, value in parts.items():
        term = value * weights[name]
        total = term if total is None else total + term
    components = {name: parts[name].item() if name in parts else 0.0 for name in weights}
    components["total"] = total.item()
    return total, components
