"""Hierarchical scalable-query classifier and the flat softmax baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NEG_SENTINEL, Tensor, ops
from .backbone import Backbone
from .camp import CampHead, camp_forward, refine_logits
from .config import ModelConfig
from .decoder import LevelDecoder, decode_level, logits_from_decoded
from .fusion import LevelFusion
from .hierarchy import LabelHierarchy
from .losses import LossTerms
from .nn import Linear, Module
from .querybank import QueryBank, fuse_queries


class ContractError(ValueError):
    pass


@dataclass
class HierarchicalOutput:
    coarse_logits: Tensor  # (B, N_1)
    fine_logits_local: Tensor  # (B, k_2), inactive slots = NEG_SENTINEL
    fine_logits_global: np.ndarray  # (B, N_2), only the chosen parent's block populated
    chosen_coarse: np.ndarray  # (B,)
    hierarchy: LabelHierarchy
    camp_scores: Tensor | None = None  # (B, N_1 + k_2)
    feat1: Tensor | None = None
    feat2: Tensor | None = None
    qvec1: Tensor | None = None
    qvec2: Tensor | None = None

    @property
    def slot_valid(self) -> np.ndarray:
        return self.hierarchy.mask_matrix()[self.chosen_coarse] > 0

    def scatter_fine(self, local: np.ndarray) -> np.ndarray:
        """Place local slot logits at their global fine ids; everything else is the sentinel."""
        h = self.hierarchy
        table = h.slot_table()[self.chosen_coarse]  # (B, k_2)
        out = np.full((len(self.chosen_coarse), h.n_fine), NEG_SENTINEL)
        rows, slots = np.nonzero(table >= 0)
        out[rows, table[rows, slots]] = local[rows, slots]
        return out

    def predictions(self) -> tuple[np.ndarray, np.ndarray]:
        """(coarse argmax, fine argmax over global logits); ties resolve to the lowest id."""
        return self.coarse_logits.data.argmax(axis=1), self.fine_logits_global.argmax(axis=1)


class HierarchicalModel(Module):
    def __init__(self, h: LabelHierarchy, cfg: ModelConfig, rng: np.random.Generator, bank: QueryBank | None = None):
        cfg.validate()
        self._hierarchy = h
        self._cfg = cfg
        self.backbone = Backbone(cfg, rng)
        sizes = self.backbone.tap_sizes()
        widths = list(cfg.backbone_widths)

        def fusion(taps):
            return LevelFusion([widths[t - 1] for t in taps], [sizes[t - 1] for t in taps], cfg.d_q, cfg.n_heads, rng)

        self.fusion1 = fusion(cfg.level1_taps)
        self.fusion2 = fusion(cfg.level2_taps)
        self.bank = bank if bank is not None else QueryBank.random(h, cfg, rng)
        if self.bank.q1.shape[0] != h.n_coarse or self.bank.q2_base.shape[0] != h.k[1]:
            raise ContractError("query bank does not match the hierarchy's N_1 / k_2")
        self.dec1 = LevelDecoder(h.n_coarse, cfg.query_channels, cfg.d_q, cfg.n_heads, rng)
        self.dec2 = LevelDecoder(h.k[1], cfg.query_channels, cfg.d_q, cfg.n_heads, rng)
        qdim = cfg.query_channels * cfg.query_size * cfg.query_size
        self.camp = CampHead(qdim, widths[-1], cfg.camp_dim, rng, cfg.camp_scale)

    @property
    def hierarchy(self) -> LabelHierarchy:
        return self._hierarchy

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {}
        for name, p in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(p)
        return groups

    def level2_parameters(self) -> list[Tensor]:
        """Parameters used only by level-2 decoding (queries, fusion weight, projection, fusion, decoder)."""
        b = self.bank
        return [b.q2_base, b.beta_logit, b.proj_weight, b.proj_bias] + self.fusion2.parameters() + self.dec2.parameters()

    def level2_decode(self, taps, coarse_ids: np.ndarray, mode: str) -> tuple[Tensor, Tensor, Tensor]:
        """Fused level-2 queries, fused level-2 features and local logits for given parents."""
        q2 = fuse_queries(self.bank, self._hierarchy, coarse_ids, mode)
        fused2 = self.fusion2([taps.maps[t - 1] for t in self._cfg.level2_taps])
        local = logits_from_decoded(decode_level(q2, fused2, self.dec2), self.dec2)
        return q2, fused2, local


def hierarchical_forward(
    model: HierarchicalModel,
    images,
    mode: str = "infer",
    coarse_labels=None,
    use_camp: bool = False,
    camp_lambda: float = 0.0,
) -> HierarchicalOutput:
    """Sequential coarse-then-fine forward pass.

    In ``train`` mode the ground-truth coarse label selects the parent whose
    query is fused into the level-2 queries; in ``infer`` mode the coarse
    argmax does (after CAMP refinement of the coarse logits when
    ``camp_lambda`` > 0).
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == "train" and coarse_labels is None:
        raise ContractError("train mode requires coarse labels")
    h, cfg = model.hierarchy, model.cfg
    x = images if isinstance(images, Tensor) else Tensor(images)
    taps = model.backbone(x)
    fused1 = model.fusion1([taps.maps[t - 1] for t in cfg.level1_taps])
    coarse_logits = logits_from_decoded(decode_level(model.bank.q1, fused1, model.dec1), model.dec1)

    camp_coarse = None
    if use_camp:
        camp_coarse = camp_forward(model.bank.q1, None, taps.penultimate, model.camp)
    if mode == "train":
        chosen = np.asarray(coarse_labels, dtype=np.int64)
    else:
        scores = coarse_logits.data
        if camp_coarse is not None and camp_lambda:
            scores = refine_logits(scores, camp_coarse.data, camp_lambda)
        chosen = scores.argmax(axis=1)

    q2, fused2, local = model.level2_decode(taps, chosen, mode)
    valid = h.mask_matrix()[chosen] > 0
    local = ops.masked_fill(local, ~valid, NEG_SENTINEL)

    camp_scores = None
    if use_camp:
        camp_scores = camp_forward(model.bank.q1, q2, taps.penultimate, model.camp)

    out = HierarchicalOutput(
        coarse_logits=coarse_logits,
        fine_logits_local=local,
        fine_logits_global=np.empty(0),
        chosen_coarse=chosen,
        hierarchy=h,
        camp_scores=camp_scores,
        feat1=ops.global_avg_pool(fused1),
        feat2=ops.global_avg_pool(fused2),
        qvec1=model.dec1.query_vectors(model.bank.q1),
        qvec2=model.dec2.query_vectors(q2),
    )
    out.fine_logits_global = out.scatter_fine(local.data)
    return out


def loss_terms(out: HierarchicalOutput, coarse_labels, fine_labels, camp_targets=None) -> LossTerms:
    h = out.hierarchy
    fine_slots = np.array([h.local_slot(int(f)) for f in fine_labels], dtype=np.int64)
    return LossTerms(
        coarse_logits=out.coarse_logits,
        fine_logits_local=out.fine_logits_local,
        coarse_labels=np.asarray(coarse_labels, dtype=np.int64),
        fine_slots=fine_slots,
        feat1=out.feat1,
        feat2=out.feat2,
        qvec1=out.qvec1,
        qvec2=out.qvec2,
        slot_valid=out.slot_valid,
        camp_scores=out.camp_scores,
        camp_targets=camp_targets,
    )


class FlatModel(Module):
    """Baseline: one softmax over all fine classes on the backbone's pooled feature."""

    def __init__(self, h: LabelHierarchy, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self._hierarchy = h
        self._cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.head = Linear(cfg.backbone_widths[-1], h.n_fine, rng)

    @property
    def hierarchy(self) -> LabelHierarchy:
        return self._hierarchy

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        return self.head(self.backbone(x).penultimate)
