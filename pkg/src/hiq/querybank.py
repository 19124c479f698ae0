"""Per-level learnable query maps, PCA (eigen) initialisation and coarse-to-fine fusion.

Fusion of level-2 queries for a sample whose coarse class is ``c``::

    Q2[s] = (beta * q2_base[s] + (1 - beta) * proj(q1[c])) * mask_c[s]

``beta`` is kept in [0, 1] by storing its logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .config import ModelConfig
from .hierarchy import HierarchyError, LabelHierarchy
from .nn import Module, Parameter

LUMA = np.array([0.299, 0.587, 0.114])
FALLBACK_EIG_TOL = 1e-12


class QueryInitError(ValueError):
    pass


class QueryDataError(ValueError):
    pass


@dataclass
class ClassSpectrum:
    fine_id: int
    eigenvalues: list[float]
    components: int
    fallback: bool

    def to_dict(self) -> dict:
        return {
            "fine_id": self.fine_id,
            "eigenvalues": self.eigenvalues,
            "components": self.components,
            "fallback": self.fallback,
        }


@dataclass
class EigenInitReport:
    classes: list[ClassSpectrum] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"classes": [c.to_dict() for c in self.classes]}

    @property
    def n_fallback(self) -> int:
        return sum(c.fallback for c in self.classes)


def downsample(images: np.ndarray, size: int) -> np.ndarray:
    """Resize (n, H, W) to (n, size, size): block mean when divisible, else bilinear."""
    n, h, w = images.shape
    if h % size == 0 and w % size == 0:
        return images.reshape(n, size, h // size, size, w // size).mean(axis=(2, 4))
    return ops.resize_bilinear(Tensor(images), (size, size)).data


def pca_inputs(images: np.ndarray, size: int) -> np.ndarray:
    """Normalised (n, 3, H, W) or (n, H, W) images -> (n, size*size) luma vectors."""
    images = np.asarray(images, dtype=np.float64)
    if not np.isfinite(images).all():
        raise QueryDataError("non-finite pixel values in query initialisation data")
    if images.ndim == 4:
        images = np.tensordot(LUMA, images, axes=([0], [1])) if images.shape[1] == 3 else images.mean(axis=1)
    return downsample(images, size).reshape(len(images), -1)


def eigen_query_map(vectors: np.ndarray, max_components: int) -> tuple[np.ndarray, ClassSpectrum]:
    """Eigenvalue-weighted combination of the top principal directions of ``vectors``.

    Returns the flat map and its spectrum record (``fine_id`` left at -1).
    Each eigenvector's sign is fixed so that its largest-magnitude entry is
    positive. Rank-0 data falls back to the unit-normalised mean vector.
    """
    n, d = vectors.shape
    if n == 0:
        raise QueryInitError("cannot build an eigen query from zero samples")
    if n > 1:
        centered = vectors - vectors.mean(axis=0)
        cov = centered.T @ centered / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        evals, evecs = evals[::-1], evecs[:, ::-1]
    else:
        evals, evecs = np.zeros(d), np.eye(d)
    evals = np.clip(evals, 0.0, None)
    m = min(n - 1, d, max_components)
    if m < 1 or evals[0] <= FALLBACK_EIG_TOL:
        mean = vectors.mean(axis=0)
        norm = np.linalg.norm(mean)
        qmap = mean / norm if norm > 0 else np.zeros(d)
        return qmap, ClassSpectrum(-1, evals.tolist(), 0, True)
    top = evecs[:, :m].copy()
    idx = np.abs(top).argmax(axis=0)
    top *= np.sign(top[idx, np.arange(m)])
    weights = evals[:m] / evals[:m].sum()
    return top @ weights, ClassSpectrum(-1, evals.tolist(), m, False)


class QueryBank(Module):
    """Learnable level-1 queries, level-2 slot queries, fusion weight and projection."""

    def __init__(self, q1: np.ndarray, q2_base: np.ndarray, beta: float = 0.5) -> None:
        if q1.shape[1:] != q2_base.shape[1:]:
            raise ValueError(f"query map shapes differ: {q1.shape[1:]} vs {q2_base.shape[1:]}")
        c_q = q1.shape[1]
        self.q1 = Parameter(q1)
        self.q2_base = Parameter(q2_base)
        self.beta_logit = Parameter([float(np.log(beta / (1.0 - beta)))])
        self.proj_weight = Parameter(np.eye(c_q).reshape(c_q, c_q, 1, 1))
        self.proj_bias = Parameter(np.zeros(c_q))

    @classmethod
    def random(cls, h: LabelHierarchy, cfg: ModelConfig, rng: np.random.Generator) -> "QueryBank":
        shape = (cfg.query_channels, cfg.query_size, cfg.query_size)
        std = 1.0 / cfg.query_size
        return cls(rng.normal(0.0, std, size=(h.n_coarse,) + shape),
                   rng.normal(0.0, std, size=(h.k[1],) + shape))

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return self.q1.shape[1:]

    @property
    def beta(self) -> Tensor:
        return ops.sigmoid(self.beta_logit)

    def project(self, maps: Tensor) -> Tensor:
        """Shared 1x1 convolution over query channels; (n, c_q, h, w) -> same shape."""
        return ops.conv2d(maps, self.proj_weight, self.proj_bias)


def init_eigen_queries(
    images_by_fine: list[np.ndarray],
    h: LabelHierarchy,
    cfg: ModelConfig,
) -> tuple[QueryBank, EigenInitReport]:
    """Build a QueryBank whose maps come from per-fine-class PCA.

    ``images_by_fine[f]`` holds the normalised training images of fine class
    ``f``. Coarse maps average their children; slot maps average the fine
    maps occupying that slot across parents.
    """
    if len(images_by_fine) != h.n_fine:
        raise QueryInitError(f"expected image sets for {h.n_fine} fine classes, got {len(images_by_fine)}")
    size = cfg.query_size
    fine_maps = np.zeros((h.n_fine, size * size))
    report = EigenInitReport()
    for f, imgs in enumerate(images_by_fine):
        if len(imgs) == 0:
            raise QueryInitError(f"fine class {f} ({h.fine_names[f]!r}) has no images")
        vec, spectrum = eigen_query_map(pca_inputs(imgs, size), cfg.max_components)
        spectrum.fine_id = f
        fine_maps[f] = vec
        report.classes.append(spectrum)

    fine_maps = fine_maps.reshape(h.n_fine, size, size)
    coarse_maps = np.stack([fine_maps[list(kids)].mean(axis=0) for kids in h.children])
    table = h.slot_table()
    slot_maps = np.stack([fine_maps[table[:, s][table[:, s] >= 0]].mean(axis=0) for s in range(h.k[1])])

    def channels(maps: np.ndarray) -> np.ndarray:
        return np.repeat(maps[:, None], cfg.query_channels, axis=1)

    return QueryBank(channels(coarse_maps), channels(slot_maps)), report


def project_coarse_query(bank: QueryBank, coarse_id: int) -> Tensor:
    if not 0 <= coarse_id < bank.q1.shape[0]:
        raise HierarchyError(f"coarse id {coarse_id} out of range [0, {bank.q1.shape[0]})")
    return ops.reshape(bank.project(bank.q1[coarse_id : coarse_id + 1]), bank.map_shape)


FUSE_MODES = ("train", "infer")


def fuse_queries(bank: QueryBank, h: LabelHierarchy, coarse_ids, mode: str = "train") -> Tensor:
    """Level-2 queries for each sample, shape (B, k_2, c_q, h_q, w_q).

    ``coarse_ids`` are ground-truth parents in ``train`` mode and predicted
    parents in ``infer`` mode; the arithmetic is identical. Inactive slots
    are exactly zero.
    """
    if mode not in FUSE_MODES:
        raise ValueError(f"mode must be one of {FUSE_MODES}, got {mode!r}")
    ids = np.atleast_1d(np.asarray(coarse_ids, dtype=np.int64))
    if ids.size and (ids.min() < 0 or ids.max() >= h.n_coarse):
        raise HierarchyError(f"coarse ids out of range [0, {h.n_coarse}): {ids}")
    projected = bank.project(bank.q1[ids])  # (B, c_q, h, w); cost independent of N_1
    beta = ops.reshape(bank.beta, (1, 1, 1, 1, 1))
    fused = beta * ops.reshape(bank.q2_base, (1,) + bank.q2_base.shape) + (1.0 - beta) * ops.reshape(
        projected, (len(ids), 1) + bank.map_shape
    )
    mask = h.mask_matrix()[ids][:, :, None, None, None]
    return fused * mask


def active_query_count(h: LabelHierarchy, level: int) -> int:
    """Decoder query slots at ``level``: k_level, independent of the class count N_level."""
    return h.max_branching(level)
