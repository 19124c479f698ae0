"""Datasets: deterministic synthetic hierarchical images and CSV manifests.

Synthetic images are a pure function of the config. Randomness comes from
SplitMix64 (Steele, Lea & Flood 2014): sample ``i`` of a dataset seeded with
``s`` uses the stream whose initial state is ``splitmix64(s XOR i)``; the
n-th draw is ``mix(state + (n + 1) * 0x9E3779B97F4A7C15)``. Uniforms take the
top 53 bits; normals use Box-Muller on pairs of uniforms.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import DataConfig
from .hierarchy import LabelHierarchy, from_branching, load_hierarchy

logger = logging.getLogger(__name__)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
STD_EPS = 1e-6

SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "diamond", "checker")
LAYOUTS = ("single", "pair")
PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.20, 0.35, 0.95],
        [0.95, 0.90, 0.15],
        [0.85, 0.20, 0.85],
        [0.15, 0.85, 0.90],
        [0.95, 0.55, 0.10],
        [0.95, 0.95, 0.95],
    ]
)
BACKGROUND = 0.12


class DataError(ValueError):
    pass


class SynthConfigError(ValueError):
    pass


# -- PRNG ------------------------------------------------------------------


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(state: int, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 from ``state``, as uint64."""
    with np.errstate(over="ignore"):
        counters = np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN + np.uint64(state & 0xFFFFFFFFFFFFFFFF)
        return _mix(counters)


def sample_state(seed: int, index: int) -> int:
    with np.errstate(over="ignore"):
        return int(_mix(np.array([(seed ^ index) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) + _GOLDEN)[0])


def uniforms(bits: np.ndarray) -> np.ndarray:
    """uint64 -> floats in [0, 1) from the top 53 bits."""
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def normals(bits: np.ndarray) -> np.ndarray:
    """Box-Muller over consecutive pairs; ``len(bits)`` must be even."""
    u = uniforms(bits)
    u1, u2 = 1.0 - u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(len(bits))
    out[0::2] = r * np.cos(2 * np.pi * u2)
    out[1::2] = r * np.sin(2 * np.pi * u2)
    return out


# -- samples ---------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, H, W) in [0, 1]
    fine: np.ndarray  # (n,)
    coarse: np.ndarray  # (n,)
    hierarchy: LabelHierarchy

    def __len__(self) -> int:
        return len(self.fine)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.fine[idx], self.coarse[idx], self.hierarchy)

    def by_fine_class(self) -> list[np.ndarray]:
        return [self.images[self.fine == f] for f in range(self.hierarchy.n_fine)]

    def check_consistency(self) -> None:
        parents = np.array(self.hierarchy.parent)[self.fine] if len(self) else self.coarse
        if not np.array_equal(parents, self.coarse):
            bad = int(np.nonzero(parents != self.coarse)[0][0])
            raise DataError(f"sample {bad}: coarse label {self.coarse[bad]} is not the parent of fine {self.fine[bad]}")
        if not np.isfinite(self.images).all():
            raise DataError("non-finite pixel values")


@dataclass
class SynthConfig:
    n_coarse: int = 8
    children: tuple[int, ...] = (3,) * 8
    images_per_class: int = 100
    image_size: int = 64
    noise: float = 0.05
    seed: int = 0

    @classmethod
    def from_data_config(cls, data: DataConfig, image_size: int) -> "SynthConfig":
        return cls(data.n_coarse, tuple(data.child_counts()), data.images_per_class, image_size, data.noise, data.seed)

    def validate(self) -> None:
        if self.n_coarse < 1 or self.images_per_class < 1 or self.image_size < 8:
            raise SynthConfigError("counts must be >= 1 and image_size >= 8")
        if len(self.children) != self.n_coarse or min(self.children) < 1:
            raise SynthConfigError("children must list a positive child count per coarse class")
        if self.noise < 0:
            raise SynthConfigError("noise must be >= 0")
        if self.n_coarse > len(SHAPES) * len(LAYOUTS):
            raise SynthConfigError(
                f"n_coarse={self.n_coarse} exceeds the {len(SHAPES) * len(LAYOUTS)} shape/layout combinations"
            )


def _shape_mask(shape: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = np.sqrt(x * x + y * y)
    if shape == "disk":
        return r < 0.55
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) < 0.45
    if shape == "triangle":
        return (y < 0.45) & (y > -0.55 + 1.8 * np.abs(x))
    if shape == "cross":
        return ((np.abs(x) < 0.17) & (np.abs(y) < 0.6)) | ((np.abs(y) < 0.17) & (np.abs(x) < 0.6))
    if shape == "ring":
        return (r > 0.32) & (r < 0.6)
    if shape == "bar":
        return (np.abs(y) < 0.2) & (np.abs(x) < 0.65)
    if shape == "diamond":
        return np.abs(x) + np.abs(y) < 0.62
    if shape == "checker":
        inside = np.maximum(np.abs(x), np.abs(y)) < 0.55
        return inside & ((np.floor((x + 0.55) / 0.275) + np.floor((y + 0.55) / 0.275)) % 2 == 0)
    raise ValueError(shape)


def render_sample(coarse: int, variant: int, size: int, noise: float, state: int) -> np.ndarray:
    """One (3, size, size) image of coarse shape/layout and fine color/texture variant."""
    shape, layout = SHAPES[coarse % len(SHAPES)], LAYOUTS[coarse // len(SHAPES)]
    n_pix = 3 * size * size
    bits = splitmix64(state, 6 + n_pix + (n_pix % 2))
    u = uniforms(bits[:6])
    dx, dy = (u[0] - 0.5) * 0.3, (u[1] - 0.5) * 0.3
    scale = 0.85 + 0.3 * u[2]
    gain = 0.85 + 0.3 * u[3]
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    if layout == "single":
        mask = _shape_mask(shape, (xx - dx) / scale, (yy - dy) / scale)
    else:
        s = scale * 0.5
        mask = _shape_mask(shape, (xx - dx + 0.45) / s, (yy - dy) / s) | _shape_mask(shape, (xx - dx - 0.45) / s, (yy - dy) / s)
    color = PALETTE[variant % len(PALETTE)] * gain
    img = np.full((3, size, size), BACKGROUND)
    fg = np.broadcast_to(color[:, None, None], img.shape)
    texture = variant // len(PALETTE)
    if texture:
        stripes = (np.floor((yy + 1.0) * size / (2 * texture + 2)) % 2) == 0
        fg = np.where(stripes[None], fg, fg * 0.45)
    img = np.where(mask[None], fg, img)
    if noise > 0:
        img = img + noise * normals(bits[6:])[:n_pix].reshape(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig) -> tuple[LabelHierarchy, Dataset, Dataset]:
    """Hierarchy plus train/test splits; per class the first 80% of indices train."""
    cfg.validate()
    h = from_branching(list(cfg.children))
    n = cfg.images_per_class
    n_train = max(1, int(round(0.8 * n))) if n > 1 else 1
    images = np.empty((h.n_fine * n, 3, cfg.image_size, cfg.image_size))
    fine = np.repeat(np.arange(h.n_fine), n)
    for f in range(h.n_fine):
        c, variant = h.parent[f], h.local_slot(f)
        for j in range(n):
            idx = f * n + j
            images[idx] = render_sample(c, variant, cfg.image_size, cfg.noise, sample_state(cfg.seed, idx))
    coarse = np.array(h.parent)[fine]
    is_train = np.tile(np.arange(n) < n_train, h.n_fine)
    full = Dataset(images, fine, coarse, h)
    return h, full.subset(is_train), full.subset(~is_train)


# -- manifests -------------------------------------------------------------


def _decode_pillow(path: Path, size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


# suffix -> decoder(path, size) returning (3, size, size) in [0, 1]; extend to add formats
DECODERS: dict[str, Callable[[Path, int], np.ndarray]] = {
    ".ppm": _decode_pillow,
    ".pgm": _decode_pillow,
    ".pnm": _decode_pillow,
    ".png": _decode_pillow,
}


def decode_image(path: Path, size: int) -> np.ndarray:
    decoder = DECODERS.get(path.suffix.lower())
    if decoder is None:
        raise DataError(f"no decoder for {path.suffix!r} ({path})")
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    return decoder(path, size)


def worker_count() -> int:
    cap = os.environ.get("HIQ_THREADS")
    return max(1, int(cap)) if cap else 1


def load_manifest(
    csv_path: str | Path,
    taxonomy: str | Path | LabelHierarchy,
    image_root: str | Path,
    image_size: int = 64,
) -> tuple[LabelHierarchy, Dataset]:
    """Read ``path,fine_label,coarse_label`` rows (labels are taxonomy names).

    Rows are validated before any image is decoded. Decoding may use up to
    ``HIQ_THREADS`` workers; results keep row order.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise FileNotFoundError(f"manifest not found: {csv_path}")
    h = taxonomy if isinstance(taxonomy, LabelHierarchy) else load_hierarchy(taxonomy)
    fine_ids = {name: i for i, name in enumerate(h.fine_names)}
    coarse_ids = {name: i for i, name in enumerate(h.coarse_names)}
    root = Path(image_root)
    paths, fine, coarse = [], [], []
    with csv_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["path", "fine_label", "coarse_label"]:
            raise DataError(f"{csv_path}: header must be 'path,fine_label,coarse_label'")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{csv_path} row {row_no}: expected 3 fields, got {len(row)}")
            rel, fname, cname = (c.strip() for c in row)
            if fname not in fine_ids or cname not in coarse_ids:
                raise DataError(f"{csv_path} row {row_no}: unknown label {fname!r}/{cname!r}")
            f, c = fine_ids[fname], coarse_ids[cname]
            if h.parent_of(f) != c:
                raise DataError(
                    f"{csv_path} row {row_no}: coarse label {cname!r} is not the parent of {fname!r} "
                    f"(expected {h.coarse_names[h.parent_of(f)]!r})"
                )
            paths.append(root / rel)
            fine.append(f)
            coarse.append(c)

    cache: dict[Path, np.ndarray] = {}
    unique = list(dict.fromkeys(paths))
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for p, img in zip(unique, pool.map(lambda p: decode_image(p, image_size), unique)):
            cache[p] = img
    images = np.stack([cache[p] for p in paths]) if paths else np.zeros((0, 3, image_size, image_size))
    ds = Dataset(images, np.array(fine, dtype=np.int64), np.array(coarse, dtype=np.int64), h)
    return h, ds


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Write a (3, H, W) [0, 1] image as binary PPM (P6)."""
    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())


def export_dataset(ds: Dataset, out_dir: str | Path, split: str) -> Path:
    """Write images as PPM plus a manifest CSV; returns the manifest path."""
    out = Path(out_dir)
    img_dir = out / "images" / split
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out / f"{split}.csv"
    h = ds.hierarchy
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "fine_label", "coarse_label"])
        for i in range(len(ds)):
            rel = Path("images") / split / f"{i:05d}.ppm"
            write_ppm(out / rel, ds.images[i])
            writer.writerow([rel.as_posix(), h.fine_names[ds.fine[i]], h.coarse_names[ds.coarse[i]]])
    return manifest


# -- normalisation -----------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)
    guarded: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "guarded": list(self.guarded)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64), tuple(d.get("guarded", ())))


def compute_stats(train: Dataset) -> NormStats:
    """Per-channel mean/std over the training split; zero-std channels are epsilon-guarded."""
    if len(train) == 0:
        raise DataError("cannot compute normalisation statistics of an empty split")
    mean = train.images.mean(axis=(0, 2, 3))
    std = train.images.std(axis=(0, 2, 3))
    guarded = tuple(int(c) for c in np.nonzero(std < STD_EPS)[0])
    if guarded:
        logger.warning("channels %s have ~zero std; using eps=%g", guarded, STD_EPS)
    return NormStats(mean, np.maximum(std, STD_EPS), guarded)


def normalize_batch(images: np.ndarray, stats: NormStats) -> np.ndarray:
    return (images - stats.mean[:, None, None]) / stats.std[:, None, None]


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def build_datasets(data: DataConfig, image_size: int) -> tuple[LabelHierarchy, Dataset, Dataset]:
    """Resolve a DataConfig to (hierarchy, train, test)."""
    if data.source == "synthetic":
        return generate_synthetic(SynthConfig.from_data_config(data, image_size))
    if data.source == "manifest":
        if not data.manifest or not data.taxonomy:
            raise DataError("manifest source needs data.manifest and data.taxonomy")
        h, train = load_manifest(data.manifest, data.taxonomy, data.image_root or ".", image_size)
        test = train.subset(slice(0, 0))
        if data.test_manifest:
            _, test = load_manifest(data.test_manifest, h, data.image_root or ".", image_size)
        return h, train, test
    raise DataError(f"unknown data source {data.source!r}")
