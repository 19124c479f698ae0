"""Training loop, evaluation metrics, metrics stream and the ablation runner.

Metrics stream: newline-delimited JSON, one object per line, keys sorted.
Every object carries ``"schema": "hiq.metrics/1"`` and a ``"kind"``:

* ``eigen_init``: the PCA query-initialisation report (only when enabled).
* ``epoch``: one per training epoch with ``step``, ``epoch``, ``seed``,
  mean training ``loss`` components, held-out ``coarse_acc``,
  ``fine_acc_conditional``, ``fine_acc_absolute``, ``n_eval``,
  ``eval_split`` and ``wall_clock`` (seconds, or null unless
  ``log_wall_clock`` is set so that streams stay byte-identical).
* ``eval``: same fields, written by standalone evaluation.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import queue
import statistics
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor, no_grad
from .camp import camp_refine, camp_targets_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config
from .data import Dataset, NormStats, build_datasets, compute_stats, hflip, normalize_batch, worker_count
from .hierarchy import LabelHierarchy
from .losses import cross_entropy, total_loss
from .model import ContractError, FlatModel, HierarchicalModel, hierarchical_forward, loss_terms
from .querybank import EigenInitReport, init_eigen_queries

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "hiq.metrics/1"
EVAL_BATCH = 64


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last: "MetricsRecord | None") -> None:
        self.step = step
        self.last = last
        detail = last.to_dict() if last is not None else None
        super().__init__(f"non-finite loss at step {step}; last finite metrics: {detail}")


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: dict[str, float]
    coarse_acc: float
    fine_acc_conditional: float
    fine_acc_absolute: float
    seed: int
    wall_clock: float | None = None
    n_eval: int = 0
    eval_split: str = "test"
    kind: str = "epoch"  # epoch | eval

    def __post_init__(self) -> None:
        for name in ("coarse_acc", "fine_acc_conditional", "fine_acc_absolute"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema"] = METRICS_SCHEMA
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# -- metrics -----------------------------------------------------------------


def accuracy_metrics(coarse_pred, fine_pred, coarse_gt, fine_gt) -> tuple[float, float, float]:
    """(coarse_acc, fine_acc_conditional, fine_acc_absolute).

    Conditional fine accuracy is measured among samples whose coarse
    prediction is correct; it is 0.0 when there are none.
    """
    coarse_ok = np.asarray(coarse_pred) == np.asarray(coarse_gt)
    fine_ok = np.asarray(fine_pred) == np.asarray(fine_gt)
    n = coarse_ok.size
    if n == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    both = coarse_ok & fine_ok
    n_coarse = int(coarse_ok.sum())
    cond = both.sum() / n_coarse if n_coarse else 0.0
    return float(n_coarse / n), float(cond), float(both.sum() / n)


def predict(
    model,
    images: np.ndarray,
    stats: NormStats,
    camp: bool = False,
    camp_lambda: float = 0.0,
    batch_size: int = EVAL_BATCH,
) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode (coarse, fine) predictions; the predicted parent drives level-2 queries."""
    coarse, fine = [], []
    parents = np.array(model.hierarchy.parent)
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = normalize_batch(images[start : start + batch_size], stats)
            if isinstance(model, FlatModel):
                f = model(x).data.argmax(axis=1)
                c = parents[f]
            else:
                lam = camp_lambda if camp else 0.0
                out = hierarchical_forward(model, x, "infer", use_camp=camp, camp_lambda=lam)
                if camp:
                    out = camp_refine(out, out.camp_scores, lam)
                c, f = out.predictions()
            coarse.append(c)
            fine.append(f)
    if not coarse:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(coarse), np.concatenate(fine)


def evaluate(
    model,
    dataset: Dataset,
    stats: NormStats,
    camp: bool = False,
    camp_lambda: float = 0.0,
    step: int = 0,
    epoch: int = 0,
    seed: int = 0,
    loss: dict[str, float] | None = None,
    split: str = "test",
) -> MetricsRecord:
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    if model.hierarchy != dataset.hierarchy:
        raise ContractError(
            f"model hierarchy (N={model.hierarchy.N}, k={model.hierarchy.k}) does not match "
            f"dataset hierarchy (N={dataset.hierarchy.N}, k={dataset.hierarchy.k})"
        )
    cp, fp = predict(model, dataset.images, stats, camp, camp_lambda)
    c, cond, absolute = accuracy_metrics(cp, fp, dataset.coarse, dataset.fine)
    if absolute > min(c, cond) + 1e-12:
        raise ContractError(f"fine_acc_absolute {absolute} exceeds min(coarse, conditional)")
    kind = "epoch" if epoch else "eval"
    return MetricsRecord(step, epoch, dict(loss or {}), c, cond, absolute, seed, None, len(dataset), split, kind)


def evaluate_checkpoint(path, dataset: Dataset) -> MetricsRecord:
    ckpt = load_checkpoint(path)
    if ckpt.model.hierarchy != dataset.hierarchy:
        raise ContractError("checkpoint hierarchy does not match the dataset hierarchy")
    cfg = ckpt.cfg
    return evaluate(ckpt.model, dataset, ckpt.stats, cfg.camp, cfg.model.camp_lambda, seed=cfg.seed)


# -- optimisation --------------------------------------------------------------


class SGD:
    """SGD with momentum over parameter groups ``[(params, lr_multiplier), ...]``.

    ``v <- mu * v + g (+ wd * p)``, ``p <- p - (lr * mult) * v``; the buffer
    starts at the first gradient.
    """

    def __init__(self, groups: list[tuple[list[Tensor], float]], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.groups = groups
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for params, mult in self.groups:
            rate = self.lr * mult
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
                buf = self._buf.get(id(p))
                buf = g.copy() if buf is None else self.momentum * buf + g
                self._buf[id(p)] = buf
                p.data -= rate * buf


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def scheduled_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based ``step``."""
    if cfg.lr_schedule == "cosine" and total_steps > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return cfg.lr


def parameter_groups(model, backbone_mult: float) -> list[tuple[list[Tensor], float]]:
    backbone = model.backbone.parameters()
    ids = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in ids]
    return [(backbone, backbone_mult), (rest, 1.0)]


# -- batches -------------------------------------------------------------------


def _prefetch(gen: Iterator, depth: int) -> Iterator:
    """Run ``gen`` on one producer thread through a bounded queue; order is preserved."""
    if depth <= 0:
        yield from gen
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def produce():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    while (item := q.get()) is not done:
        if isinstance(item, BaseException):
            raise item
        yield item
    t.join()


def iterate_batches(ds: Dataset, order: np.ndarray, batch_size: int, stats: NormStats, flips: np.ndarray | None = None):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        images = ds.images[idx]
        if flips is not None:
            f = flips[start : start + batch_size]
            images = np.where(f[:, None, None, None], hflip(images), images)
        yield normalize_batch(images, stats), ds.coarse[idx], ds.fine[idx]


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: HierarchicalModel | FlatModel
    stats: NormStats
    records: list[MetricsRecord]
    eigen_report: EigenInitReport | None = None
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None
    stream: list[str] = field(default_factory=list)


def build_model(cfg: TrainConfig, h: LabelHierarchy, train_ds: Dataset, stats: NormStats, rng: np.random.Generator):
    if cfg.head == "flat":
        return FlatModel(h, cfg.model, rng), None
    bank, report = None, None
    if cfg.eigen_init:
        by_fine = [normalize_batch(x, stats) for x in train_ds.by_fine_class()]
        bank, report = init_eigen_queries(by_fine, h, cfg.model)
    return HierarchicalModel(h, cfg.model, rng, bank=bank), report


def batch_loss(model, cfg: TrainConfig, x: np.ndarray, coarse: np.ndarray, fine: np.ndarray) -> tuple[Tensor, dict[str, float]]:
    if isinstance(model, FlatModel):
        loss = cross_entropy(model(x), fine)
        return loss, {"ce": loss.item(), "total": loss.item()}
    out = hierarchical_forward(model, x, "train", coarse_labels=coarse, use_camp=cfg.camp)
    targets = camp_targets_batch(model.hierarchy, coarse, fine) if cfg.camp else None
    return total_loss(loss_terms(out, coarse, fine, targets), cfg.effective_loss())


def train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    data: tuple[LabelHierarchy, Dataset, Dataset] | None = None,
) -> TrainResult:
    """Train per ``cfg``; writes ``metrics.jsonl``, ``checkpoint.hiq`` and ``config.cfg`` to ``out_dir``.

    ``data`` overrides dataset construction from ``cfg.data``.
    """
    cfg.validate()
    h, train_ds, test_ds = data if data is not None else build_datasets(cfg.data, cfg.model.input_size)
    if len(train_ds) == 0:
        raise EvaluationError("training split is empty")
    train_ds.check_consistency()
    eval_ds, eval_split = (test_ds, "test") if len(test_ds) else (train_ds, "train")
    stats = compute_stats(train_ds)
    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    model, report = build_model(cfg, h, train_ds, stats, np.random.default_rng(init_ss))
    opt = SGD(parameter_groups(model, cfg.backbone_lr_mult), cfg.lr, cfg.momentum, cfg.weight_decay)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
        metrics_fh = (out / "metrics.jsonl").open("w", encoding="utf-8")
    result = TrainResult(model, stats, [], report)

    def emit(line: str) -> None:
        result.stream.append(line)
        if metrics_fh is not None:
            metrics_fh.write(line + "\n")
            metrics_fh.flush()

    try:
        if report is not None:
            emit(json.dumps({"schema": METRICS_SCHEMA, "kind": "eigen_init", **report.to_dict()}, sort_keys=True))
        started = time.perf_counter()
        step = 0
        params = model.parameters()
        total_steps = cfg.epochs * math.ceil(len(train_ds) / cfg.batch_size)
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train_ds))
            flips = shuffle_rng.random(len(order)) < 0.5 if cfg.data.hflip else None
            sums: dict[str, float] = defaultdict(float)
            seen = 0
            batches = iterate_batches(train_ds, order, cfg.batch_size, stats, flips)
            for x, coarse, fine in _prefetch(batches, worker_count() - 1):
                opt.lr = scheduled_lr(cfg, step, total_steps)
                model.zero_grad()
                loss, parts = batch_loss(model, cfg, x, coarse, fine)
                step += 1
                if not all(math.isfinite(v) for v in parts.values()):
                    raise TrainingDiverged(step, result.records[-1] if result.records else None)
                loss.backward()
                if cfg.grad_clip > 0:
                    clip_grad_norm(params, cfg.grad_clip)
                opt.step()
                for k, v in parts.items():
                    sums[k] += v * len(coarse)
                seen += len(coarse)
            mean_loss = {k: v / seen for k, v in sorted(sums.items())}
            record = evaluate(
                model, eval_ds, stats, cfg.camp, cfg.model.camp_lambda, step, epoch, cfg.seed, mean_loss, eval_split
            )
            if cfg.log_wall_clock:
                record.wall_clock = time.perf_counter() - started
            result.records.append(record)
            emit(record.to_json())
            logger.info("epoch %d step %d loss %.4f coarse %.3f fine|c %.3f", epoch, step,
                        mean_loss.get("total", float("nan")), record.coarse_acc, record.fine_acc_conditional)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        result.metrics_path = out / "metrics.jsonl"
        result.checkpoint_path = save_checkpoint(model, stats, out / "checkpoint.hiq", cfg)
    return result


# -- ablation ------------------------------------------------------------------

ABLATION_CONFIGS: dict[str, dict] = {
    "Base": dict(cfl=False, eigen_init=False, camp=False, head="hierarchical"),
    "Base+CFL": dict(cfl=True, eigen_init=False, camp=False, head="hierarchical"),
    "Base+CFL+Eigen": dict(cfl=True, eigen_init=True, camp=False, head="hierarchical"),
    "Base+CFL+CAMP": dict(cfl=True, eigen_init=False, camp=True, head="hierarchical"),
    "Base+CFL+CAMP+Eigen": dict(cfl=True, eigen_init=True, camp=True, head="hierarchical"),
    "Flat": dict(cfl=False, eigen_init=False, camp=False, head="flat"),
}
ABLATION_SEEDS = (1, 2, 3)
METRIC_NAMES = ("coarse_acc", "fine_acc_conditional", "fine_acc_absolute")
REPORT_COLUMNS = ("config", "seed", "head", "cfl", "eigen_init", "camp") + METRIC_NAMES


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    medians: list[dict] = field(default_factory=list)

    def median(self, config: str) -> dict:
        for m in self.medians:
            if m["config"] == config:
                return m
        raise KeyError(config)

    def to_csv(self) -> str:
        from io import StringIO

        buf = StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows + self.medians:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"schema": "hiq.ablation/1", "rows": self.rows, "medians": self.medians}


def ablation_config(base: TrainConfig, name: str, seed: int) -> TrainConfig:
    cfg = dataclasses.replace(base, seed=seed, **ABLATION_CONFIGS[name])
    cfg.model = dataclasses.replace(base.model)
    cfg.loss = dataclasses.replace(base.loss)
    cfg.data = dataclasses.replace(base.data)
    return cfg


def run_ablation(
    base: TrainConfig,
    out_dir: str | Path | None = None,
    seeds=ABLATION_SEEDS,
    configs=None,
    data: tuple[LabelHierarchy, Dataset, Dataset] | None = None,
) -> AblationReport:
    """Train every ablation configuration for every seed; report per-run rows and per-config medians.

    Writes ``report.csv``, ``report.json`` and ``ablation.png`` when ``out_dir`` is given.
    """
    names = list(configs) if configs is not None else list(ABLATION_CONFIGS)
    unknown = [n for n in names if n not in ABLATION_CONFIGS]
    if unknown:
        raise KeyError(f"unknown ablation configurations: {unknown}")
    if data is None:
        data = build_datasets(base.data, base.model.input_size)
    out = Path(out_dir) if out_dir is not None else None
    report = AblationReport()
    for name in names:
        flags = ABLATION_CONFIGS[name]
        runs = []
        for seed in seeds:
            cfg = ablation_config(base, name, seed)
            run_dir = out / "runs" / f"{name}-seed{seed}" if out is not None else None
            res = train(cfg, run_dir, data)
            if res.records:
                last = res.records[-1]
            else:
                last = evaluate(res.model, data[2] if len(data[2]) else data[1], res.stats, cfg.camp,
                                cfg.model.camp_lambda, seed=seed)
            row = {"config": name, "seed": seed, **flags}
            row.update({m: getattr(last, m) for m in METRIC_NAMES})
            report.rows.append(row)
            runs.append(row)
        med = {"config": name, "seed": "median", **flags}
        med.update({m: float(statistics.median(r[m] for r in runs)) for m in METRIC_NAMES})
        report.medians.append(med)
    if out is not None:
        from .plotting import plot_ablation

        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        plot_ablation(report, out / "ablation.png")
    return report
