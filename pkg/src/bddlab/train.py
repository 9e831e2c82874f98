"""Teacher pretraining, student distillation, evaluation and seed sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterError, Tensor
from .data import (
    ClassificationDataset,
    SegmentationGridDataset,
    gen_gaussian_mixture,
    gen_segmentation_grids,
    train_val_split,
)
from .losses import LOSS_MODES, DistillConfig, LogitBatch, cross_entropy, overall_loss
from .models import MLPSpec, ModelParams, count_params, forward_dense_logits, forward_logits, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    task: str = "classification"
    num_classes: int = 10
    dim: int = 16
    n_per_class: int = 500
    overlap: float = 0.6
    separation: float = 6.0
    height: int = 16
    width: int = 16
    n_grids: int = 400
    noise: float = 1.0
    split_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"data.task must be 'classification' or 'segmentation', got {self.task!r}")

    def build(self):
        if self.task == "classification":
            ds = gen_gaussian_mixture(
                self.num_classes, self.dim, self.n_per_class, self.overlap, self.seed, separation=self.separation
            )
        else:
            ds = gen_segmentation_grids(
                self.num_classes, self.height, self.width, self.n_grids, self.seed, D=self.dim, noise=self.noise
            )
        return train_val_split(ds, self.split_fraction, self.seed)


@dataclass(frozen=True)
class TrainConfig:
    """One training run; ``seed`` drives student init and minibatch order."""

    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: str = "bdd"
    teacher_widths: tuple[int, ...] = (16, 128, 128, 10)
    student_widths: tuple[int, ...] = (16, 16, 10)
    teacher_epochs: int = 30
    teacher_seed: int = 12345
    student_per_class: int | None = 20
    distill: DistillConfig = field(default_factory=DistillConfig)
    record_wall_time: bool = True

    def __post_init__(self):
        object.__setattr__(self, "teacher_widths", tuple(int(w) for w in self.teacher_widths))
        object.__setattr__(self, "student_widths", tuple(int(w) for w in self.student_widths))
        if self.epochs < 1 or self.teacher_epochs < 1:
            raise ConfigError(f"epochs must be >= 1 (epochs={self.epochs}, teacher_epochs={self.teacher_epochs})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"mode must be one of {LOSS_MODES}, got {self.mode!r}")

    def with_(self, **kw) -> TrainConfig:
        return replace(self, **kw)

    def student_data(self, data):
        """The student's transfer set: the first ``student_per_class`` train samples of each class.

        The subset depends only on the split, never on the run seed, so paired
        runs share it.
        """
        train, val = data
        k = self.student_per_class
        if k is None or isinstance(train, SegmentationGridDataset):
            return train, val
        idx = np.sort(np.concatenate([np.flatnonzero(train.labels == c)[:k] for c in range(train.num_classes)]))
        return train.subset(idx, "transfer"), val

    def student_spec(self) -> MLPSpec:
        return MLPSpec(self.student_widths, self.seed)

    def teacher_spec(self) -> MLPSpec:
        return MLPSpec(self.teacher_widths, self.teacher_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"]["tau_set"] = list(self.distill.tau_set)
        d["teacher_widths"] = list(self.teacher_widths)
        d["student_widths"] = list(self.student_widths)
        return d


@dataclass
class MetricsReport:
    mode: str
    seed: int
    metric: str  # "top1" or "miou"
    config: dict
    param_count: int
    initial: dict = field(default_factory=dict)
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    label: str = ""

    @property
    def final_metric(self) -> float:
        return self.final["val_" + self.metric]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# evaluation


def _logits(params: ModelParams, features: np.ndarray) -> Tensor:
    if features.ndim == 4:
        return forward_dense_logits(params, Tensor(features))
    return forward_logits(params, Tensor(features))


def evaluate_logits_top1(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_top1(params: ModelParams, data: ClassificationDataset) -> float:
    return evaluate_logits_top1(_logits(params, data.features).data, data.labels)


def confusion_matrix(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    idx = target.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise ValueError("no class is present in either prediction or ground truth")
    return float(np.mean(tp[present] / denom[present]))


def evaluate_miou_from_predictions(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    return miou_from_confusion(confusion_matrix(pred, target, num_classes))


def evaluate_miou(params: ModelParams, seg_data: SegmentationGridDataset) -> float:
    pred = np.argmax(_logits(params, seg_data.features).data, axis=1)
    return evaluate_miou_from_predictions(pred, seg_data.labels, seg_data.num_classes)


def _evaluate(params: ModelParams, ds) -> float:
    if isinstance(ds, SegmentationGridDataset):
        return evaluate_miou(params, ds)
    return evaluate_top1(params, ds)


# --------------------------------------------------------------------------
# training


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _objective(student_logits: Tensor, teacher_logits: np.ndarray | None, labels, cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    """Return (total loss, cross-entropy part)."""
    if cfg.mode == "ce" or teacher_logits is None:
        ce = cross_entropy(student_logits, labels)
        return ce, ce
    pair = LogitBatch(student_logits, Tensor(teacher_logits))
    total = overall_loss(pair, labels, cfg.distill, mode=cfg.mode)
    # recomputed value-only; the graph above already holds the CE branch
    ce = cross_entropy(Tensor(student_logits.data), labels)
    return total, ce


def _full_objective(params: ModelParams, teacher: ModelParams | None, ds, cfg: TrainConfig) -> tuple[float, float]:
    s = _logits(params.copy(requires_grad=False), ds.features)
    t = None if teacher is None else _logits(teacher, ds.features).data
    total, ce = _objective(s, t, ds.labels, cfg)
    return total.item(), ce.item()


def _fit(params: ModelParams, teacher: ModelParams | None, train, val, cfg: TrainConfig, epochs: int, seed: int) -> MetricsReport:
    metric = "miou" if isinstance(train, SegmentationGridDataset) else "top1"
    tic = time.perf_counter()
    init_loss, init_ce = _full_objective(params, teacher, train, cfg)
    report = MetricsReport(
        mode=cfg.mode,
        seed=seed,
        metric=metric,
        config=cfg.to_dict(),
        param_count=count_params(MLPSpec(params.layer_widths)),
        initial={
            "train_loss": init_loss,
            "train_ce": init_ce,
            "train_" + metric: _evaluate(params, train),
            "val_" + metric: _evaluate(params, val),
        },
    )
    opt = ad.SGD(params.tensors(), cfg.lr, cfg.momentum)
    rng = np.random.default_rng([seed, 0xB0D])
    for epoch in range(1, epochs + 1):
        losses, ces, sizes = [], [], []
        for idx in _batches(len(train), cfg.batch_size, rng):
            x = train.features[idx]
            y = train.labels[idx]
            s = _logits(params, x)
            t = None if teacher is None else _logits(teacher, x).data
            loss, ce = _objective(s, t, y, cfg)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch} (mode={cfg.mode}, lr={cfg.lr}, seed={seed})"
                )
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
            ces.append(ce.item())
            sizes.append(len(idx))
        w = np.asarray(sizes, dtype=np.float64)
        report.epochs.append(
            {
                "epoch": epoch,
                "train_loss": float(np.dot(losses, w) / w.sum()),
                "train_ce": float(np.dot(ces, w) / w.sum()),
                "train_" + metric: _evaluate(params, train),
                "val_" + metric: _evaluate(params, val),
            }
        )
    last = report.epochs[-1]
    report.final = {k: v for k, v in last.items() if k != "epoch"}
    report.wall_time_s = time.perf_counter() - tic if cfg.record_wall_time else 0.0
    return report


def train_teacher(cfg: TrainConfig, data) -> tuple[ModelParams, MetricsReport]:
    """Cross-entropy training of the teacher; returned params are frozen."""
    train, val = data
    tcfg = cfg.with_(mode="ce", lr=cfg.lr)
    params = init_params(cfg.teacher_spec())
    report = _fit(params, None, train, val, tcfg, cfg.teacher_epochs, cfg.teacher_seed)
    report.label = "teacher"
    return params.freeze(), report


def train_student_ce(cfg: TrainConfig, data) -> tuple[ModelParams, MetricsReport]:
    """Student baseline trained on labels alone."""
    train, val = cfg.student_data(data)
    params = init_params(cfg.student_spec())
    ccfg = cfg.with_(mode="ce")
    report = _fit(params, None, train, val, ccfg, cfg.epochs, cfg.seed)
    return params, report


def distill_student(cfg: TrainConfig, teacher: ModelParams, data) -> tuple[ModelParams, MetricsReport]:
    """Train a fresh student against ``teacher`` with the objective named by ``cfg.mode``."""
    if cfg.mode == "ce":
        return train_student_ce(cfg, data)
    if any(t.requires_grad for t in teacher.tensors()):
        raise ConfigError("teacher must be frozen before distillation")
    if teacher.layer_widths[-1] != cfg.student_widths[-1]:
        raise ConfigError(
            f"teacher predicts {teacher.layer_widths[-1]} classes but student predicts {cfg.student_widths[-1]}"
        )
    train, val = cfg.student_data(data)
    is_seg = isinstance(train, SegmentationGridDataset)
    if is_seg != (cfg.mode == "bdd_seg"):
        raise ConfigError(f"mode {cfg.mode!r} does not match {type(train).__name__}")
    params = init_params(cfg.student_spec())
    report = _fit(params, teacher, train, val, cfg, cfg.epochs, cfg.seed)
    return params, report


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class Variant:
    """A named run setting inside a sweep: a loss mode plus distillation overrides."""

    label: str
    mode: str
    overrides: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def of(cls, label: str, mode: str, **overrides) -> Variant:
        return cls(label, mode, tuple(sorted(overrides.items())))

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return cfg.with_(mode=self.mode, distill=cfg.distill.with_(**dict(self.overrides)))


def _as_variant(v) -> Variant:
    return v if isinstance(v, Variant) else Variant(str(v), str(v))


def sweep_threads() -> int:
    try:
        return max(1, int(os.environ.get("BDD_THREADS", "1")))
    except ValueError:
        return 1


def run_seed_sweep(
    cfg: TrainConfig,
    seeds: Sequence[int],
    modes: Sequence,
    data=None,
    teacher: ModelParams | None = None,
    data_cfg: DataConfig | None = None,
    threads: int | None = None,
) -> list[MetricsReport]:
    """Paired runs: for a given seed every variant sees the same split, init and batch order.

    Reports come back ordered by seed, then variant, whatever the scheduling.
    """
    if not seeds or not modes:
        raise ParameterError("seeds and modes must be nonempty")
    variants = [_as_variant(m) for m in modes]
    if data is None:
        data = (data_cfg or DataConfig()).build()
    if teacher is None and any(v.mode != "ce" for v in variants):
        teacher, _ = train_teacher(cfg, data)

    jobs = [(s, v) for s in seeds for v in variants]

    def run(job):
        seed, variant = job
        rcfg = variant.apply(cfg.with_(seed=int(seed)))
        _, rep = distill_student(rcfg, teacher, data)
        rep.label = variant.label
        return rep

    n = sweep_threads() if threads is None else threads
    if n <= 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(run, jobs))


def effective_settings(rep: MetricsReport) -> dict:
    """alpha/tau/beta actually in force for a report's mode."""
    d = rep.config["distill"]
    if rep.mode == "ce":
        return {"alpha": 0.0, "tau_f": d["kd_tau"], "tau_r": d["kd_tau"], "beta": 0.0}
    if rep.mode == "kd":
        return {"alpha": 0.0, "tau_f": d["kd_tau"], "tau_r": d["kd_tau"], "beta": d["beta"]}
    return {"alpha": d["alpha"], "tau_f": d["tau_f"], "tau_r": d["tau_r"], "beta": d["beta"]}


SWEEP_COLUMNS = ("seed", "mode", "alpha", "tau_f", "tau_r", "beta", "final_top1_or_miou", "wall_time_s")
SUMMARY_COLUMNS = ("label", "mode", "alpha", "tau_f", "tau_r", "beta", "n_seeds", "mean", "std")


def sweep_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    rows = []
    for r in reports:
        row = {"seed": r.seed, "mode": r.mode, **effective_settings(r)}
        row["final_top1_or_miou"] = r.final_metric
        row["wall_time_s"] = r.wall_time_s
        rows.append(row)
    return rows


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def summarize(reports: Sequence[MetricsReport]) -> list[dict]:
    """Mean and population std of the final metric per variant label, in first-seen order."""
    groups: dict[str, list[MetricsReport]] = {}
    for r in reports:
        groups.setdefault(r.label or r.mode, []).append(r)
    out = []
    for label, reps in groups.items():
        vals = np.array([r.final_metric for r in reps])
        out.append(
            {
                "label": label,
                "mode": reps[0].mode,
                **effective_settings(reps[0]),
                "n_seeds": len(reps),
                "mean": float(vals.mean()),
                "std": float(vals.std()),
            }
        )
    return out


def paired_deltas(reports: Sequence[MetricsReport], labels: Sequence[str]) -> list[dict]:
    """Per-seed final metrics for ``labels`` plus ``later - earlier`` for every label pair."""
    by_seed: dict[int, dict[str, float]] = {}
    for r in reports:
        by_seed.setdefault(r.seed, {})[r.label or r.mode] = r.final_metric
    rows = []
    for seed in sorted(by_seed):
        vals = by_seed[seed]
        row: dict[str, Any] = {"seed": seed}
        for lab in labels:
            row[lab] = vals[lab]
        for i, a in enumerate(labels):
            for b in labels[i + 1 :]:
                row[f"{b}_minus_{a}"] = vals[b] - vals[a]
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# probability histograms


def _hist(values: np.ndarray, bins: int) -> dict:
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    counts = counts.astype(np.int64)
    order = np.sort(counts)
    # cap the dominant bin at the runner-up so the small-probability tail stays readable
    cap = int(order[-2]) if len(order) > 1 else int(order[-1])
    return {"counts": counts.tolist(), "clip_at": cap, "clipped_counts": np.minimum(counts, cap).tolist()}


def probability_histograms(teacher: ModelParams, student: ModelParams, ds, tau: float = 4.0, bins: int = 64) -> dict:
    """Softened teacher/student probabilities on ``ds`` binned over [0, 1].

    Probabilities on the ground-truth class are the positives; all other
    classes are negatives.
    """
    out: dict[str, Any] = {"tau": tau, "bins": bins, "bin_edges": np.linspace(0.0, 1.0, bins + 1).tolist()}
    for name, params in (("teacher", teacher), ("student", student)):
        logits = _logits(params, ds.features).data
        if logits.ndim == 4:
            logits = logits.transpose(0, 2, 3, 1).reshape(-1, logits.shape[1])
        labels = ds.labels.reshape(-1)
        p = ad.softmax_tau_array(logits, tau, axis=1)
        pos = np.zeros_like(p, dtype=bool)
        pos[np.arange(len(labels)), labels] = True
        out[name] = {"positive": _hist(p[pos], bins), "negative": _hist(p[~pos], bins)}
    return out
