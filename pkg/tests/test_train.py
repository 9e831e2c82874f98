import json

import numpy as np
import pytest

from bddlab.data import ClassificationDataset
from bddlab.losses import DistillConfig
from bddlab.models import MLPSpec, init_params
from bddlab.train import (
    ConfigError,
    DataConfig,
    TrainConfig,
    TrainingDiverged,
    Variant,
    confusion_matrix,
    distill_student,
    evaluate_logits_top1,
    evaluate_miou,
    evaluate_miou_from_predictions,
    evaluate_top1,
    paired_deltas,
    probability_histograms,
    run_seed_sweep,
    summarize,
    sweep_rows,
    to_csv,
    SWEEP_COLUMNS,
    train_student_ce,
    train_teacher,
)

SMALL_DATA = DataConfig(num_classes=4, dim=6, n_per_class=60, separation=5.0)
SMALL = TrainConfig(
    epochs=4,
    teacher_epochs=6,
    batch_size=32,
    teacher_widths=(6, 32, 4),
    student_widths=(6, 5, 4),
    student_per_class=15,
    record_wall_time=False,
)


@pytest.fixture(scope="module")
def data():
    return SMALL_DATA.build()


@pytest.fixture(scope="module")
def teacher(data):
    params, _ = train_teacher(SMALL, data)
    return params


# ---------------------------------------------------------------- evaluation


def test_top1_examples():
    labels = np.tile(np.arange(10), 7)
    assert evaluate_logits_top1(10 * np.eye(10)[labels], labels) == 1.0
    assert evaluate_logits_top1(np.zeros((70, 10)), labels) == pytest.approx(0.1)


def test_top1_counts_like_brute_force(rng, data, teacher):
    train, val = data
    shuffled = ClassificationDataset(val.features, rng.permutation(val.labels), val.num_classes, 0)
    from bddlab.train import _logits

    logits = _logits(teacher, shuffled.features).data
    hits = 0
    for row, y in zip(logits, shuffled.labels):
        best = 0
        for c in range(len(row)):
            if row[c] > row[best]:
                best = c
        hits += best == y
    assert evaluate_top1(teacher, shuffled) == hits / len(shuffled)


def test_miou_examples():
    gt = np.zeros((3, 4, 4), dtype=int)
    gt[:, :, 2:] = 1
    assert evaluate_miou_from_predictions(gt, gt, 2) == 1.0
    # class 0: TP=24, FP=24, FN=0 -> 0.5; class 1: TP=0 -> 0
    assert evaluate_miou_from_predictions(np.zeros_like(gt), gt, 2) == pytest.approx(0.25)
    assert evaluate_miou_from_predictions(np.full_like(gt, 2), gt, 3) == 0.0


def test_miou_matches_counting_oracle(rng):
    gt = rng.integers(0, 5, (4, 6, 6))
    pred = rng.integers(0, 4, (4, 6, 6))
    ious = []
    for c in range(5):
        inter = np.sum((pred == c) & (gt == c))
        union = np.sum((pred == c) | (gt == c))
        if union:
            ious.append(inter / union)
    assert evaluate_miou_from_predictions(pred, gt, 5) == pytest.approx(np.mean(ious), abs=1e-15)
    assert confusion_matrix(pred, gt, 5).sum() == gt.size


# ---------------------------------------------------------------- teacher


def test_teacher_learns_and_is_frozen(data):
    params, rep = train_teacher(SMALL, data)
    assert all(not t.requires_grad for t in params.tensors())
    assert rep.final["val_top1"] > 0.8
    assert len(rep.epochs) == SMALL.teacher_epochs
    assert rep.epochs[-1]["train_loss"] < rep.initial["train_loss"]


def test_teacher_zero_lr_is_identity(data):
    cfg = SMALL.with_(lr=0.0, teacher_epochs=2)
    params, rep = train_teacher(cfg, data)
    assert params.equals(init_params(cfg.teacher_spec()))
    assert rep.final["val_top1"] == rep.initial["val_top1"]


def test_teacher_deterministic(data):
    a = train_teacher(SMALL, data)
    b = train_teacher(SMALL, data)
    assert a[0].equals(b[0])
    assert a[1].to_json() == b[1].to_json()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(data):
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_teacher(SMALL.with_(lr=1e8, momentum=0.0), data)


# ---------------------------------------------------------------- distillation


def test_kd_equals_bdd_alpha_zero(data, teacher):
    kd_cfg = SMALL.with_(mode="kd", distill=DistillConfig(kd_tau=4.0))
    bdd_cfg = SMALL.with_(mode="bdd", distill=DistillConfig(alpha=0.0, tau_f=4.0, tau_r=4.0))
    _, a = distill_student(kd_cfg, teacher, data)
    _, b = distill_student(bdd_cfg, teacher, data)
    la = [e["train_loss"] for e in a.epochs]
    lb = [e["train_loss"] for e in b.epochs]
    assert np.max(np.abs(np.subtract(la, lb))) <= 1e-12
    assert a.final_metric == b.final_metric


def test_beta_zero_matches_ce_student(data, teacher):
    _, ce = train_student_ce(SMALL, data)
    _, distilled = distill_student(SMALL.with_(mode="bdd", distill=DistillConfig(beta=0.0)), teacher, data)
    assert distilled.epochs == ce.epochs
    assert distilled.initial == ce.initial


def test_teacher_untouched_by_distillation(data, teacher):
    before = teacher.copy()
    for mode in ("kd", "bdd", "bdd_accum"):
        distill_student(SMALL.with_(mode=mode), teacher, data)
    assert teacher.equals(before)


@pytest.mark.parametrize("mode", ["ce", "kd", "bdd", "bdd_accum"])
def test_loss_trace_sane(data, teacher, mode):
    _, rep = distill_student(SMALL.with_(mode=mode, epochs=6), teacher, data)
    losses = [e["train_loss"] for e in rep.epochs]
    assert np.all(np.isfinite(losses))
    assert losses[-1] < rep.initial["train_loss"]
    assert 0.0 <= rep.final_metric <= 1.0
    assert len(rep.epochs) == 6


def test_class_count_mismatch(data, teacher):
    with pytest.raises(ConfigError, match="classes"):
        distill_student(SMALL.with_(student_widths=(6, 5, 3)), teacher, data)


def test_unfrozen_teacher_rejected(data):
    with pytest.raises(ConfigError, match="frozen"):
        distill_student(SMALL, init_params(MLPSpec((6, 4))), data)


def test_config_validation():
    for kw in (dict(epochs=0), dict(batch_size=0), dict(lr=-1.0), dict(mode="dkd")):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_segmentation_distillation_runs():
    seg = DataConfig(task="segmentation", num_classes=3, dim=4, height=4, width=4, n_grids=20).build()
    cfg = TrainConfig(
        mode="bdd_seg",
        epochs=3,
        teacher_epochs=3,
        batch_size=4,
        teacher_widths=(4, 16, 3),
        student_widths=(4, 3),
        distill=DistillConfig.segmentation_defaults(),
        record_wall_time=False,
    )
    teacher, trep = train_teacher(cfg, seg)
    assert trep.metric == "miou"
    student, rep = distill_student(cfg, teacher, seg)
    assert 0.0 <= rep.final_metric <= 1.0
    assert rep.final_metric == evaluate_miou(student, seg[1])
    with pytest.raises(ConfigError):
        distill_student(cfg.with_(mode="bdd"), teacher, seg)


# ---------------------------------------------------------------- sweeps


def test_sweep_single(data, teacher):
    reps = run_seed_sweep(SMALL, [3], ["bdd"], data=data, teacher=teacher)
    assert len(reps) == 1 and reps[0].seed == 3 and reps[0].mode == "bdd"


def test_sweep_pairing(data, teacher):
    reps = run_seed_sweep(SMALL, [0, 1], ["ce", "kd", "bdd"], data=data, teacher=teacher)
    assert [(r.seed, r.mode) for r in reps] == [(s, m) for s in (0, 1) for m in ("ce", "kd", "bdd")]
    for seed in (0, 1):
        group = [r for r in reps if r.seed == seed]
        # same init and same first batch -> same initial accuracy and CE on the transfer set
        assert len({r.initial["train_ce"] for r in group}) == 1
        assert len({r.initial["val_top1"] for r in group}) == 1
    deltas = paired_deltas(reps, ["ce", "kd", "bdd"])
    assert [d["seed"] for d in deltas] == [0, 1]
    assert deltas[0]["bdd_minus_kd"] == deltas[0]["bdd"] - deltas[0]["kd"]
    summary = summarize(reps)
    assert [s["label"] for s in summary] == ["ce", "kd", "bdd"]


def test_sweep_parallel_matches_serial(data, teacher):
    variants = [Variant.of("a0", "bdd", alpha=0.0), Variant.of("a4", "bdd", alpha=4.0)]
    serial = run_seed_sweep(SMALL, [0, 1, 2], variants, data=data, teacher=teacher, threads=1)
    parallel = run_seed_sweep(SMALL, [0, 1, 2], variants, data=data, teacher=teacher, threads=3)
    assert [r.to_json() for r in serial] == [r.to_json() for r in parallel]


def test_sweep_csv_columns(data, teacher):
    reps = run_seed_sweep(SMALL, [0], ["kd", "bdd"], data=data, teacher=teacher)
    text = to_csv(sweep_rows(reps), SWEEP_COLUMNS)
    header, *rows = text.strip().split("\n")
    assert header == "seed,mode,alpha,tau_f,tau_r,beta,final_top1_or_miou,wall_time_s"
    assert rows[0].startswith("0,kd,0.0,4.0,4.0,1.0,")


def test_report_json_is_well_formed(data, teacher):
    _, rep = distill_student(SMALL, teacher, data)
    back = json.loads(rep.to_json())
    assert back["seed"] == SMALL.seed and back["metric"] == "top1"
    assert back["config"]["distill"]["alpha"] == 4.0
    assert back["wall_time_s"] == 0.0


def test_histograms(data, teacher):
    student, _ = distill_student(SMALL, teacher, data)
    h = probability_histograms(teacher, student, data[1], tau=4.0, bins=64)
    assert len(h["bin_edges"]) == 65
    n = len(data[1])
    for who in ("teacher", "student"):
        assert sum(h[who]["positive"]["counts"]) == n
        assert sum(h[who]["negative"]["counts"]) == n * 3
        clipped = h[who]["negative"]["clipped_counts"]
        assert max(clipped) == h[who]["negative"]["clip_at"]
