"""``bddlab`` command line: gradcheck, properties, distill, sweep, gen-data, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import checks
from .config import ExperimentConfig, load_config
from .data import load_dataset, save_dataset
from .models import load_checkpoint, save_checkpoint
from .train import (
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    ConfigError,
    TrainingDiverged,
    Variant,
    distill_student,
    evaluate_miou,
    evaluate_top1,
    paired_deltas,
    probability_histograms,
    run_seed_sweep,
    summarize,
    sweep_rows,
    to_csv,
    train_teacher,
)

log = logging.getLogger("bddlab")

ALPHA_GRID = (0.0, 1.0, 2.0, 4.0, 8.0)
TAU_GRID = ((2.0, 8.0), (4.0, 4.0), (8.0, 2.0))


def baseline_variants(mode: str = "bdd") -> list[Variant]:
    if mode == "bdd_seg":
        return [Variant("ce", "ce"), Variant("bdd_seg", "bdd_seg")]
    return [Variant("ce", "ce"), Variant("kd", "kd"), Variant("bdd", "bdd")]


def alpha_variants() -> list[Variant]:
    # both temperatures pinned to 4 so alpha=0 is exactly classic KD at tau=4
    return [Variant.of(f"alpha={a:g}", "bdd", alpha=a, tau_f=4.0, tau_r=4.0) for a in ALPHA_GRID]


def tau_variants(alpha: float = 4.0) -> list[Variant]:
    out = [Variant.of(f"tau={tf:g},{tr:g}", "bdd", alpha=alpha, tau_f=tf, tau_r=tr) for tf, tr in TAU_GRID]
    out.append(Variant.of("accumulate", "bdd_accum", alpha=alpha))
    return out


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    train = cfg.train
    if getattr(args, "mode", None):
        train = train.with_(mode=args.mode)
    if getattr(args, "no_timing", False):
        train = train.with_(record_wall_time=False)
    seeds = _parse_seeds(getattr(args, "seeds", None))
    return replace(cfg, train=train, seeds=tuple(seeds) if seeds else cfg.seeds)


def cmd_gradcheck(args) -> int:
    report = checks.gradcheck(args.trials, args.seed, corrupt=args.corrupt_gradient)
    for name, entry in report["losses"].items():
        status = "ok  " if entry["passed"] else "FAIL"
        print(f"{status} {name:<22s} max rel err {entry['max_rel_err']:.3e}")
    if args.out:
        _write(_out_dir(args.out) / "gradcheck.json", json.dumps(report, indent=2, sort_keys=True))
    elif not report["passed"]:
        bad = {k: v["offending_input"] for k, v in report["losses"].items() if not v["passed"]}
        print(json.dumps(bad), file=sys.stderr)
    return 0 if report["passed"] else 1


def cmd_properties(args) -> int:
    eps = 0.0 if args.zero_epsilon else 1e-12
    results = checks.run_properties(eps)
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:<22s} measured {r.measured:.3e} (threshold {r.threshold:.1e}) {r.detail}")
    ok = all(r.passed for r in results)
    if args.out:
        payload = {"passed": ok, "epsilon": eps, "properties": [r.to_dict() for r in results]}
        _write(_out_dir(args.out) / "properties.json", json.dumps(payload, indent=2, sort_keys=True))
    return 0 if ok else 1


def _teacher(cfg: ExperimentConfig, data, out: Path):
    path = out / "teacher.npz"
    if path.exists():
        teacher = load_checkpoint(path)
        if teacher.layer_widths != cfg.train.teacher_widths:
            raise ConfigError(f"existing {path} has widths {teacher.layer_widths}, config wants {cfg.train.teacher_widths}")
        log.info("loaded teacher from %s", path)
        return teacher, None
    teacher, report = train_teacher(cfg.train, data)
    save_checkpoint(teacher, path)
    _write(out / "teacher_metrics.json", report.to_json())
    return teacher, report


def cmd_distill(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    train_cfg = cfg.train.with_(seed=cfg.seeds[0])
    data = cfg.data.build()
    teacher, _ = _teacher(replace(cfg, train=train_cfg), data, out)
    student, report = distill_student(train_cfg, teacher, data)
    save_checkpoint(student, out / "student.npz")
    _write(out / "metrics.json", report.to_json())
    hist = probability_histograms(teacher, student, data[1], tau=4.0)
    _write(out / "histograms.json", json.dumps(hist, sort_keys=True))
    print(f"{report.mode} seed {report.seed}: val {report.metric} {report.final_metric:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    data = cfg.data.build()
    teacher, _ = _teacher(cfg, data, out)
    grids = {
        "baseline": baseline_variants(cfg.train.mode),
        "alpha": alpha_variants(),
        "tau": tau_variants(cfg.train.distill.alpha),
    }
    if cfg.data.task == "segmentation":
        grids = {"baseline": grids["baseline"]}
    elif args.grid != "all":
        grids = {args.grid: grids[args.grid]}
    for name, variants in grids.items():
        reports = run_seed_sweep(cfg.train, list(cfg.seeds), variants, data=data, teacher=teacher)
        _write(out / f"sweep_{name}.csv", to_csv(sweep_rows(reports), SWEEP_COLUMNS))
        summary = summarize(reports)
        _write(out / f"sweep_{name}_summary.csv", to_csv(summary, SUMMARY_COLUMNS))
        labels = [v.label for v in variants]
        deltas = paired_deltas(reports, labels)
        _write(out / f"sweep_{name}_deltas.csv", to_csv(deltas, list(deltas[0])))
        for row in summary:
            print(f"{name:<8s} {row['label']:<14s} mean {row['mean']:.4f} std {row['std']:.4f} (n={row['n_seeds']})")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    train, val = cfg.data.build()
    save_dataset(train, out / "train.npz")
    save_dataset(val, out / "val.npz")
    print(f"{cfg.data.task}: {len(train)} train / {len(val)} val samples in {out}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "student.npz"
    params = load_checkpoint(ckpt)
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds = _load(args).data.build()[1]
    if ds.features.ndim == 4:
        result = {"metric": "miou", "value": evaluate_miou(params, ds)}
    else:
        result = {"metric": "top1", "value": evaluate_top1(params, ds)}
    result.update(checkpoint=str(ckpt), n=len(ds))
    print(json.dumps(result, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bddlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="backward() vs central differences for every loss")
    g.add_argument("--trials", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)
    g.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("properties", help="run the divergence and engine invariant suite")
    pr.add_argument("--out", default=None)
    pr.add_argument("--zero-epsilon", action="store_true", help=argparse.SUPPRESS)
    pr.set_defaults(func=cmd_properties)

    def experiment(name, func, help_, out_required=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="YAML experiment file (defaults apply if omitted)")
        sp.add_argument("--out", required=out_required, default=".")
        sp.add_argument("--seeds", default=None, help="comma list or lo-hi range")
        sp.add_argument("--mode", default=None, choices=("ce", "kd", "bdd", "bdd_accum", "bdd_seg"))
        sp.add_argument("--no-timing", action="store_true", help="write wall_time_s as 0 for byte-stable output")
        sp.set_defaults(func=func)
        return sp

    experiment("distill", cmd_distill, "train/load teacher, distill a student, write artifacts")
    sw = experiment("sweep", cmd_sweep, "ablation grids over alpha and temperatures")
    sw.add_argument("--grid", default="all", choices=("all", "alpha", "tau", "baseline"))
    experiment("gen-data", cmd_gen_data, "write the configured train/val split to disk")
    ev = experiment("eval", cmd_eval, "evaluate a checkpoint", out_required=False)
    ev.add_argument("--checkpoint", default=None)
    ev.add_argument("--data", default=None, help="dataset file written by gen-data")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
