import csv
import json
from pathlib import Path

import pytest

from bddlab.cli import main
from bddlab.config import dump_config, load_config, parse_config
from bddlab.models import count_params
from bddlab.train import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """
data:
  num_classes: 4
  dim: 6
  n_per_class: 40
  separation: 5.0
train:
  epochs: 2
  teacher_epochs: 3
  batch_size: 32
  teacher_widths: [6, 16, 4]
  student_widths: [6, 4, 4]
  student_per_class: 10
sweep:
  seeds: [0, 1]
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def test_bundled_configs_load_and_keep_capacity_gap():
    for path in sorted(CONFIGS.glob("*.yaml")):
        cfg = load_config(path)
        from bddlab.models import MLPSpec

        assert count_params(MLPSpec(cfg.train.teacher_widths)) > count_params(MLPSpec(cfg.train.student_widths)), path


def test_segmentation_config_defaults():
    cfg = load_config(CONFIGS / "segmentation.yaml")
    assert cfg.train.mode == "bdd_seg"
    assert cfg.train.distill.beta == 3.0 and cfg.train.distill.normalize_by_classes


def test_config_roundtrip():
    cfg = load_config(CONFIGS / "classification.yaml")
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("train:\n  lr: abc\n", r"line 2: field train.lr"),
        ("train:\n  epochs: 3\n  bogus: 1\n", r"line 3: field train.bogus: unknown"),
        ("model:\n  x: 1\n", r"line 1: unknown section 'model'"),
        ("train: [1, 2\n", r"line \d+, column \d+: malformed YAML"),
        ("distill:\n  alpha: -1\n", r"section 'distill'.*alpha"),
        ("sweep:\n  seeds: []\n", r"sweep.seeds"),
    ],
)
def test_config_errors_name_line_and_field(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_gradcheck_cli(tmp_path, capsys):
    assert main(["gradcheck", "--trials", "2", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["gradcheck", "--trials", "2", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "gradcheck.json").read_text()
    assert a == (tmp_path / "b" / "gradcheck.json").read_text()
    out = capsys.readouterr().out
    assert "bdd_seg_loss" in out and "max rel err" in out


def test_gradcheck_fault_injection(tmp_path, capsys):
    assert main(["gradcheck", "--trials", "1", "--corrupt-gradient"]) == 1
    assert "offending" not in capsys.readouterr().out
    assert main(["gradcheck", "--trials", "1", "--corrupt-gradient", "--out", str(tmp_path)]) == 1
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert not report["passed"]
    assert "offending_input" in report["losses"]["bdd_loss"]


def test_properties_cli(tmp_path, capsys):
    assert main(["properties", "--out", str(tmp_path)]) == 0
    payload = json.loads((tmp_path / "properties.json").read_text())
    names = {p["name"] for p in payload["properties"]}
    assert {"nonnegativity", "identity", "asymmetry", "zero_avoiding", "channel_equivalence", "argmax_invariance", "determinism"} <= names
    assert all("measured" in p for p in payload["properties"])


def test_properties_zero_epsilon_hook(tmp_path):
    assert main(["properties", "--zero-epsilon", "--out", str(tmp_path)]) == 1
    results = {p["name"]: p["passed"] for p in json.loads((tmp_path / "properties.json").read_text())["properties"]}
    assert results["zero_avoiding"] is True
    assert results["log_domain_guard"] is False


def test_distill_artifacts_and_determinism(tiny, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["distill", "--config", str(tiny), "--out", str(out1), "--no-timing"]) == 0
    for name in ("teacher.npz", "student.npz", "metrics.json", "histograms.json"):
        assert (out1 / name).exists()
    hist = json.loads((out1 / "histograms.json").read_text())
    assert hist["bins"] == 64 and set(hist["teacher"]) == {"positive", "negative"}
    # rerun reuses the saved teacher
    assert main(["distill", "--config", str(tiny), "--out", str(out1), "--no-timing"]) == 0
    assert main(["distill", "--config", str(tiny), "--out", str(out2), "--no-timing"]) == 0
    assert (out1 / "metrics.json").read_bytes() == (out2 / "metrics.json").read_bytes()


def test_distill_kd_then_eval(tiny, tmp_path, capsys):
    out = tmp_path / "kd"
    assert main(["distill", "--config", str(tiny), "--out", str(out), "--mode", "kd", "--no-timing"]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["mode"] == "kd"
    capsys.readouterr()
    assert main(["eval", "--config", str(tiny), "--out", str(out)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["value"] == metrics["final"]["val_top1"]


def test_gen_data_then_eval_from_file(tiny, tmp_path, capsys):
    assert main(["gen-data", "--config", str(tiny), "--out", str(tmp_path)]) == 0
    assert main(["distill", "--config", str(tiny), "--out", str(tmp_path), "--no-timing"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "student.npz"), "--data", str(tmp_path / "val.npz")]) == 0
    result = json.loads(capsys.readouterr().out)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert result["value"] == metrics["final"]["val_top1"]


def test_sweep_cli_grids(tiny, tmp_path):
    assert main(["sweep", "--config", str(tiny), "--out", str(tmp_path), "--no-timing", "--seeds", "0-1"]) == 0
    for grid, per_seed in (("baseline", 3), ("alpha", 5), ("tau", 4)):
        with open(tmp_path / f"sweep_{grid}.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * per_seed
        assert list(rows[0]) == ["seed", "mode", "alpha", "tau_f", "tau_r", "beta", "final_top1_or_miou", "wall_time_s"]


def test_malformed_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochs: zero\n")
    assert main(["distill", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit):
        main(["distill", "--bogus"])
