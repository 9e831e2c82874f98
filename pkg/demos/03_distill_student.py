"""
Distilling a small student on a Gaussian mixture
================================================

A wide teacher trains on the full training split. A narrow student sees
only 20 samples per class and borrows the rest of its signal from the
teacher's softened outputs.
"""

import json

from bddlab.losses import DistillConfig
from bddlab.train import DataConfig, TrainConfig, distill_student, train_student_ce, train_teacher

data = DataConfig(num_classes=10, dim=16, n_per_class=500).build()
cfg = TrainConfig(record_wall_time=False)

teacher, teacher_report = train_teacher(cfg, data)
print("teacher val top-1", teacher_report.final["val_top1"])

###############################################################################
# Three students, same seed, same transfer set.

_, ce = train_student_ce(cfg, data)
_, kd = distill_student(cfg.with_(mode="kd"), teacher, data)
_, bdd = distill_student(cfg.with_(mode="bdd", distill=DistillConfig(alpha=4.0, tau_f=2.0, tau_r=8.0)), teacher, data)

for rep in (ce, kd, bdd):
    print(f"{rep.mode:<4s} val top-1 {rep.final_metric:.4f}")

###############################################################################
# Reports serialize to sorted JSON so reruns can be diffed byte for byte.

summary = json.loads(bdd.to_json())
print(sorted(summary))
print(summary["final"])
