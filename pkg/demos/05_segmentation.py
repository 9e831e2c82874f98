"""
Channel-wise distillation on toy segmentation grids
===================================================

Each grid cell carries a noisy feature vector whose mean depends on the
cell's class. A per-cell MLP gives dense logits. The segmentation loss
turns each channel's logit map into a spatial distribution and matches
those between teacher and student.
"""

import numpy as np

from bddlab.autodiff import Tensor
from bddlab.losses import DistillConfig, LogitBatch, bdd_seg_loss, per_channel_oracle
from bddlab.train import DataConfig, TrainConfig, distill_student, train_student_ce, train_teacher

###############################################################################
# The vectorized loss against a loop that handles one channel at a time.

rng = np.random.default_rng(1)
s, t = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 4, 3, 3))
cfg = DistillConfig.segmentation_defaults()
print("vectorized", bdd_seg_loss(LogitBatch(Tensor(s), Tensor(t)), cfg).item())
print("loop      ", per_channel_oracle(s, t, cfg))

###############################################################################
# A short training run, scored by mean IoU.

data = DataConfig(task="segmentation", num_classes=4, dim=8, n_grids=200).build()
train_cfg = TrainConfig(
    mode="bdd_seg",
    epochs=5,
    teacher_epochs=5,
    batch_size=16,
    teacher_widths=(8, 64, 64, 4),
    student_widths=(8, 4, 4),
    distill=cfg,
    record_wall_time=False,
)
teacher, trep = train_teacher(train_cfg, data)
_, ce = train_student_ce(train_cfg, data)
_, seg = distill_student(train_cfg, teacher, data)
print(f"teacher mIoU {trep.final_metric:.3f}  ce {ce.final_metric:.3f}  bdd_seg {seg.final_metric:.3f}")
