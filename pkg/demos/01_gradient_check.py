"""
Checking reverse-mode gradients against finite differences
==========================================================

Every loss in the package is built from a handful of differentiable ops.
Here we push a random batch through one of them, ask the graph for the
gradient, and compare with central differences.
"""

import numpy as np

from bddlab import autodiff as ad
from bddlab.checks import gradcheck
from bddlab.losses import DistillConfig, LogitBatch, bdd_loss

rng = np.random.default_rng(0)
student0 = 3 * rng.standard_normal((4, 10))
teacher = ad.Tensor(3 * rng.standard_normal((4, 10)))
cfg = DistillConfig(alpha=4.0, tau_f=2.0, tau_r=8.0)

###############################################################################
# One backward pass. The teacher is a constant, so only the student
# receives a gradient.

student = ad.Tensor(student0, requires_grad=True)
loss = bdd_loss(LogitBatch(student, teacher), cfg)
ad.backward(loss)
print("loss", loss.item())
print("teacher grad:", teacher.grad)

###############################################################################
# The same gradient by central differences, h = 1e-5.

numeric = ad.finite_difference_gradient(
    lambda x: bdd_loss(LogitBatch(ad.Tensor(x), teacher), cfg).item(), student0, h=1e-5
)
print("relative error", ad.relative_error(student.grad, numeric))

###############################################################################
# The built-in harness repeats this for every loss over many seeded inputs.

report = gradcheck(n_trials=10, seed=0)
for name, entry in report["losses"].items():
    print(f"{name:<22s} {entry['max_rel_err']:.2e}")
