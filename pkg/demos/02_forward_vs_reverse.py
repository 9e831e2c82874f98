"""
Forward and reverse KL disagree
===============================

Forward KL weights each class by the teacher's probability. Reverse KL
weights it by the student's. A class the teacher considers nearly
impossible therefore barely matters to forward KL, while reverse KL
still pushes on it.
"""

import numpy as np

from bddlab.autodiff import Tensor, softmax_tau_array
from bddlab.losses import LogitBatch, forward_kl, reverse_kl, zero_avoiding_gradients

student = Tensor([[0.0, 0.0]])
teacher = Tensor([[2.0, 0.0]])
pair = LogitBatch(student, teacher)
print("forward KL(pT || pS):", forward_kl(pair, 1.0).item())
print("reverse KL(pS || pT):", reverse_kl(pair, 1.0).item())

###############################################################################
# Raising the temperature flattens both distributions and shrinks the gap.

for tau in (1.0, 2.0, 4.0, 8.0):
    print(f"tau={tau:<4} forward {forward_kl(pair, tau).item():.5f}  reverse {reverse_kl(pair, tau).item():.5f}")

###############################################################################
# A teacher that rules class 2 out almost entirely, against a uniform student.
# Gradients are taken with respect to the student's log-probabilities.

t = np.array([0.0, 0.0, -20.0])
print("teacher probs", softmax_tau_array(t, 1.0))
fwd, rev = zero_avoiding_gradients(t, np.zeros(3), tau=1.0)
print("forward grad", fwd)
print("reverse grad", rev)
print("ratio on class 2: %.3e" % (abs(rev[2]) / abs(fwd[2])))
