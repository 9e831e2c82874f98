"""Gradient checks and invariant suites driven by the command line."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import (
    DistillConfig,
    LogitBatch,
    bdd_loss,
    bdd_loss_accumulated,
    bdd_seg_loss,
    cross_entropy,
    forward_kl,
    overall_loss,
    per_channel_oracle,
    reverse_kl,
    zero_avoiding_gradients,
)

GRAD_TOL = 1e-6
FD_STEP = 1e-5
DEFAULT_CFG = DistillConfig(alpha=4.0, tau_f=2.0, tau_r=8.0)


def _loss_table(cfg: DistillConfig) -> dict[str, tuple[tuple[int, ...], Callable[[Tensor, Tensor], Tensor]]]:
    """name -> (logit shape, loss(student, teacher))."""
    labels = np.array([0, 3, 7, 9])
    return {
        "forward_kl": ((4, 10), lambda s, t: forward_kl(LogitBatch(s, t), 2.0, cfg.epsilon)),
        "reverse_kl": ((4, 10), lambda s, t: reverse_kl(LogitBatch(s, t), 2.0, cfg.epsilon)),
        "bdd_loss": ((4, 10), lambda s, t: bdd_loss(LogitBatch(s, t), cfg)),
        "bdd_loss_accumulated": ((4, 10), lambda s, t: bdd_loss_accumulated(LogitBatch(s, t), cfg)),
        "bdd_seg_loss": ((2, 4, 3, 3), lambda s, t: bdd_seg_loss(LogitBatch(s, t), cfg)),
        "cross_entropy": ((4, 10), lambda s, t: cross_entropy(s, labels)),
        "overall_loss": ((4, 10), lambda s, t: overall_loss(LogitBatch(s, t), labels, cfg)),
    }


def random_logits(rng: np.random.Generator, shape, scale: float = 3.0) -> np.ndarray:
    return scale * rng.standard_normal(shape)


def check_gradient(loss_fn, student: np.ndarray, teacher: np.ndarray, corrupt: bool = False) -> float:
    """Relative error between backward() and central differences for one input."""
    s = Tensor(student.copy(), requires_grad=True)
    t = Tensor(teacher)
    ad.backward(loss_fn(s, t))
    analytic = s.grad
    if corrupt:
        analytic = analytic * 1.001
    numeric = ad.finite_difference_gradient(lambda x: loss_fn(Tensor(x), t).item(), student, FD_STEP)
    return ad.relative_error(analytic, numeric)


def gradcheck(n_trials: int = 50, seed: int = 0, cfg: DistillConfig = DEFAULT_CFG, corrupt: bool = False) -> dict:
    """Backward vs finite differences for every loss over ``n_trials`` seeded inputs each."""
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    report: dict = {"n_trials": n_trials, "seed": seed, "tolerance": GRAD_TOL, "losses": {}, "passed": True}
    for name, (shape, fn) in _loss_table(cfg).items():
        rng = np.random.default_rng([seed, len(name)] + [ord(c) for c in name])
        worst, worst_input = 0.0, None
        for _ in range(n_trials):
            student = random_logits(rng, shape)
            teacher = random_logits(rng, shape)
            err = check_gradient(fn, student, teacher, corrupt)
            if err > worst or worst_input is None:
                worst, worst_input = err, (student, teacher)
        entry = {"max_rel_err": worst, "passed": worst < GRAD_TOL}
        if not entry["passed"]:
            entry["offending_input"] = {"student": worst_input[0].tolist(), "teacher": worst_input[1].tolist()}
            report["passed"] = False
        report["losses"][name] = entry
    return report


# --------------------------------------------------------------------------
# invariants


@dataclass
class PropertyResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _value(fn, s, t, *args) -> float:
    return fn(LogitBatch(Tensor(s), Tensor(t)), *args).item()


def prop_nonnegativity(eps: float, n: int = 1000, seed: int = 1) -> PropertyResult:
    rng = np.random.default_rng(seed)
    lo = np.inf
    for _ in range(n):
        c = int(rng.integers(2, 12))
        s, t = random_logits(rng, (1, c)), random_logits(rng, (1, c))
        tau = float(rng.uniform(0.5, 8.0))
        lo = min(lo, _value(forward_kl, s, t, tau, eps), _value(reverse_kl, s, t, tau, eps))
    return PropertyResult("nonnegativity", bool(lo >= -1e-10), float(lo), -1e-10, "min divergence over random pairs")


def prop_identity(eps: float, seed: int = 2) -> PropertyResult:
    rng = np.random.default_rng(seed)
    hi = 0.0
    for _ in range(100):
        z = random_logits(rng, (3, 10))
        hi = max(hi, abs(_value(forward_kl, z, z, 2.0, eps)), abs(_value(reverse_kl, z, z, 2.0, eps)))
    return PropertyResult("identity", hi < 1e-12, hi, 1e-12, "max KL(p||p), both directions")


def prop_asymmetry(eps: float) -> PropertyResult:
    s, t = np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]])
    gap = abs(_value(forward_kl, s, t, 1.0, eps) - _value(reverse_kl, s, t, 1.0, eps))
    return PropertyResult("asymmetry", gap > 0.1, gap, 0.1, "|forward - reverse| on teacher [2,0], student [0,0]")


def prop_zero_avoiding(eps: float) -> PropertyResult:
    t = np.array([0.0, 0.0, -20.0])
    fwd, rev = zero_avoiding_gradients(t, np.zeros(3), 1.0, eps)
    p_t = ad.softmax_tau_array(t, 1.0)[2]
    ratio = abs(rev[2]) / abs(fwd[2])
    ok = abs(fwd[2]) <= 2 * p_t + 1e-9 and abs(rev[2]) > 1e-2 and ratio > 1e3
    return PropertyResult(
        "zero_avoiding", bool(ok), float(ratio), 1e3, f"|d fwd|={abs(fwd[2]):.3e}, |d rev|={abs(rev[2]):.3e} on class 2"
    )


def prop_channel_equivalence(eps: float, seed: int = 3) -> PropertyResult:
    rng = np.random.default_rng(seed)
    cfg = DEFAULT_CFG.with_(epsilon=eps) if eps > 0 else DistillConfig.unchecked(alpha=4.0, tau_f=2.0, tau_r=8.0, epsilon=eps)
    worst = 0.0
    for _ in range(20):
        s, t = random_logits(rng, (2, 4, 3, 3)), random_logits(rng, (2, 4, 3, 3))
        got = _value(bdd_seg_loss, s, t, cfg)
        worst = max(worst, abs(got - per_channel_oracle(s, t, cfg)))
    return PropertyResult("channel_equivalence", worst < 1e-10, worst, 1e-10, "bdd_seg_loss vs per-channel loop")


def prop_argmax_invariance(seed: int = 4) -> PropertyResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(500):
        z = random_logits(rng, (10,))
        tau = float(np.exp(rng.uniform(np.log(0.05), np.log(50.0))))
        bad += int(np.argmax(ad.softmax_tau_array(z, tau)) != np.argmax(z))
    return PropertyResult("argmax_invariance", bad == 0, float(bad), 0.0, "argmax changes under temperature")


def prop_simplex(seed: int = 5) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    inside = True
    for _ in range(200):
        p = ad.softmax_tau_array(random_logits(rng, (8, 10)), float(rng.uniform(0.5, 8.0)), axis=1)
        worst = max(worst, float(np.abs(p.sum(axis=1) - 1.0).max()))
        inside &= bool(np.all((p > 0) & (p < 1)))
    return PropertyResult("softmax_simplex", worst < 1e-12 and inside, worst, 1e-12, "max |row sum - 1|")


def prop_log_guard(eps: float) -> PropertyResult:
    """Losses stay finite when softened probabilities underflow to exactly zero."""
    cfg = DEFAULT_CFG.with_(epsilon=eps) if eps > 0 else DistillConfig.unchecked(alpha=4.0, tau_f=2.0, tau_r=8.0, epsilon=eps)
    t = np.array([[0.0, -5000.0, -9000.0]])
    s = np.array([[-9000.0, 0.0, -5000.0]])
    with np.errstate(all="ignore"):
        vals = [
            _value(forward_kl, s, t, 1.0, eps),
            _value(reverse_kl, s, t, 1.0, eps),
            _value(bdd_loss, s, t, cfg),
        ]
    worst = float(np.max(np.abs(vals))) if np.all(np.isfinite(vals)) else float("inf")
    return PropertyResult("log_domain_guard", bool(np.isfinite(worst)), worst, float("inf"), "losses on underflowing logits")


def prop_teacher_opacity(eps: float, seed: int = 6) -> PropertyResult:
    rng = np.random.default_rng(seed)
    cfg = DEFAULT_CFG.with_(epsilon=eps) if eps > 0 else DistillConfig.unchecked(alpha=4.0, tau_f=2.0, tau_r=8.0, epsilon=eps)
    leaks = 0
    for fn in (bdd_loss, bdd_loss_accumulated):
        s = Tensor(random_logits(rng, (4, 10)), requires_grad=True)
        t = Tensor(random_logits(rng, (4, 10)))
        ad.backward(fn(LogitBatch(s, t), cfg))
        leaks += int(t.grad is not None)
    return PropertyResult("teacher_opacity", leaks == 0, float(leaks), 0.0, "teacher tensors holding a gradient")


def prop_composition(seed: int = 7) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        cfg = DistillConfig(
            alpha=float(rng.uniform(0, 8)), tau_f=float(rng.uniform(0.5, 8)), tau_r=float(rng.uniform(0.5, 8))
        )
        s, t = random_logits(rng, (4, 10)), random_logits(rng, (4, 10))
        composed = _value(forward_kl, s, t, cfg.tau_f, cfg.epsilon) + cfg.alpha * _value(
            reverse_kl, s, t, cfg.tau_r, cfg.epsilon
        )
        worst = max(worst, abs(_value(bdd_loss, s, t, cfg) - composed))
    return PropertyResult("composition", worst == 0.0, worst, 0.0, "bdd_loss - (forward + alpha * reverse)")


def prop_temperature_softening(eps: float) -> PropertyResult:
    s, t = np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]])
    hot, cold = _value(forward_kl, s, t, 2.0, eps), _value(forward_kl, s, t, 1.0, eps)
    return PropertyResult("temperature_softening", hot < cold, cold - hot, 0.0, "KL at tau=1 minus KL at tau=2")


def prop_determinism() -> PropertyResult:
    from .data import gen_gaussian_mixture, train_val_split
    from .train import TrainConfig, distill_student, train_teacher

    data = train_val_split(gen_gaussian_mixture(4, 4, 30, 0.6, seed=0), 0.8, 0)
    cfg = TrainConfig(epochs=2, teacher_epochs=2, teacher_widths=(4, 8, 4), student_widths=(4, 4), record_wall_time=False)
    runs = []
    for _ in range(2):
        teacher, _ = train_teacher(cfg, data)
        student, rep = distill_student(cfg, teacher, data)
        runs.append((student, rep.to_json()))
    same = runs[0][0].equals(runs[1][0]) and runs[0][1] == runs[1][1]
    return PropertyResult("determinism", same, float(same), 1.0, "two identical runs, bitwise")


def run_properties(epsilon: float = 1e-12) -> list[PropertyResult]:
    return [
        prop_nonnegativity(epsilon),
        prop_identity(epsilon),
        prop_asymmetry(epsilon),
        prop_zero_avoiding(epsilon),
        prop_channel_equivalence(epsilon),
        prop_argmax_invariance(),
        prop_simplex(),
        prop_log_guard(epsilon),
        prop_teacher_opacity(epsilon),
        prop_composition(),
        prop_temperature_softening(epsilon),
        prop_determinism(),
    ]
