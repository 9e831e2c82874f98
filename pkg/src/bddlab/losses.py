"""Distillation objectives built on the autodiff core.

All divergences take raw logits; softening happens inside. The teacher side
is always treated as a constant, so gradients only ever reach the student.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, ParameterError, Tensor


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of the balanced-divergence objective.

    ``alpha`` weights the reverse term and ``beta`` weights the whole
    distillation term inside :func:`overall_loss`. ``kd_tau`` is only read by
    the classic-KD baseline.
    """

    alpha: float = 4.0
    beta: float = 1.0
    tau_f: float = 2.0
    tau_r: float = 8.0
    tau_set: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    epsilon: float = 1e-12
    normalize_by_classes: bool = False
    tau_square_rescale: bool = False
    kd_tau: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "tau_set", tuple(float(t) for t in self.tau_set))
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError(f"alpha and beta must be >= 0 (alpha={self.alpha}, beta={self.beta})")
        for name in ("tau_f", "tau_r", "kd_tau"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")
        if len(self.tau_set) == 0:
            raise ParameterError("tau_set must not be empty")
        if any(not t > 0 for t in self.tau_set):
            raise ParameterError(f"tau_set entries must be > 0, got {self.tau_set}")
        if not 0 < self.epsilon <= 1e-6:
            raise ParameterError(f"epsilon must lie in (0, 1e-6], got {self.epsilon}")

    def with_(self, **kw) -> DistillConfig:
        return replace(self, **kw)

    @classmethod
    def unchecked(cls, **kw) -> DistillConfig:
        """Build without validation; only for fault-injection checks."""
        obj = object.__new__(cls)
        for f in fields(cls):
            value = kw.pop(f.name, f.default)
            object.__setattr__(obj, f.name, tuple(value) if f.name == "tau_set" else value)
        if kw:
            raise TypeError(f"unknown fields {sorted(kw)}")
        return obj

    @classmethod
    def segmentation_defaults(cls, **kw) -> DistillConfig:
        base = dict(beta=3.0, normalize_by_classes=True)
        base.update(kw)
        return cls(**base)


@dataclass
class LogitBatch:
    """Student and teacher logits of identical shape, [B, C] or [B, C, H, W]."""

    student: Tensor
    teacher: Tensor

    def __post_init__(self):
        self.student = ad.as_tensor(self.student)
        teacher = ad.as_tensor(self.teacher)
        if teacher.requires_grad:
            teacher = teacher.detach()
        self.teacher = teacher
        if self.student.shape != self.teacher.shape:
            raise DimensionError(f"student {self.student.shape} and teacher {self.teacher.shape} shapes differ")

    @property
    def num_classes(self) -> int:
        return self.student.shape[1]


def _floored_log(p: Tensor, epsilon: float) -> Tensor:
    return ad.log(ad.clamp_min(p, epsilon))


def _floored_log_array(p: np.ndarray, epsilon: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.maximum(p, epsilon))


def _per_sample_forward(student: Tensor, teacher: np.ndarray, tau: float, epsilon: float, axis: int) -> Tensor:
    p_t = ad.softmax_tau_array(teacher, tau, axis)
    log_p_t = _floored_log_array(p_t, epsilon)
    log_p_s = _floored_log(ad.softmax_tau(student, tau, axis), epsilon)
    terms = ad.mul(Tensor(p_t), ad.sub(Tensor(log_p_t), log_p_s))
    return ad.sum(terms, axis=axis)


def _per_sample_reverse(student: Tensor, teacher: np.ndarray, tau: float, epsilon: float, axis: int) -> Tensor:
    p_s = ad.softmax_tau(student, tau, axis)
    log_p_t = _floored_log_array(ad.softmax_tau_array(teacher, tau, axis), epsilon)
    terms = ad.mul(p_s, ad.sub(_floored_log(p_s, epsilon), Tensor(log_p_t)))
    return ad.sum(terms, axis=axis)


def _check_2d(pair: LogitBatch) -> None:
    if pair.student.ndim != 2:
        raise DimensionError(f"expected [B, C] logits, got shape {pair.student.shape}")


def forward_kl(pair: LogitBatch, tau: float, epsilon: float = 1e-12) -> Tensor:
    """Batch mean of KL(p_T || p_S) at temperature ``tau``."""
    _check_2d(pair)
    return ad.mean(_per_sample_forward(pair.student, pair.teacher.data, tau, epsilon, axis=1))


def reverse_kl(pair: LogitBatch, tau: float, epsilon: float = 1e-12) -> Tensor:
    """Batch mean of KL(p_S || p_T) at temperature ``tau``."""
    _check_2d(pair)
    return ad.mean(_per_sample_reverse(pair.student, pair.teacher.data, tau, epsilon, axis=1))


def _term_weight(cfg: DistillConfig, tau: float, n_classes: int) -> float:
    w = 1.0
    if cfg.normalize_by_classes:
        w /= n_classes
    if cfg.tau_square_rescale:
        w *= tau * tau
    return w


def _weighted(t: Tensor, w: float) -> Tensor:
    return t if w == 1.0 else ad.scale(t, w)


def bdd_loss(pair: LogitBatch, cfg: DistillConfig) -> Tensor:
    """Forward KL at ``tau_f`` plus ``alpha`` times reverse KL at ``tau_r``."""
    _check_2d(pair)
    c = pair.num_classes
    fwd = _weighted(forward_kl(pair, cfg.tau_f, cfg.epsilon), _term_weight(cfg, cfg.tau_f, c))
    rev = _weighted(reverse_kl(pair, cfg.tau_r, cfg.epsilon), _term_weight(cfg, cfg.tau_r, c))
    return ad.add(fwd, ad.scale(rev, cfg.alpha))


def bdd_loss_accumulated(pair: LogitBatch, cfg: DistillConfig) -> Tensor:
    """Temperature-accumulated variant: both terms averaged uniformly over ``cfg.tau_set``."""
    _check_2d(pair)
    if len(cfg.tau_set) == 0:
        raise ParameterError("tau_set must not be empty")
    c = pair.num_classes
    k = len(cfg.tau_set)
    fwd = rev = None
    for tau in cfg.tau_set:
        f = _weighted(forward_kl(pair, tau, cfg.epsilon), _term_weight(cfg, tau, c))
        r = _weighted(reverse_kl(pair, tau, cfg.epsilon), _term_weight(cfg, tau, c))
        fwd = f if fwd is None else ad.add(fwd, f)
        rev = r if rev is None else ad.add(rev, r)
    return ad.add(ad.scale(fwd, 1.0 / k), ad.scale(rev, cfg.alpha / k))


def bdd_seg_loss(pair: LogitBatch, cfg: DistillConfig) -> Tensor:
    """Channel-wise variant for [B, C, H, W] logits.

    Each channel's H*W map is softened across spatial positions, the balanced
    divergence is taken per (sample, channel) and the result averaged over
    both. The per-channel mean is built in, so ``normalize_by_classes`` has
    no further effect here; ``tau_square_rescale`` still applies.
    """
    if pair.student.ndim != 4:
        raise DimensionError(f"expected [B, C, H, W] logits, got shape {pair.student.shape}")
    b, c, h, w = pair.student.shape
    s = ad.reshape(pair.student, (b, c, h * w))
    t = pair.teacher.data.reshape(b, c, h * w)
    wf = cfg.tau_f * cfg.tau_f if cfg.tau_square_rescale else 1.0
    wr = cfg.tau_r * cfg.tau_r if cfg.tau_square_rescale else 1.0
    fwd = _weighted(_per_sample_forward(s, t, cfg.tau_f, cfg.epsilon, axis=2), wf)
    rev = _weighted(_per_sample_reverse(s, t, cfg.tau_r, cfg.epsilon, axis=2), wr)
    return ad.mean(ad.add(fwd, ad.scale(rev, cfg.alpha)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood; [B, C] with labels [B] or [B, C, H, W] with labels [B, H, W]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 4:
        b, c, h, w = logits.shape
        if labels.shape != (b, h, w):
            raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
        logits = ad.reshape(ad.transpose(logits, (0, 2, 3, 1)), (b * h * w, c))
        labels = labels.reshape(-1)
    elif logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    return ad.scale(ad.mean(ad.pick(ad.log_softmax(logits, axis=1), labels)), -1.0)


def distill_term(pair: LogitBatch, cfg: DistillConfig, mode: str = "bdd") -> Tensor:
    """The teacher-matching part of the objective for a loss ``mode``."""
    if mode == "kd":
        return forward_kl(pair, cfg.kd_tau, cfg.epsilon)
    if mode == "bdd":
        return bdd_loss(pair, cfg)
    if mode == "bdd_accum":
        return bdd_loss_accumulated(pair, cfg)
    if mode == "bdd_seg":
        return bdd_seg_loss(pair, cfg)
    raise ParameterError(f"unknown distillation mode {mode!r}")


def overall_loss(pair: LogitBatch, labels, cfg: DistillConfig, mode: str | None = None) -> Tensor:
    """Cross-entropy on the student plus ``beta`` times the distillation term.

    ``mode`` defaults to ``bdd`` for 2-D logits and ``bdd_seg`` for 4-D.
    """
    if mode is None:
        mode = "bdd_seg" if pair.student.ndim == 4 else "bdd"
    ce = cross_entropy(pair.student, labels)
    if cfg.beta == 0.0:
        return ce
    return ad.add(ce, ad.scale(distill_term(pair, cfg, mode), cfg.beta))


def zero_avoiding_gradients(teacher_logits, student_logits, tau: float = 1.0, epsilon: float = 1e-12):
    """Per-class gradients of both divergences w.r.t. the student's log-probabilities.

    Each log-probability is treated as an independent coordinate (the
    softmax normalisation is held fixed), so the forward gradient on class
    ``c`` is exactly ``-p_T[c]`` and collapses as the teacher probability on
    that class goes to zero, while the reverse gradient
    ``p_S[c] * (log p_S[c] - log p_T[c] + 1)`` stays large.

    Returns ``(forward_grad, reverse_grad)`` as 1-D arrays.
    """
    t = np.asarray(teacher_logits, dtype=np.float64)
    log_p_s0 = np.log(ad.softmax_tau_array(np.asarray(student_logits, dtype=np.float64), tau))
    p_t = ad.softmax_tau_array(t, tau)
    log_p_t = Tensor(_floored_log_array(p_t, epsilon))

    out = []
    for direction in ("forward", "reverse"):
        log_p_s = Tensor(log_p_s0.copy(), requires_grad=True)
        if direction == "forward":
            loss = ad.sum(ad.mul(Tensor(p_t), ad.sub(log_p_t, log_p_s)))
        else:
            p_s = ad.exp(log_p_s)
            loss = ad.sum(ad.mul(p_s, ad.sub(log_p_s, log_p_t)))
        ad.backward(loss)
        out.append(log_p_s.grad)
    return out[0], out[1]


def logit_space_gradients(teacher_logits, student_logits, tau: float = 1.0, epsilon: float = 1e-12):
    """Gradients of both divergences w.r.t. the raw student logits (softmax coupling included)."""
    t = Tensor(np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64)))
    res = []
    for fn in (forward_kl, reverse_kl):
        s = Tensor(np.atleast_2d(np.asarray(student_logits, dtype=np.float64)), requires_grad=True)
        ad.backward(fn(LogitBatch(s, t), tau, epsilon))
        res.append(s.grad[0])
    return res[0], res[1]


def per_channel_oracle(student: np.ndarray, teacher: np.ndarray, cfg: DistillConfig) -> float:
    """Loop reference for :func:`bdd_seg_loss`: slice channels, call :func:`bdd_loss` on each."""
    b, c = student.shape[:2]
    flat_cfg = DistillConfig.unchecked(**{**asdict(cfg), "normalize_by_classes": False})
    total = 0.0
    for i in range(b):
        for j in range(c):
            s = Tensor(student[i, j].reshape(1, -1))
            t = Tensor(teacher[i, j].reshape(1, -1))
            total += bdd_loss(LogitBatch(s, t), flat_cfg).item()
    return total / (b * c)


LOSS_MODES: Sequence[str] = ("ce", "kd", "bdd", "bdd_accum", "bdd_seg")
