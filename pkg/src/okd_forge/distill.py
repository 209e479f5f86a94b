"""Cross-entropy, tempered KL divergence, and the KD / OKD / KD+Aug objectives.

All losses take the student and teacher as callables mapping an input batch to
logits.  The teacher is always evaluated under :func:`~okd_forge.tensor.no_grad`,
so no gradient ever reaches its parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import DataError, ParameterError
from .tensor import Tensor

EPS = 1e-12
ROW_SUM_TOL = 1e-6

Model = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class DistillConfig:
    """Loss weights and temperatures.

    ``lam`` weights the cross-entropy term; the KL term(s) get ``1 - lam``.
    """

    lam: float = 0.1
    pi_ce: float = 1.0
    pi_kl: float = 4.0

    def __post_init__(self):
        if not (0.0 < self.lam <= 1.0):
            raise ParameterError(f"lambda must be in (0, 1], got {self.lam}")
        for name in ("pi_ce", "pi_kl"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(f"{name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "pi_ce": self.pi_ce, "pi_kl": self.pi_kl}

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(lam=d.get("lambda", 0.1), pi_ce=d.get("pi_ce", 1.0), pi_kl=d.get("pi_kl", 4.0))


def _labels(labels, n: int, c: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise DataError(f"labels must be an integer vector of length {n}, got {y.dtype} {y.shape}")
    if n and (y.min() < 0 or y.max() >= c):
        raise DataError(f"labels must lie in [0, {c})")
    return y


def cross_entropy(labels, logits, pi: float = 1.0) -> Tensor:
    """Mean of ``-log softmax(logits / pi)[i, labels[i]]``."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise DataError(f"logits must be N×C, got {logits.shape}")
    n, c = logits.shape
    y = _labels(labels, n, c)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    logp = T.log_softmax_temp(logits, pi)
    return T.scale(T.sum(T.mul(logp, onehot)), -1.0 / n)


def _check_stochastic(p: np.ndarray, who: str) -> None:
    if p.ndim != 2:
        raise DataError(f"{who} probabilities must be N×C, got {p.shape}")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=ROW_SUM_TOL):
        raise DataError(f"{who} rows are not probability distributions")


def kl_div(p_student, p_teacher) -> Tensor:
    """Row-mean of ``sum_j pT_j (ln pT_j - ln pS_j)``, logs floored at 1e-12.

    The teacher distribution is the reference measure and is treated as a
    constant; gradient flows only into ``p_student``.
    """
    p_student = T.as_tensor(p_student)
    pt = p_teacher.data if isinstance(p_teacher, Tensor) else np.asarray(p_teacher, dtype=np.float64)
    if p_student.shape != pt.shape:
        raise DataError(f"shape mismatch: student {p_student.shape} vs teacher {pt.shape}")
    _check_stochastic(p_student.data, "student")
    _check_stochastic(pt, "teacher")
    self_term = (pt * np.log(np.maximum(pt, EPS))).sum(axis=1)
    cross = T.sum(T.mul(T.log(T.clamp_min(p_student, EPS)), pt), axis=1)
    rows = T.clamp_min(T.sub(self_term, cross), 0.0)
    return T.mean(rows)


def _teacher_probs(teacher: Model, x, pi: float) -> np.ndarray:
    with T.no_grad():
        return T.softmax_temp(teacher(x), pi).data


def distill_term(student_logits, teacher: Model, x, cfg: DistillConfig, teacher_probs=None) -> Tensor:
    """``KL(softmax(f_S/pi_kl), softmax(f_T/pi_kl))`` on one input batch.

    ``teacher_probs`` short-circuits the teacher forward pass when the caller
    already holds ``softmax(f_T(x)/pi_kl)``.
    """
    pt = _teacher_probs(teacher, x, cfg.pi_kl) if teacher_probs is None else teacher_probs
    return kl_div(T.softmax_temp(student_logits, cfg.pi_kl), pt)


def kd_loss(x, y, student: Model, teacher: Model, cfg: DistillConfig, teacher_probs=None) -> Tensor:
    x = T.as_tensor(x)
    s = student(x)
    ce = cross_entropy(y, s, cfg.pi_ce)
    kl = distill_term(s, teacher, x, cfg, teacher_probs)
    return T.add(T.scale(ce, cfg.lam), T.scale(kl, 1.0 - cfg.lam))


def augment(aug, x, y, teacher: Model, rng: np.random.Generator) -> Tensor:
    """Draw ``A(x)`` once; the result is fed unchanged to both networks."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return Tensor(aug(data, rng, labels=y, model=teacher))


def okd_loss(
    x, y, student: Model, teacher: Model, aug, cfg: DistillConfig, rng: np.random.Generator, teacher_probs=None
) -> Tensor:
    """KD plus a teacher-matching KL term on generated out-of-distribution inputs.

    No cross-entropy is computed on ``A(x)``. ``teacher_probs`` covers the clean
    batch only; the teacher always runs on ``A(x)``.
    """
    x = T.as_tensor(x)
    base = kd_loss(x, y, student, teacher, cfg, teacher_probs)
    xa = augment(aug, x, y, teacher, rng)
    ood = distill_term(student(xa), teacher, xa, cfg)
    return T.add(base, T.scale(ood, 1.0 - cfg.lam))


def kd_aug_loss(
    x, y, student: Model, teacher: Model, aug, cfg: DistillConfig, rng: np.random.Generator, teacher_probs=None
) -> Tensor:
    """KD with the cross-entropy moved onto ``A(x)``; labels are never mixed."""
    x = T.as_tensor(x)
    xa = augment(aug, x, y, teacher, rng)
    ce = cross_entropy(y, student(xa), cfg.pi_ce)
    kl = distill_term(student(x), teacher, x, cfg, teacher_probs)
    return T.add(T.scale(ce, cfg.lam), T.scale(kl, 1.0 - cfg.lam))
