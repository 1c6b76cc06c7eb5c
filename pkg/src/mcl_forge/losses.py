"""Classification objectives: cross-entropy, temperature soft targets,
generalized distillation, KL to the uniform distribution and the
min-over-members ensemble loss.

Two flavours are provided. The scalar functions work on plain vectors and
return floats; they are the reference definitions. The ``batch_*``
functions build differentiable graphs over a batch of logits and return a
weighted sum of per-sample losses, which is what the training loop uses.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .tensor import Tensor

PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))


@dataclass(frozen=True)
class SoftTarget:
    probs: np.ndarray
    temperature: float


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ce_term: float
    distill_term: float
    lam: float


def _vector(x, name="vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be rank 1, got shape {arr.shape}")
    return arr


def _check_temperature(T):
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")


def softmax_t(logits, T: float = 1.0) -> SoftTarget:
    """Temperature softmax of one logit vector."""
    _check_temperature(T)
    z = _vector(logits, "logits")
    if z.size < 2:
        raise ShapeError("softmax needs at least two classes")
    z = z / T
    e = np.exp(z - z.max())
    return SoftTarget(e / e.sum(), float(T))


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, SoftTarget) else _vector(p, "probs")


def cross_entropy(probs, label: int) -> float:
    p = _probs(probs)
    if not 0 <= label < p.size:
        raise ContractError(f"label {label} outside [0, {p.size})")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def soft_cross_entropy(target, probs) -> float:
    t, p = _probs(target), _probs(probs)
    if t.shape != p.shape:
        raise ShapeError(f"target and probs differ in length: {t.size} vs {p.size}")
    return float(-(t * np.log(np.maximum(p, PROB_FLOOR))).sum())


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")


def gd_loss(
    student_logits,
    label: int,
    teacher_soft: SoftTarget,
    T: float,
    lam: float,
    student_temperature: bool = True,
) -> LossBreakdown:
    """Generalized distillation loss for one sample.

    The teacher distribution is a constant. With ``student_temperature``
    the student is softened at ``T`` in the imitation term; otherwise it
    uses its plain softmax.
    """
    _check_lambda(lam)
    _check_temperature(T)
    if abs(teacher_soft.temperature - T) > 1e-12:
        raise ContractError(f"teacher soft target computed at T={teacher_soft.temperature}, expected {T}")
    ce = cross_entropy(softmax_t(student_logits, 1.0), label)
    student = softmax_t(student_logits, T if student_temperature else 1.0)
    distill = soft_cross_entropy(teacher_soft, student)
    return LossBreakdown((1.0 - lam) * ce + lam * distill, ce, distill, float(lam))


def kl_to_uniform(probs) -> float:
    """KL(U || p) for the uniform distribution U over the classes of p."""
    p = _probs(probs)
    c = p.size
    return float(np.sum((np.log(1.0 / c) - np.log(np.maximum(p, PROB_FLOOR))) / c))


def ensemble_loss(per_sample_losses) -> float:
    """Sum over samples of the smallest member loss."""
    m = np.asarray(per_sample_losses, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ContractError(f"ensemble_loss needs a nonempty N x M matrix, got shape {m.shape}")
    return float(m.min(axis=1).sum())


# ------------------------------------------------------------ batched graphs


def log_probs(logits: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise log of the temperature softmax, floored at log(1e-12)."""
    return tn.clamp_min(tn.log_softmax(logits, T), LOG_FLOOR)


def softmax_rows(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Plain numpy row-wise temperature softmax (no graph)."""
    _check_temperature(T)
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _onehot(labels, num_classes) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError("label out of range")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _weights(weights, n) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"weights must have shape ({n},), got {w.shape}")
    return w


def batch_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Sum_i w_i * CE_i. Default weights give the batch mean."""
    n, c = logits.shape
    w = _weights(weights, n)
    coef = -_onehot(labels, c) * w[:, None]
    return tn.tsum(tn.mul(log_probs(logits, 1.0), Tensor(coef)))


def batch_soft_cross_entropy(logits: Tensor, targets: np.ndarray, T: float = 1.0, weights=None) -> Tensor:
    """Sum_i w_i * (-sum_j target_ij log softmax_T(logits_i)_j); targets are constants."""
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (n, c):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    w = _weights(weights, n)
    return tn.tsum(tn.mul(log_probs(logits, T), Tensor(-targets * w[:, None])))


def batch_kl_to_uniform(logits: Tensor, weights=None) -> Tensor:
    """Sum_i w_i * KL(U || softmax(logits_i))."""
    n, c = logits.shape
    w = _weights(weights, n)
    coef = np.repeat(-w[:, None] / c, c, axis=1)
    const = float(w.sum() * np.log(1.0 / c))
    return tn.add(tn.tsum(tn.mul(log_probs(logits, 1.0), Tensor(coef))), const)


def batch_gd_loss(
    logits: Tensor,
    labels,
    teacher_soft: np.ndarray,
    T: float,
    lam: float,
    weights=None,
    student_temperature: bool = True,
    t_squared: bool = False,
) -> Tensor:
    """Sum_i w_i * GD_i with teacher soft targets held constant.

    ``t_squared`` multiplies the imitation term by T**2 (classical KD
    gradient rescaling); off by default.
    """
    _check_lambda(lam)
    ce = batch_cross_entropy(logits, labels, weights)
    distill = batch_soft_cross_entropy(logits, teacher_soft, T if student_temperature else 1.0, weights)
    kd = lam * (T * T if t_squared else 1.0)
    return tn.add(tn.scale(ce, 1.0 - lam), tn.scale(distill, kd))


def per_sample_cross_entropy(probs: np.ndarray, labels) -> np.ndarray:
    """Numpy CE for an N x C probability matrix; no graph."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(labels.size), labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def per_sample_kl_to_uniform(probs: np.ndarray) -> np.ndarray:
    c = probs.shape[1]
    return np.sum(np.log(1.0 / c) - np.log(np.maximum(probs, PROB_FLOOR)), axis=1) / c


def teacher_targets(logits: np.ndarray, teachers, T: float) -> np.ndarray:
    """Soft targets at temperature T taken row-wise from each sample's teacher.

    ``logits`` is M x N x C, ``teachers`` gives the teacher index per sample.
    """
    teachers = np.asarray(teachers, dtype=np.int64)
    picked = logits[teachers, np.arange(teachers.size)]
    return softmax_rows(picked, T)


__all__ = [
    "SoftTarget",
    "LossBreakdown",
    "softmax_t",
    "cross_entropy",
    "soft_cross_entropy",
    "gd_loss",
    "kl_to_uniform",
    "ensemble_loss",
    "log_probs",
    "softmax_rows",
    "batch_cross_entropy",
    "batch_soft_cross_entropy",
    "batch_kl_to_uniform",
    "batch_gd_loss",
    "per_sample_cross_entropy",
    "per_sample_kl_to_uniform",
    "teacher_targets",
]
