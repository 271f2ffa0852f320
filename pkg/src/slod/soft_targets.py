"""Soft targets and the cross-entropy family of training losses.

Targets are plain probability arrays (a row of K entries, or N rows). Losses
take log-probabilities as a :class:`~slod.tensor.Tensor` so gradients flow to
the model; targets are constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConstraintError, DomainError, ShapeError, UsageError
from .tensor import Tensor, softmax_np

SUM_TOL = 1e-6


@dataclass(frozen=True)
class TargetDistribution:
    """A probability vector over K classes, or a batch of them (N x K)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim not in (1, 2) or p.shape[-1] < 2:
            raise ShapeError(f"target must be K or N x K with K >= 2, got shape {p.shape}")
        if np.any(p < -SUM_TOL) or np.any(p > 1 + SUM_TOL):
            raise DomainError("target entries must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > SUM_TOL):
            raise DomainError("target rows must sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-1]

    def argmax(self):
        return np.argmax(self.probs, axis=-1)


@dataclass(frozen=True)
class SoftLabelConfig:
    alpha: float = 0.0
    mode: str = "uniform"
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.mode not in ("uniform", "teacher"):
            raise DomainError(f"mode must be 'uniform' or 'teacher', got {self.mode!r}")
        if not self.temperature > 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class OEConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not self.lam >= 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")


def _probs(t) -> np.ndarray:
    return t.probs if isinstance(t, TargetDistribution) else np.asarray(t)


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels.reshape(-1)] = 1
    return out.reshape(labels.shape + (num_classes,))


def uniform_target(k: int) -> TargetDistribution:
    if k < 2:
        raise DomainError(f"uniform target needs K >= 2, got {k}")
    return TargetDistribution(np.full(k, 1.0 / k))


def mix_soft_target(q, q_prime, alpha: float) -> TargetDistribution:
    """Blend a one-hot target with a soft target: (1 - alpha) * q + alpha * q'.

    The true class must remain a maximal entry of the mixed target (ties are
    allowed, e.g. alpha = 1 with a uniform q'); otherwise ConstraintError.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    q, qp = np.asarray(_probs(q), dtype=np.float64), np.asarray(_probs(q_prime), dtype=np.float64)
    if qp.shape != q.shape and qp.shape != q.shape[-1:]:
        raise ShapeError(f"q has shape {q.shape}, q' has shape {qp.shape}")
    if not np.all((q == 0) | (q == 1)) or np.any(q.sum(axis=-1) != 1):
        raise DomainError("q must be one-hot")
    mixed = (1.0 - alpha) * q + alpha * qp
    true_cls = np.argmax(q, axis=-1)
    true_val = np.take_along_axis(mixed, np.expand_dims(true_cls, -1), axis=-1)[..., 0]
    if np.any(mixed.max(axis=-1) > true_val + 1e-12):
        raise ConstraintError("mixed target moves the argmax away from the true class")
    return TargetDistribution(mixed)


def tempered(probs: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(log(probs) / T), identical to softmax(logits / T) for the source logits."""
    if temperature == 1.0:
        return probs
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return softmax_np(logp / temperature).astype(probs.dtype)


def entropy(target) -> np.ndarray:
    p = np.asarray(_probs(target), dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def soft_cross_entropy(target, log_probs: Tensor) -> Tensor:
    """Batch mean of -sum_k target_k * log_probs_k."""
    t = np.asarray(_probs(target), dtype=log_probs.dtype)
    if log_probs.data.ndim != 2:
        raise ShapeError(f"log_probs must be N x K, got {log_probs.shape}")
    n, k = log_probs.shape
    if t.shape not in ((n, k), (k,)):
        raise ShapeError(f"target shape {t.shape} does not match log_probs {log_probs.shape}")
    if n == 0:
        raise UsageError("soft_cross_entropy on an empty batch")
    return (log_probs * t).sum() * (-1.0 / n)


def _hard_target(q, log_probs: Tensor) -> np.ndarray:
    q = np.asarray(_probs(q))
    if q.ndim == 1 and q.shape[0] == log_probs.shape[0] and np.issubdtype(q.dtype, np.integer):
        return one_hot(q, log_probs.shape[1], dtype=log_probs.dtype)
    return q


def label_smoothing_loss(q, log_probs: Tensor, alpha: float) -> Tensor:
    """(1 - alpha) * H(q, p) + alpha * H(U(K), p).

    ``q`` is a one-hot batch (N x K) or an integer label vector.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    q = _hard_target(q, log_probs)
    k = log_probs.shape[1]
    return soft_cross_entropy(q, log_probs) * (1.0 - alpha) + soft_cross_entropy(uniform_target(k).probs, log_probs) * alpha


def distillation_loss(q, log_probs_student: Tensor, teacher_probs, alpha: float, temperature: float = 1.0) -> Tensor:
    """(1 - alpha) * H(q, p) + alpha * H(p_t, p), p_t = teacher probs tempered by T.

    ``teacher_probs`` is a constant target: no gradient reaches the teacher.
    Only the teacher side is tempered; the student logits are not scaled.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    q = _hard_target(q, log_probs_student)
    pt = tempered(np.asarray(_probs(teacher_probs)), temperature)
    return soft_cross_entropy(q, log_probs_student) * (1.0 - alpha) + soft_cross_entropy(pt, log_probs_student) * alpha


def outlier_exposure_loss(q_id, log_probs_id: Tensor, log_probs_ood: Optional[Tensor], lam: float) -> Tensor:
    """mean H(q, p_id) + lambda * mean H(U(K), p_ood).

    With lambda == 0 the OOD term is dropped entirely (OOD batch may be None).
    """
    if not lam >= 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    loss = soft_cross_entropy(_hard_target(q_id, log_probs_id), log_probs_id)
    if lam == 0:
        return loss
    if log_probs_ood is None or log_probs_ood.shape[0] == 0:
        raise UsageError("outlier_exposure_loss needs a nonempty OOD batch when lambda > 0")
    k = log_probs_ood.shape[1]
    if k != log_probs_id.shape[1]:
        raise ShapeError(f"ID and OOD predictions disagree on K: {log_probs_id.shape} vs {log_probs_ood.shape}")
    return loss + soft_cross_entropy(uniform_target(k).probs, log_probs_ood) * lam
