"""Task loss, temperature-softened distillation loss and their weighted blend."""

from typing import Literal, Optional, Union

import numpy as np
from pydantic import ConfigDict, Field

from app import tensor as T
from app.config import StrictModel
from app.errors import ConfigError, DataError, DimensionError
from app.tensor import Tensor

KLDirection = Literal["teacher_student", "student_teacher"]


class DistillConfig(StrictModel):
    """
    Hyperparameters of the blended objective.

    Attributes:
        temperature: Softmax temperature T applied to both logit sets.
        alpha: Weight of the distillation term; 1 - alpha weights cross-entropy.
        kl_direction: ``teacher_student`` is KL(teacher || student) (soft-target
            cross-entropy); ``student_teacher`` is the reverse argument order.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    temperature: float = Field(2.0, gt=0)
    alpha: float = Field(0.5, ge=0, le=1)
    kl_direction: KLDirection = "teacher_student"


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")


def _as_logits(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def softmax_T(logits: Tensor, temperature: float) -> Tensor:
    """Row-wise softmax of logits / temperature (max-subtracted, differentiable)."""
    _check_temperature(temperature)
    return T.softmax(logits, temperature)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood of the true labels.

    Args:
        logits: Batch of logits, shape (batch, classes).
        labels: Integer labels in [0, classes).

    Returns:
        Tensor: Scalar loss; its gradient w.r.t. logits is (softmax - onehot) / batch.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    batch, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"cross_entropy: labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    onehot = Tensor(np.eye(classes)[labels])
    picked = T.sum(T.mul(T.log_softmax(logits, 1.0), onehot))
    return T.scale(picked, -1.0 / batch)


def kd_loss(
    student_logits: Tensor,
    teacher_logits: Union[Tensor, np.ndarray],
    temperature: float,
    kl_direction: KLDirection = "teacher_student",
) -> Tensor:
    """
    T^2-scaled KL divergence between softened teacher and student outputs, batch mean.

    Teacher logits are always detached. In the default direction the gradient
    w.r.t. the student logits is T * (p_s - p_t) / batch.
    """
    _check_temperature(temperature)
    target = _as_logits(teacher_logits)
    if target.shape != student_logits.shape:
        raise DimensionError(f"kd_loss: student {student_logits.shape} vs teacher {target.shape}")
    factor = temperature * temperature / student_logits.shape[0]

    if kl_direction == "teacher_student":
        return T.scale(T.soft_cross_entropy(student_logits, target, temperature), factor)
    if kl_direction == "student_teacher":
        with T.no_grad():
            log_q = T.log_softmax(Tensor(target), temperature)
        log_p = T.log_softmax(student_logits, temperature)
        divergence = T.sum(T.mul(T.exp(log_p), T.sub(log_p, log_q)))
        return T.scale(divergence, factor)
    raise ConfigError(f"unknown kl_direction {kl_direction!r}")


def total_loss(
    student_logits: Tensor,
    teacher_logits: Optional[Union[Tensor, np.ndarray]],
    labels: np.ndarray,
    cfg: DistillConfig,
) -> Tensor:
    """
    (1 - alpha) * cross_entropy + alpha * kd_loss.

    alpha == 0 returns the cross-entropy computation itself, alpha == 1 the
    distillation loss itself, so both endpoints are bitwise identical to the
    single-term losses.
    """
    if cfg.alpha == 0.0:
        return cross_entropy(student_logits, labels)
    if teacher_logits is None:
        raise ConfigError(f"alpha={cfg.alpha} needs teacher logits")
    distill = kd_loss(student_logits, teacher_logits, cfg.temperature, cfg.kl_direction)
    if cfg.alpha == 1.0:
        return distill
    task = cross_entropy(student_logits, labels)
    return T.add(T.scale(task, 1.0 - cfg.alpha), T.scale(distill, cfg.alpha))
