"""Training objectives: type/polarity cross-entropy, their weighted sum, and the box losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import ops
from .numeric.tensor import Tensor, as_tensor, make_result

N_TYPES = 24
N_POLARITY = 2


@dataclass(frozen=True)
class LossConfig:
    """``lam`` weights the polarity term.  ``reduction='sum'`` gives the per-batch
    sums as written for the objectives; ``'mean'`` divides by the batch size."""

    lam: float = 0.5
    reduction: str = "mean"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def _check_width(logits: Tensor, k: int, what: str) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = ops.reshape(logits, (1, -1))
    if logits.shape[-1] != k:
        raise ValueError(f"{what} logits need {k} columns, got {logits.shape}")
    return logits


def type_loss(logits, targets, reduction: str = "mean") -> Tensor:
    return ops.cross_entropy(_check_width(logits, N_TYPES, "type"), targets, reduction)


def polarity_loss(logits, targets, reduction: str = "mean") -> Tensor:
    return ops.cross_entropy(_check_width(logits, N_POLARITY, "polarity"), targets, reduction)


def multitask_loss(type_part: Tensor, polarity_part: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    return ops.add(type_part, ops.mul(polarity_part, cfg.lam))


def classification_loss(type_logits, type_targets, pol_logits, pol_targets, cfg: LossConfig = LossConfig()):
    """Returns ``(total, type_part, polarity_part)``."""
    lt = type_loss(type_logits, type_targets, cfg.reduction)
    lp = polarity_loss(pol_logits, pol_targets, cfg.reduction)
    return multitask_loss(lt, lp, cfg), lt, lp


def smooth_l1_value(x):
    a = np.abs(x)
    return np.where(a < 1.0, 0.5 * x * x, a - 0.5)


def smooth_l1_slope(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def smooth_l1(pred, target, reduction: str = "sum") -> Tensor:
    """Smooth-L1 over every coordinate.  ``'mean'`` divides by the number of rows."""
    pred = as_tensor(pred)
    target = np.asarray(as_tensor(target).data, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred.data - target
    scale = 1.0 / (pred.shape[0] if pred.ndim > 1 else 1) if reduction == "mean" else 1.0
    out = np.asarray(smooth_l1_value(diff).sum() * scale, dtype=pred.dtype)
    return make_result(out, (pred,), lambda g: (smooth_l1_slope(diff) * (g * scale),), "smooth_l1")


def localization_total_loss(coord_part, cls_part, mode: str = "joint") -> Tensor:
    """Box loss plus classification loss.

    Box pre-training uses only the coordinate term, weakly supervised
    fine-tuning only the classification term; ``'joint'`` adds both.
    """
    if mode == "pretrain":
        return as_tensor(coord_part)
    if mode == "finetune":
        return as_tensor(cls_part)
    if mode == "joint":
        return ops.add(coord_part, cls_part)
    raise ValueError(f"unknown mode {mode!r}")
