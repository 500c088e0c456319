"""Training objective: cross-entropy, word-level distillation, weighted total.

The distillation term is the teacher-weighted cross-entropy
-sum_j sum_z q_jz log p_jz. It differs from the full KL divergence only by
the teacher-entropy constant, so gradients w.r.t. the student are identical;
the teacher distribution is always treated as a constant.

Reduction convention: losses are summed over positions within a sentence and
averaged over sentences in a batch, which decouples the learning rate from
batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DistributionError, ShapeError, VocabularyError


@dataclass
class DistillConfig:
    alpha_mode: str = "fixed"  # "fixed" | "trainable"
    alpha_init: float = 1.0
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.alpha_mode not in ("fixed", "trainable"):
            raise ConfigError(f"alpha_mode must be 'fixed' or 'trainable', got {self.alpha_mode!r}")
        # the softplus reparameterization needs a positive starting point;
        # a fixed alpha of 0 is a legitimate CE-only degenerate case
        if self.alpha_mode == "trainable" and self.alpha_init <= 0:
            raise ConfigError("alpha_init must be positive in trainable mode")
        if self.alpha_init < 0:
            raise ConfigError("alpha_init must be nonnegative")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError("label_smoothing must be in [0, 0.5)")


@dataclass
class LossBundle:
    ce: float
    kd: float
    alpha: float
    total: float


def _smoothed_targets(gold: np.ndarray, k: int, smoothing: float) -> np.ndarray:
    """One-hot rows, or (1-s) on gold and s/(K-1) elsewhere when smoothing."""
    if gold.min() < 0 or gold.max() >= k:
        raise VocabularyError(f"gold token id {int(gold.max())} outside vocabulary of size {k}")
    targets = np.full(gold.shape + (k,), smoothing / (k - 1) if smoothing else 0.0)
    np.put_along_axis(targets, gold[..., None], 1.0 - smoothing, axis=-1)
    return targets


def batch_ce_loss(logits: Tensor, gold: np.ndarray, mask: np.ndarray | None = None,
                  label_smoothing: float = 0.0) -> Tensor:
    """CE over a padded batch: logits [B, T, K], gold [B, T], mask [B, T].

    Masked positions contribute nothing; result is the mean over sentences of
    the per-sentence position sums.
    """
    gold = np.asarray(gold, dtype=np.int64)
    if logits.shape[:-1] != gold.shape:
        raise ShapeError(f"logits rows {logits.shape[:-1]} vs gold positions {gold.shape}")
    targets = _smoothed_targets(gold, logits.shape[-1], label_smoothing)
    if mask is not None:
        targets = targets * np.asarray(mask, dtype=np.float64)[..., None]
    lp = ad.log_softmax(logits, axis=-1)
    total = ad.scale(ad.tsum(ad.mul(Tensor(targets), lp)), -1.0)
    return ad.scale(total, 1.0 / logits.shape[0])


def batch_kd_loss(logits: Tensor, teacher_probs: np.ndarray,
                  mask: np.ndarray | None = None) -> Tensor:
    """Teacher-weighted CE over a padded batch; teacher rows are constants.

    Each unmasked teacher row must be a probability vector (nonnegative,
    summing to 1 within 1e-6).
    """
    q = np.asarray(teacher_probs, dtype=np.float64)
    if tuple(q.shape) != tuple(logits.shape):
        raise ShapeError(f"teacher probs {q.shape} vs student logits {logits.shape}")
    live = np.ones(q.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if q[live].size:
        if q[live].min() < 0:
            raise DistributionError(f"teacher probability is negative: {q[live].min()}")
        sums = q[live].sum(axis=-1)
        worst = np.abs(sums - 1.0).max()
        if worst > 1e-6:
            raise DistributionError(f"teacher row sums off by {worst:.3g} (> 1e-6)")
    if mask is not None:
        q = q * np.asarray(mask, dtype=np.float64)[..., None]
    lp = ad.log_softmax(logits, axis=-1)
    total = ad.scale(ad.tsum(ad.mul(Tensor(q), lp)), -1.0)
    return ad.scale(total, 1.0 / logits.shape[0])


def ce_loss(student_logits: Tensor, gold, label_smoothing: float = 0.0) -> Tensor:
    """Single-sentence CE: logits [m+1, K], gold length m+1, summed over positions."""
    gold = np.asarray(gold, dtype=np.int64)
    logits3 = ad.reshape(student_logits, (1,) + tuple(student_logits.shape))
    return batch_ce_loss(logits3, gold[None, :], None, label_smoothing)


def kd_loss(student_logits: Tensor, teacher_probs) -> Tensor:
    """Single-sentence distillation term: -sum_j sum_z q_jz log p_jz."""
    q = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    logits3 = ad.reshape(student_logits, (1,) + tuple(student_logits.shape))
    return batch_kd_loss(logits3, q[None, ...], None)


def effective_alpha(alpha_param: Tensor | None, cfg: DistillConfig) -> Tensor:
    """Weight on the distillation term; softplus keeps the trainable form positive."""
    if cfg.alpha_mode == "fixed":
        return Tensor(cfg.alpha_init)
    if alpha_param is None:
        raise ConfigError("trainable alpha requires an alpha parameter tensor")
    return ad.softplus(alpha_param)


def init_alpha_param(cfg: DistillConfig) -> Tensor:
    """Inverse-softplus of alpha_init, so training starts at the configured weight."""
    x = float(np.log(np.expm1(cfg.alpha_init)))
    return Tensor(x, requires_grad=True)


def total_loss(ce: Tensor, kd: Tensor, alpha_param: Tensor | None,
               cfg: DistillConfig) -> tuple[Tensor, LossBundle]:
    """Combine the two losses: total = ce + alpha * kd.

    In trainable mode the gradient flows into `alpha_param` through a
    softplus reparameterization; in fixed mode alpha is a constant.
    """
    alpha = effective_alpha(alpha_param, cfg)
    total = ad.add(ce, ad.mul(alpha, kd))
    bundle = LossBundle(ce=ce.item(), kd=kd.item(), alpha=alpha.item(), total=total.item())
    return total, bundle
