"""Segmentation and distillation objectives.

All functions accept batched tensors ``[B, C, H, W]``; a missing batch axis is
treated as ``B = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .nets import FeatureBundle

DICE_SMOOTH = 1.0


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.ndim == 3 else x


def soft_dice_loss(
    probs: torch.Tensor, gt: torch.Tensor, smooth: float = DICE_SMOOTH, skip_background: bool = True
) -> torch.Tensor:
    """``1 - mean`` soft Dice over classes (channel 0 skipped) and batch."""
    if probs.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(gt.shape)}")
    p, g = _batched(probs), _batched(gt)
    if skip_background:
        p, g = p[:, 1:], g[:, 1:]
    inter = (p * g).sum(dim=(2, 3))
    denom = p.sum(dim=(2, 3)) + g.sum(dim=(2, 3))
    return 1.0 - ((2.0 * inter + smooth) / (denom + smooth)).mean()


def bce_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-channel sigmoid cross-entropy, averaged over every element."""
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(gt.shape)}")
    return F.binary_cross_entropy_with_logits(logits, gt)


def kd_l2(f_student: FeatureBundle | torch.Tensor, f_teacher: FeatureBundle | torch.Tensor) -> torch.Tensor:
    """Mean squared difference between bottleneck feature maps."""
    a = f_student.bottleneck if isinstance(f_student, FeatureBundle) else f_student
    b = f_teacher.bottleneck if isinstance(f_teacher, FeatureBundle) else f_teacher
    if a.shape != b.shape:
        raise ValueError(f"bottleneck shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.mse_loss(a, b)


def batch_covariance(z: torch.Tensor) -> torch.Tensor:
    zc = z - z.mean(dim=0, keepdim=True)
    return zc.T @ zc / (z.shape[0] - 1)


def cov_penalty(z_student: torch.Tensor, z_teacher: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance between batch covariances, divided by d**2."""
    if z_student.shape != z_teacher.shape:
        raise ValueError("embedding batches must have the same shape")
    if z_student.ndim != 2 or z_student.shape[0] < 2:
        raise ValueError("covariance needs a [B, d] batch with B >= 2")
    d = z_student.shape[1]
    diff = batch_covariance(z_student) - batch_covariance(z_teacher)
    return (diff**2).sum() / d**2


@dataclass
class DualLossBreakdown:
    dice_term: torch.Tensor
    bce_term: torch.Tensor
    kd_l2_term: torch.Tensor
    cov_term: torch.Tensor
    lam: float
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "dice": self.dice_term.item(),
            "bce": self.bce_term.item(),
            "kd_l2": self.kd_l2_term.item(),
            "cov": self.cov_term.item(),
            "lambda": float(self.lam),
            "total": self.total.item(),
        }


def dual_loss(
    logits: torch.Tensor,
    gt: torch.Tensor,
    f_s: FeatureBundle | None = None,
    f_t: FeatureBundle | None = None,
    z_s: torch.Tensor | None = None,
    z_t: torch.Tensor | None = None,
    lam: float = 1.0,
) -> DualLossBreakdown:
    """Current-task Dice + BCE plus ``lam`` times the replay distillation terms.

    Without a replay batch (``f_s is None``) both distillation terms are zero.
    ``z_s``/``z_t`` default to the bundles' embeddings.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    dice_term = soft_dice_loss(torch.softmax(logits, dim=-3), gt)
    bce_term = bce_loss(logits, gt)
    zero = logits.new_zeros(())
    if f_s is None or f_t is None:
        kd_term = cov_term = zero
    else:
        kd_term = kd_l2(f_s, f_t)
        z_s = f_s.embedding if z_s is None else z_s
        z_t = f_t.embedding if z_t is None else z_t
        cov_term = cov_penalty(z_s, z_t) if z_s.shape[0] >= 2 else zero
    total = dice_term + bce_term + lam * (kd_term + cov_term)
    return DualLossBreakdown(dice_term, bce_term, kd_term, cov_term, lam, total)
