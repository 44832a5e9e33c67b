"""Semi-supervised loss terms and their per-branch / two-branch combination.

Each branch mixes four terms: instance-level contrastive learning and
teacher-student consistency on all images, plus supervised contrastive and
classification losses on the labeled subset. The branch losses are then
combined with per-branch weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

# Batches where no anchor has a positive are legal at small batch sizes; they
# contribute zero loss and bump this counter instead of raising.
_no_positive_events = 0


def no_positive_event_count() -> int:
    return _no_positive_events


@dataclass
class Hyperparams:
    """All loss weights, temperatures, and the teacher-temperature warmup."""

    sup_weight: float = 0.35        # balance between supervised and unsupervised terms
    origin_weight: float = 1.0      # weight of the original-image branch
    object_weight: float = 1.0      # weight of the object-image branch
    unsup_temp: float = 0.07        # instance-contrastive temperature
    supcon_temp: float = 1.0        # supervised-contrastive temperature
    student_temp: float = 0.1
    teacher_temp: float = 0.07
    me_weight: float = 1.0          # mean-entropy regularizer weight
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_warmup_epochs: int = 20

    def __post_init__(self):
        if not 0.0 <= self.sup_weight <= 1.0:
            raise ValueError(f"sup_weight must be in [0, 1], got {self.sup_weight}")
        if self.origin_weight < 0 or self.object_weight < 0:
            raise ValueError("branch weights must be >= 0")
        for name in ("unsup_temp", "supcon_temp", "student_temp", "teacher_temp",
                     "teacher_temp_start", "teacher_temp_end"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.me_weight < 0:
            raise ValueError("me_weight must be >= 0")
        if self.teacher_warmup_epochs < 0:
            raise ValueError("teacher_warmup_epochs must be >= 0")


class BranchLossParts(NamedTuple):
    un_nce: torch.Tensor | float
    un_cls: torch.Tensor | float
    sup_nce: torch.Tensor | float
    sup_cls: torch.Tensor | float


def sup_con_loss(z: torch.Tensor, labels: torch.Tensor, temp: float) -> torch.Tensor:
    """Supervised contrastive loss over unit-norm embeddings.

    For each anchor, positives are the other same-label rows and the
    denominator runs over every other row. Anchors without positives are
    skipped; if no anchor has one, the loss is zero and a counter is bumped.
    """
    global _no_positive_events
    if temp <= 0:
        raise ValueError("temperature must be positive")
    n = z.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 embeddings, got {n}")
    if labels.shape[0] != n:
        raise ValueError("labels must align with embeddings")
    sim = z @ z.T / temp
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    pos_mask = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~self_mask
    valid = pos_mask.any(dim=1)
    if not bool(valid.any()):
        _no_positive_events += 1
        return z.sum() * 0.0
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos_log_prob = torch.where(pos_mask, log_prob, torch.zeros_like(log_prob))
    per_anchor = -pos_log_prob.sum(dim=1) / pos_mask.sum(dim=1).clamp(min=1)
    return per_anchor[valid].mean()


def info_nce_loss(z1: torch.Tensor, z2: torch.Tensor, temp: float) -> torch.Tensor:
    """Symmetric cross-view InfoNCE with same-instance positives."""
    if temp <= 0:
        raise ValueError("temperature must be positive")
    if z1.shape != z2.shape:
        raise ValueError(f"views must align, got {tuple(z1.shape)} vs {tuple(z2.shape)}")
    n = z1.shape[0]
    if n < 2:
        raise ValueError("batch of 1 has no negatives")
    targets = torch.arange(n, device=z1.device)
    logits = z1 @ z2.T / temp
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def sup_cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmax over the class logits."""
    if labels.numel() and int(labels.max()) >= logits.shape[1]:
        raise ValueError(
            f"label {int(labels.max())} out of range for {logits.shape[1]} classes"
        )
    return F.cross_entropy(logits, labels)


def self_distill_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    student_temp: float,
    teacher_temp: float,
    me_weight: float = 0.0,
) -> torch.Tensor:
    """Cross-entropy from a sharpened, gradient-isolated teacher to the student.

    Takes raw (untempered) prototype similarities from both views; the caller
    stacks the cross-view pairings. Subtracts `me_weight` times the entropy of
    the mean student prediction, which rewards using all prototypes.
    """
    if student_temp <= 0 or teacher_temp <= 0:
        raise ValueError("temperatures must be positive")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student/teacher logits must align")
    teacher = F.softmax(teacher_logits.detach() / teacher_temp, dim=1)
    log_student = F.log_softmax(student_logits / student_temp, dim=1)
    loss = -(teacher * log_student).sum(dim=1).mean()
    if me_weight > 0:
        mean_pred = F.softmax(student_logits / student_temp, dim=1).mean(dim=0)
        entropy = -torch.xlogy(mean_pred, mean_pred).sum()
        loss = loss - me_weight * entropy
    return loss


def branch_loss(parts: BranchLossParts, sup_weight: float):
    """Weighted sum of one branch's terms: (1-w)(unsup) + w(sup)."""
    if not 0.0 <= sup_weight <= 1.0:
        raise ValueError(f"sup_weight must be in [0, 1], got {sup_weight}")
    return ((1.0 - sup_weight) * (parts.un_nce + parts.un_cls)
            + sup_weight * (parts.sup_nce + parts.sup_cls))


def total_loss(origin, object_, origin_weight: float = 1.0, object_weight: float = 1.0):
    """Two-branch total: origin_weight * L_origin + object_weight * L_object."""
    if origin_weight < 0 or object_weight < 0:
        raise ValueError("branch weights must be >= 0")
    return origin_weight * origin + object_weight * object_
