"""Hungarian set loss on a fixed assignment.

The assignment is a constant during differentiation: gradients flow through
the class logits and predicted boxes only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor, log_softmax
from .boxes import giou, giou_tensor
from .config import LossConfig
from .matching import Assignment, MatchingError

__all__ = ["LossBreakdown", "Target", "giou", "set_loss", "batch_set_loss"]


@dataclass(frozen=True)
class Target:
    """Ground truth for one image: class ids ``[M]`` and centre boxes ``[M, 4]``."""

    classes: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "classes", np.asarray(self.classes, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "boxes", np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4))
        if len(self.classes) != len(self.boxes):
            raise ValueError(f"{len(self.classes)} classes but {len(self.boxes)} boxes")

    def __len__(self) -> int:
        return len(self.classes)

    def permuted(self, order) -> "Target":
        order = np.asarray(order)
        return Target(self.classes[order], self.boxes[order])


@dataclass
class LossBreakdown:
    total: Tensor
    class_loss: Tensor
    l1_loss: Tensor
    giou_loss: Tensor
    matched_count: int

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "class": self.class_loss.item(),
            "l1": self.l1_loss.item(),
            "giou": self.giou_loss.item(),
            "matched_count": self.matched_count,
        }


def _check_assignment(assignment: Assignment, n: int, m: int) -> None:
    if assignment.num_predictions != n or assignment.num_targets != m:
        raise MatchingError(
            f"assignment covers {assignment.num_predictions}x{assignment.num_targets}, expected {n}x{m}"
        )
    if len(set(assignment.pred_for_target)) != m:
        raise MatchingError("assignment is not injective")


def batch_set_loss(
    class_logits: Tensor,
    boxes: Tensor,
    targets: Sequence[Target],
    assignments: Sequence[Assignment],
    weights: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Set loss over a batch of ``B`` images with ``N`` slots each.

    Class term: per-slot cross-entropy, no-object slots scaled by
    ``eos_coef``, averaged over all ``B*N`` slots. Box terms: summed over
    matched pairs and divided by the total number of targets (at least 1).
    """
    b, n, k = class_logits.shape
    if len(targets) != b or len(assignments) != b:
        raise ValueError(f"batch of {b} predictions but {len(targets)} targets / {len(assignments)} assignments")
    no_object = k - 1
    target_class = np.full((b, n), no_object, dtype=np.int64)
    slot_weight = np.full((b, n), weights.eos_coef)
    flat_rows, tgt_boxes = [], []
    for i, (tgt, asg) in enumerate(zip(targets, assignments)):
        _check_assignment(asg, n, len(tgt))
        # prediction-index order keeps the reduction independent of target order
        for r, j in asg.pairs():
            target_class[i, r] = tgt.classes[j]
            slot_weight[i, r] = 1.0
            flat_rows.append(i * n + r)
            tgt_boxes.append(tgt.boxes[j])

    onehot = np.zeros((b, n, k))
    np.put_along_axis(onehot, target_class[..., None], 1.0, axis=-1)
    nll = (log_softmax(class_logits, axis=-1) * onehot).sum(axis=-1) * -1.0
    class_loss = (nll * slot_weight).sum() * (1.0 / (b * n))

    matched = len(flat_rows)
    norm = 1.0 / max(matched, 1)
    if matched:
        pred = boxes.reshape(b * n, 4)[np.array(flat_rows)]
        tb = np.array(tgt_boxes)
        l1_loss = (pred - tb).abs().sum() * norm
        giou_loss = (1.0 - giou_tensor(pred, tb)).sum() * norm
    else:
        # zero-valued but still on the tape so backward reaches the box head
        l1_loss = boxes.sum() * 0.0
        giou_loss = boxes.sum() * 0.0
    total = class_loss * weights.weight_class + l1_loss * weights.weight_l1 + giou_loss * weights.weight_giou
    return LossBreakdown(total, class_loss, l1_loss, giou_loss, matched)


def set_loss(
    class_logits: Tensor,
    boxes: Tensor,
    target: Target,
    assignment: Assignment,
    weights: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Single-image set loss; ``class_logits [N, C+1]``, ``boxes [N, 4]``."""
    n, k = class_logits.shape
    return batch_set_loss(
        class_logits.reshape(1, n, k), boxes.reshape(1, n, 4), [target], [assignment], weights
    )
