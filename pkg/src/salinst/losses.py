"""Multi-task objective: class-balanced objectness, smooth-L1 box
regression over positives, and per-pixel segmentation cross-entropy over
each proposal's supervised (mask support) region."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .detector import MatchResult
from .segbranch import InstanceLogits
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossBundle:
    l_obj: float
    l_coord: float
    l_seg: float
    total: float

    def as_row(self):
        return [self.total, self.l_obj, self.l_coord, self.l_seg]


def objectness_loss(cls_logits: Tensor, match: MatchResult) -> Tensor:
    """Balanced positive/negative objectness loss over flat anchor logits."""
    if match.n_pos == 0:
        log.warning("objectness_loss: no positive anchors; positive term dropped")
    if match.n_neg == 0:
        log.warning("objectness_loss: no negative anchors; negative term dropped")
    return T.balanced_objectness(cls_logits, match.pos_indices, match.neg_indices)


def coord_loss(deltas_pred: Tensor, match: MatchResult) -> Tensor:
    """Mean smooth-L1 over positive anchors, summed over the 4 coordinates.

    deltas_pred is the (1, 1, n_pos, 4) tensor gathered at the positive
    anchors' regression outputs.
    """
    if match.n_pos == 0:
        return T.scalar(0.0)
    if deltas_pred.shape != (1, 1, match.n_pos, 4):
        raise T.ShapeError(
            f"coord_loss: predictions {deltas_pred.shape} != (1, 1, {match.n_pos}, 4)")
    return T.smooth_l1(deltas_pred, match.deltas.reshape(1, 1, match.n_pos, 4))


def rasterize_target(gt_mask: np.ndarray, feat_h: int, feat_w: int,
                     stride: int) -> np.ndarray:
    """Sample an image-resolution binary mask at stride-grid cell centers."""
    rows = np.minimum(((np.arange(feat_h) + 0.5) * stride).astype(np.intp),
                      gt_mask.shape[0] - 1)
    cols = np.minimum(((np.arange(feat_w) + 0.5) * stride).astype(np.intp),
                      gt_mask.shape[1] - 1)
    return gt_mask[rows[:, None], cols[None, :]].astype(np.float64)


def seg_loss(logits: Sequence[InstanceLogits], gt_masks: Sequence[np.ndarray],
             stride: int = 8) -> Tensor:
    """BCE averaged over each proposal's supervised region, then over
    proposals. gt_masks[i] is the image-resolution binary mask of the
    instance matched to proposal i."""
    if len(logits) != len(gt_masks):
        raise ValueError(f"seg_loss: {len(logits)} proposals vs {len(gt_masks)} masks")
    terms: List[Tensor] = []
    for inst, gt_mask in zip(logits, gt_masks):
        _, _, fh, fw = inst.logits.shape
        support = inst.support.astype(np.float64)
        if support.sum() == 0:
            log.warning("seg_loss: proposal with empty supervised region skipped")
            continue
        target = rasterize_target(gt_mask, fh, fw, stride)
        terms.append(T.bce_with_support(inst.logits,
                                        target[None, None], support[None, None]))
    if not terms:
        return T.scalar(0.0)
    return T.mean_tensors(terms)


def total_loss(l_obj: Tensor, l_coord: Tensor, l_seg: Tensor):
    """Unweighted sum; returns the scalar graph tensor plus a LossBundle of
    the four values for logging."""
    parts = {"l_obj": l_obj.item(), "l_coord": l_coord.item(), "l_seg": l_seg.item()}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise FloatingPointError(f"total_loss: non-finite {name} = {value}")
    total = T.add(T.add(l_obj, l_coord), l_seg)
    bundle = LossBundle(parts["l_obj"], parts["l_coord"], parts["l_seg"], total.item())
    return total, bundle


class LossLogger:
    """Appends per-step loss components to a CSV file."""

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(["step", "loss", "l_obj", "l_coord", "l_seg", "lr"])

    def log(self, step: int, bundle: LossBundle, lr: float) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([step] + bundle.as_row() + [lr])
