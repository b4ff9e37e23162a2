"""Single-shot anchor detection over a 4-level FPN-lite backbone.

The backbone is a small conv stack producing laterals at strides
8/16/32/64 (no stride-4 lateral). Each lateral feeds a detection head
(3x3 conv then sibling 1x1 convs) predicting class-agnostic objectness
logits and 4-vector box deltas per anchor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .roimask import BoxXYXY
from .tensor import Tensor

STRIDES = (8, 16, 32, 64)


@dataclass(frozen=True)
class BackboneConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    lateral_channels: int = 256
    in_channels: int = 3
    aspect_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scale_mult: float = 4.0   # anchor side = mult * stride

    @property
    def stage_widths(self) -> Tuple[int, ...]:
        # strides 2..64; the deepest width is reused past stage 4
        w = self.widths
        return (w[0], w[1], w[2], w[3], w[3], w[3])


@dataclass
class Proposal:
    box: BoxXYXY
    score: float


@dataclass
class MatchResult:
    """Anchor-to-ground-truth assignment."""
    pos_indices: np.ndarray       # indices into the anchor list
    neg_indices: np.ndarray
    deltas: np.ndarray            # (n_pos, 4) regression targets
    matched_gt: np.ndarray        # (n_pos,) gt index per positive

    @property
    def n_pos(self) -> int:
        return int(self.pos_indices.size)

    @property
    def n_neg(self) -> int:
        return int(self.neg_indices.size)


# ---------------------------------------------------------------------------
# parameter initialization

RELU_GAIN = math.sqrt(2.0)   # keeps activation variance stable through ReLU


def _conv_params(rng, name, c_in, c_out, k, params, gain=1.0, zero=False):
    """Centered-uniform fan-in-scaled weights, zero bias.

    gain widens the bound for ReLU-followed layers; zero=True zeroes the
    weights too (prediction layers start at the neutral output: objectness
    probability 0.5, box deltas 0, mask logits 0)."""
    fan_in = c_in * k * k
    bound = gain / math.sqrt(fan_in)
    if zero:
        w = np.zeros((c_out, c_in, k, k))
    else:
        w = rng.uniform(-bound, bound, (c_out, c_in, k, k))
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True)


def init_backbone_params(config: BackboneConfig, rng) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    c_prev = config.in_channels
    for i, width in enumerate(config.stage_widths):
        _conv_params(rng, f"backbone.stage{i + 1}a", c_prev, width, 3, params,
                     gain=RELU_GAIN)
        _conv_params(rng, f"backbone.stage{i + 1}b", width, width, 3, params,
                     gain=RELU_GAIN)
        c_prev = width
    lat_src = config.stage_widths[2:]   # strides 8..64
    for i, width in enumerate(lat_src):
        _conv_params(rng, f"fpn.lateral{i}", width, config.lateral_channels, 1, params)
        _conv_params(rng, f"fpn.smooth{i}", config.lateral_channels,
                     config.lateral_channels, 3, params)
    return params


def init_head_params(config: BackboneConfig, rng) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    cl = config.lateral_channels
    n_a = len(config.aspect_ratios)
    for i in range(4):
        _conv_params(rng, f"head{i}.conv", cl, cl, 3, params, gain=RELU_GAIN)
        _conv_params(rng, f"head{i}.cls", cl, n_a, 1, params, zero=True)
        _conv_params(rng, f"head{i}.reg", cl, 4 * n_a, 1, params, zero=True)
    return params


def _conv(params, name, x, **kw):
    return T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], **kw)


# ---------------------------------------------------------------------------
# forward passes


def backbone_forward(image: Tensor, params: Dict[str, Tensor],
                     config: BackboneConfig) -> List[Tensor]:
    """Return the four laterals (strides 8, 16, 32, 64), coarse to fine
    merged top-down with nearest-neighbor 2x upsampling."""
    _, _, h, w = image.shape
    if h % 64 or w % 64:
        raise T.ShapeError(
            f"backbone_forward: input {h}x{w} must be divisible by 64")
    x = image
    stages = []
    for i in range(6):
        x = T.relu(_conv(params, f"backbone.stage{i + 1}a", x, stride=2, padding=1))
        x = T.relu(_conv(params, f"backbone.stage{i + 1}b", x, padding=1))
        stages.append(x)
    c3_to_c6 = stages[2:]

    laterals = [_conv(params, f"fpn.lateral{i}", c) for i, c in enumerate(c3_to_c6)]
    merged = [None] * 4
    merged[3] = laterals[3]
    for i in (2, 1, 0):
        merged[i] = T.add(laterals[i], T.upsample_nearest2x(merged[i + 1]))
    return [_conv(params, f"fpn.smooth{i}", m, padding=1) for i, m in enumerate(merged)]


def detection_heads(laterals: Sequence[Tensor],
                    params: Dict[str, Tensor]) -> List[Tuple[Tensor, Tensor]]:
    """Per level: (objectness logits (1, A, h, w), box deltas (1, 4A, h, w))."""
    if len(laterals) != 4:
        raise T.ShapeError(f"detection_heads: expected 4 laterals, got {len(laterals)}")
    out = []
    for i, lat in enumerate(laterals):
        h = T.relu(_conv(params, f"head{i}.conv", lat, padding=1))
        out.append((_conv(params, f"head{i}.cls", h), _conv(params, f"head{i}.reg", h)))
    return out


def flatten_head_outputs(head_out) -> Tuple[Tensor, Tensor, List[Tuple[int, int]]]:
    """Concatenate per-level maps into flat vectors aligned with the anchor
    enumeration (level-major, then ratio, then row, then column)."""
    cls_parts, reg_parts, level_shapes = [], [], []
    for cls, reg in head_out:
        _, a, h, w = cls.shape
        level_shapes.append((h, w))
        cls_parts.append(T.reshape(cls, (1, 1, 1, a * h * w)))
        reg_parts.append(T.reshape(reg, (1, 1, 1, 4 * a * h * w)))
    return T.concat(cls_parts), T.concat(reg_parts), level_shapes


def reg_flat_indices(level_shapes, aspect_count: int, anchor_indices) -> np.ndarray:
    """Flat indices into the concatenated reg vector for the 4 deltas of each
    given anchor, ordered (anchor, coord)."""
    level_sizes = [aspect_count * h * w for h, w in level_shapes]
    anchor_offsets = np.cumsum([0] + level_sizes)
    reg_offsets = np.cumsum([0] + [4 * s for s in level_sizes])
    out = np.empty((len(anchor_indices), 4), dtype=np.intp)
    for row, idx in enumerate(np.asarray(anchor_indices)):
        lvl = int(np.searchsorted(anchor_offsets, idx, side="right") - 1)
        local = idx - anchor_offsets[lvl]
        h, w = level_shapes[lvl]
        a, rest = divmod(local, h * w)
        i, j = divmod(rest, w)
        for k in range(4):
            # reg channel layout is a*4+k, raveled (channel, row, col)
            out[row, k] = reg_offsets[lvl] + ((a * 4 + k) * h + i) * w + j
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# anchors


def generate_anchors(config: BackboneConfig, image_h: int, image_w: int) -> np.ndarray:
    """(n, 4) anchor array ordered to match flatten_head_outputs."""
    boxes = []
    for stride in STRIDES:
        h, w = image_h // stride, image_w // stride
        side = config.anchor_scale_mult * stride
        for ratio in config.aspect_ratios:
            aw = side / math.sqrt(ratio)
            ah = side * math.sqrt(ratio)
            for i in range(h):
                cy = (i + 0.5) * stride
                for j in range(w):
                    cx = (j + 0.5) * stride
                    boxes.append((cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2))
    return np.array(boxes)


# ---------------------------------------------------------------------------
# box arithmetic


def iou_xyxy(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) box arrays."""
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2])
                 - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3])
                 - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.maximum(union, 1e-12), 0.0)


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Center-offset / log-scale deltas mapping anchors onto gt boxes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gcx = gt[:, 0] + 0.5 * gw
    gcy = gt[:, 1] + 0.5 * gh
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah,
                     np.log(gw / aw), np.log(gh / ah)], axis=1)


_LOG_CLAMP = math.log(1000.0)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray,
                 image_h: Optional[int] = None,
                 image_w: Optional[int] = None) -> np.ndarray:
    if not np.all(np.isfinite(deltas)):
        raise ValueError("decode_boxes: non-finite deltas")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -_LOG_CLAMP, _LOG_CLAMP))
    h = ah * np.exp(np.clip(deltas[:, 3], -_LOG_CLAMP, _LOG_CLAMP))
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if image_w is not None:
        boxes[:, 0] = np.clip(boxes[:, 0], 0, image_w)
        boxes[:, 2] = np.clip(boxes[:, 2], 0, image_w)
    if image_h is not None:
        boxes[:, 1] = np.clip(boxes[:, 1], 0, image_h)
        boxes[:, 3] = np.clip(boxes[:, 3], 0, image_h)
    return boxes


# ---------------------------------------------------------------------------
# matching, NMS, selection


def match_anchors(anchors: np.ndarray, gt_boxes: Sequence[BoxXYXY],
                  pos_thr: float = 0.5, neg_thr: float = 0.5) -> MatchResult:
    """Positive iff max IoU over gt strictly above pos_thr, negative iff
    strictly below neg_thr; the best anchor per gt is additionally forced
    positive so no ground truth goes unmatched."""
    n = anchors.shape[0]
    if not gt_boxes:
        return MatchResult(pos_indices=np.empty(0, dtype=np.intp),
                           neg_indices=np.arange(n, dtype=np.intp),
                           deltas=np.empty((0, 4)),
                           matched_gt=np.empty(0, dtype=np.intp))
    gt = np.array([b.as_tuple() for b in gt_boxes])
    ious = iou_matrix(anchors, gt)          # (n, m)
    best_iou = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)

    matched = best_gt.copy()
    forced = np.zeros(n, dtype=bool)
    for g in range(gt.shape[0]):
        a_star = int(np.argmax(ious[:, g]))
        if not forced[a_star] or ious[a_star, g] > ious[a_star, matched[a_star]]:
            matched[a_star] = g
        forced[a_star] = True

    pos = np.flatnonzero((best_iou > pos_thr) | forced)
    neg = np.flatnonzero((best_iou < neg_thr) & ~forced)
    deltas = encode_boxes(gt[matched[pos]], anchors[pos])
    return MatchResult(pos_indices=pos, neg_indices=neg,
                       deltas=deltas, matched_gt=matched[pos])


def nms(proposals: List[Proposal], iou_thr: float = 0.5) -> List[Proposal]:
    """Greedy descending-score suppression; ties broken by lower index."""
    if any(not math.isfinite(p.score) for p in proposals):
        raise ValueError("nms: non-finite proposal score")
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
    kept: List[int] = []
    for i in order:
        box_i = proposals[i].box.as_tuple()
        if all(iou_xyxy(box_i, proposals[j].box.as_tuple()) <= iou_thr for j in kept):
            kept.append(i)
    return [proposals[i] for i in kept]


def select_topk(proposals: List[Proposal], k: int = 20) -> List[Proposal]:
    if k < 1:
        raise ValueError(f"select_topk: k must be >= 1, got {k}")
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
    return [proposals[i] for i in order[:k]]


def proposals_to_csv(rows, path) -> None:
    """rows: iterable of (image_id, Proposal)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "x0", "y0", "x1", "y1", "score"])
        for image_id, p in rows:
            writer.writerow([image_id, *p.box.as_tuple(), p.score])
