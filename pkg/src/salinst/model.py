"""Full pipeline model: backbone + detection heads + segmentation branch
sharing one parameter set, plus training-step and inference entry points.

During training the ground-truth boxes are fed to the region extractor;
at inference the detection branch's proposals are used instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detector as D
from . import losses as L
from . import segbranch as S
from . import tensor as T
from .data import Sample
from .evaluate import Detection
from .roimask import BoxXYXY, MaskConfig
from .tensor import Tensor


@dataclass
class InferConfig:
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    proposals: int = 20


class SalientSegModel:
    def __init__(self, backbone_config: D.BackboneConfig, seg_config: S.SegBranchConfig,
                 mask_config: MaskConfig, params: Optional[Dict[str, Tensor]] = None,
                 rng: Optional[np.random.Generator] = None):
        self.backbone_config = backbone_config
        self.seg_config = seg_config
        self.mask_config = mask_config
        if params is None:
            if rng is None:
                rng = np.random.default_rng(0)
            params = {}
            params.update(D.init_backbone_params(backbone_config, rng))
            params.update(D.init_head_params(backbone_config, rng))
            params.update(S.init_segbranch_params(
                seg_config, backbone_config.lateral_channels, rng))
        self.params = params

    # -- forward pieces -----------------------------------------------------

    def laterals(self, image: Tensor) -> List[Tensor]:
        return D.backbone_forward(image, self.params, self.backbone_config)

    def detect_raw(self, image: Tensor):
        """Laterals plus flattened head outputs and matching anchors."""
        laterals = self.laterals(image)
        head_out = D.detection_heads(laterals, self.params)
        cls_flat, reg_flat, level_shapes = D.flatten_head_outputs(head_out)
        _, _, h, w = image.shape
        anchors = D.generate_anchors(self.backbone_config, h, w)
        return laterals, cls_flat, reg_flat, level_shapes, anchors

    # -- training -----------------------------------------------------------

    def training_loss(self, sample: Sample) -> Tuple[Tensor, L.LossBundle]:
        image = Tensor(sample.image)
        laterals, cls_flat, reg_flat, level_shapes, anchors = self.detect_raw(image)
        gt_boxes = [inst.box for inst in sample.instances]
        match = D.match_anchors(anchors, gt_boxes)

        l_obj = L.objectness_loss(cls_flat, match)
        if match.n_pos:
            idx = D.reg_flat_indices(level_shapes, len(self.backbone_config.aspect_ratios),
                                     match.pos_indices)
            deltas_pred = T.reshape(T.take(reg_flat, idx), (1, 1, match.n_pos, 4))
            l_coord = L.coord_loss(deltas_pred, match)
        else:
            l_coord = T.scalar(0.0)

        # ground-truth boxes drive the region extractor during training
        inst_logits = S.seg_forward(laterals[0], gt_boxes, self.params,
                                    self.seg_config, self.mask_config)
        gt_masks = [inst.mask for inst in sample.instances]
        l_seg = L.seg_loss(inst_logits, gt_masks, stride=self.mask_config.stride)
        return L.total_loss(l_obj, l_coord, l_seg)

    # -- inference ----------------------------------------------------------

    def propose(self, image: Tensor, infer: InferConfig) -> List[D.Proposal]:
        _, cls_flat, reg_flat, level_shapes, anchors = self.detect_raw(image)
        scores = 1.0 / (1.0 + np.exp(-cls_flat.data.reshape(-1)))
        keep = np.flatnonzero(scores >= infer.score_threshold)
        if keep.size == 0:
            keep = np.array([int(np.argmax(scores))])
        idx = D.reg_flat_indices(level_shapes, len(self.backbone_config.aspect_ratios), keep)
        deltas = reg_flat.data.reshape(-1)[idx].reshape(-1, 4)
        _, _, h, w = image.shape
        boxes = D.decode_boxes(anchors[keep], deltas, image_h=h, image_w=w)
        proposals = []
        for b, s in zip(boxes, scores[keep]):
            if b[2] - b[0] >= 1.0 and b[3] - b[1] >= 1.0:
                proposals.append(D.Proposal(box=BoxXYXY(*b), score=float(s)))
        proposals = D.nms(proposals, infer.nms_iou)
        return D.select_topk(proposals, infer.proposals)

    def infer(self, sample_image: np.ndarray, image_id: str,
              infer: InferConfig) -> List[Detection]:
        """Detect and segment; only the image is consulted, never annotations."""
        image = Tensor(sample_image)
        proposals = self.propose(image, infer)
        if not proposals:
            return []
        laterals = self.laterals(image)
        inst_logits = S.seg_forward(laterals[0], [p.box for p in proposals],
                                    self.params, self.seg_config, self.mask_config)
        _, _, h, w = image.shape
        detections = []
        for p, inst in zip(proposals, inst_logits):
            mask = S.logits_to_instance_mask(inst, h, w, stride=self.mask_config.stride)
            if mask.any():
                detections.append(Detection(image_id=image_id, mask=mask,
                                            score=p.score))
        return detections

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        T.save_checkpoint(self.params, path)

    @classmethod
    def load(cls, path, backbone_config: D.BackboneConfig,
             seg_config: S.SegBranchConfig, mask_config: MaskConfig):
        params = T.load_checkpoint(path)
        return cls(backbone_config, seg_config, mask_config, params=params)
