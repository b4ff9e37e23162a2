"""Mask-IoU average precision, occlusion-subset metrics, and gradient
attribution maps over the pre-masking feature tensor."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import tensor as T
from .data import Sample
from .roimask import BoxXYXY, RoiMask


@dataclass
class Detection:
    image_id: str
    mask: np.ndarray            # (h, w) bool, image resolution
    score: float


@dataclass
class PRCurve:
    recall: List[float]
    precision: List[float]


@dataclass
class EvalReport:
    map50: Optional[float]
    map70: Optional[float]
    map50_occluded: Optional[float]
    map70_occluded: Optional[float]
    curves: Dict[str, PRCurve] = field(default_factory=dict)

    def as_dict(self):
        return {"mAP@0.5": self.map50, "mAP@0.7": self.map70,
                "mAP_O@0.5": self.map50_occluded, "mAP_O@0.7": self.map70_occluded}

    def table(self) -> str:
        rows = ["metric        value", "-" * 19]
        for k, v in self.as_dict().items():
            rows.append(f"{k:<12}  {'-' if v is None else f'{v:.4f}'}")
        return "\n".join(rows)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: resolution mismatch {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = (a | b).sum()
    if union == 0:
        raise ValueError("mask_iou: both masks empty")
    return (a & b).sum() / union


def average_precision(detections: Sequence[Detection],
                      gts: Dict[str, List[np.ndarray]],
                      iou_thr: float,
                      ignore: Optional[Dict[str, List[np.ndarray]]] = None
                      ) -> Tuple[Optional[float], PRCurve]:
    """COCO-style greedy matching + all-point interpolated AP.

    gts maps image id to the ground-truth masks being scored; ignore maps
    image id to masks whose matching detections are dropped from the
    ranking instead of counting as false positives (used for the
    occlusion subset).
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None, PRCurve([], [])
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    matched = {img: np.zeros(len(v), dtype=bool) for img, v in gts.items()}
    tp_flags, fp_flags = [], []
    for i in order:
        det = detections[i]
        cand = gts.get(det.image_id, [])
        best, best_j = 0.0, -1
        for j, g in enumerate(cand):
            if matched[det.image_id][j]:
                continue
            iou = mask_iou(det.mask, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thr:
            matched[det.image_id][best_j] = True
            tp_flags.append(1)
            fp_flags.append(0)
            continue
        if ignore is not None and any(
                mask_iou(det.mask, g) >= iou_thr for g in ignore.get(det.image_id, [])):
            continue   # matches an out-of-subset gt: not a false positive
        tp_flags.append(0)
        fp_flags.append(1)

    if not tp_flags:
        return 0.0, PRCurve([], [])
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(fp_flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope, then all-point integration
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p, is_tp in zip(recall, env, tp_flags):
        if is_tp:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap), PRCurve(list(recall), list(precision))


def occlusion_subset(sample: Sample, mode: str = "flag",
                     overlap_thr: float = 0.05) -> List[int]:
    """Indices of occluded instances.

    mode "flag" uses the generator's occluded flags; mode "overlap" is the
    fallback for data without flags and selects instances whose tight box
    overlaps another instance's box with IoU above overlap_thr.
    """
    if mode == "flag":
        return [i for i, inst in enumerate(sample.instances) if inst.occluded]
    if mode != "overlap":
        raise ValueError(f"occlusion_subset: unknown mode {mode!r}")
    from .detector import iou_xyxy
    out = []
    boxes = [inst.box.as_tuple() for inst in sample.instances]
    for i in range(len(boxes)):
        if any(iou_xyxy(boxes[i], boxes[j]) > overlap_thr
               for j in range(len(boxes)) if j != i):
            out.append(i)
    return out


def evaluate_detections(detections: Sequence[Detection], samples: Sequence[Sample],
                        thresholds=(0.5, 0.7)) -> EvalReport:
    gts_all = {s.id: [inst.mask for inst in s.instances] for s in samples}
    occ, rest = {}, {}
    for s in samples:
        occ_idx = set(occlusion_subset(s))
        occ[s.id] = [inst.mask for i, inst in enumerate(s.instances) if i in occ_idx]
        rest[s.id] = [inst.mask for i, inst in enumerate(s.instances) if i not in occ_idx]

    values, curves = {}, {}
    for thr in thresholds:
        ap, curve = average_precision(detections, gts_all, thr)
        values[f"all@{thr}"] = ap
        curves[f"all@{thr}"] = curve
        ap_o, curve_o = average_precision(detections, occ, thr, ignore=rest)
        values[f"occ@{thr}"] = ap_o
        curves[f"occ@{thr}"] = curve_o
    report = EvalReport(map50=values.get("all@0.5"), map70=values.get("all@0.7"),
                        map50_occluded=values.get("occ@0.5"),
                        map70_occluded=values.get("occ@0.7"), curves=curves)
    _check_monotone(report)
    return report


def _check_monotone(report: EvalReport) -> None:
    for loose, strict in ((report.map50, report.map70),
                          (report.map50_occluded, report.map70_occluded)):
        if loose is not None and strict is not None and strict > loose + 1e-9:
            raise AssertionError(
                f"AP at stricter threshold ({strict}) exceeds looser ({loose})")


def report_write(report: EvalReport, out_dir) -> None:
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        json.dump(report.as_dict(), f, indent=2)
    (out_dir / "report.txt").write_text(report.table() + "\n")
    for name, curve in report.curves.items():
        with open(out_dir / f"pr_{name.replace('@', '_')}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["recall", "precision"])
            for r, p in zip(curve.recall, curve.precision):
                w.writerow([r, p])


# ---------------------------------------------------------------------------
# gradient attribution


@dataclass
class GradientMap:
    values: np.ndarray          # (feat_h, feat_w), sum over channels of |grad|
    mask: RoiMask


def gradient_map(model, sample: Sample, box: BoxXYXY) -> GradientMap:
    """Backprop the segmentation loss to the pre-masking features (weights
    held constant) and reduce by the channel-wise absolute sum."""
    from .losses import seg_loss
    from .segbranch import seg_forward_from_features, compress_features

    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            raise ValueError(f"gradient_map: parameter {name} contains non-finite values")

    image = T.Tensor(sample.image)
    laterals = model.laterals(image)
    features = compress_features(laterals[0], model.params)
    leaf = T.Tensor(features.data.copy(), requires_grad=True)

    gt_idx = _best_instance(sample, box)
    inst_logits = seg_forward_from_features(leaf, [box], model.params,
                                            model.seg_config, model.mask_config)
    loss = seg_loss(inst_logits, [sample.instances[gt_idx].mask],
                    stride=model.mask_config.stride)
    loss.backward()
    if leaf.grad is None:
        raise ValueError("gradient_map: no gradient reached the feature tensor")
    values = np.abs(leaf.grad[0]).sum(axis=0)
    return GradientMap(values=values, mask=inst_logits[0].mask
                       or _fallback_mask(box, model, features.shape))


def _best_instance(sample: Sample, box: BoxXYXY) -> int:
    from .detector import iou_xyxy
    ious = [iou_xyxy(box.as_tuple(), inst.box.as_tuple()) for inst in sample.instances]
    return int(np.argmax(ious))


def _fallback_mask(box, model, feat_shape):
    from .roimask import make_mask
    _, _, fh, fw = feat_shape
    return make_mask(box, model.mask_config, fh, fw)


def band_mass_ratio(gmap: GradientMap) -> float:
    """Fraction of total gradient mass carried by the -1 band region."""
    total = gmap.values.sum()
    if total <= 0:
        return 0.0
    band = _band_region(gmap.mask)
    return float(gmap.values[band].sum() / total)


def _band_region(mask: RoiMask) -> np.ndarray:
    """Cells between the inner and (clipped) outer box, any mask mode."""
    fh, fw = mask.values.shape
    cy = np.arange(fh) + 0.5
    cx = np.arange(fw) + 0.5
    inner = (((cy >= mask.inner_box.y0) & (cy < mask.inner_box.y1))[:, None]
             & ((cx >= mask.inner_box.x0) & (cx < mask.inner_box.x1))[None, :])
    outer = (((cy >= mask.outer_box.y0) & (cy < mask.outer_box.y1))[:, None]
             & ((cx >= mask.outer_box.x0) & (cx < mask.outer_box.x1))[None, :])
    return outer & ~inner


def gradient_map_write(gmap: GradientMap, out_dir, stem: str = "gradient_map") -> None:
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    peak = gmap.values.max()
    gray = np.zeros_like(gmap.values) if peak == 0 else gmap.values / peak
    Image.fromarray((gray * 255).astype(np.uint8)).save(out_dir / f"{stem}.png")
    with open(out_dir / f"{stem}.csv", "w", newline="") as f:
        w = csv.writer(f)
        for row in gmap.values:
            w.writerow([f"{v:.6e}" for v in row])
