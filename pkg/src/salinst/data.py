"""Synthetic occluding-shapes dataset: generation, PNG/JSONL round-trip
I/O, and horizontal-flip augmentation.

Each sample is a textured background with 1..6 high-contrast shapes drawn
in depth order; a later shape placed over an earlier one hides part of
its mask, and an instance counts as occluded once >= 10% of its area is
hidden. Images are quantized to 8-bit levels at generation time so the
PNG round-trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .roimask import BoxXYXY

SHAPES = ("rectangle", "ellipse", "triangle")


@dataclass
class SynthConfig:
    image_size: int = 64
    min_instances: int = 1
    max_instances: int = 3
    shapes: Tuple[str, ...] = SHAPES
    occlusion_prob: float = 0.5
    min_shape: int = 14
    max_shape: int = 30
    contrast: Tuple[float, float] = (0.35, 0.6)
    noise_amp: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError(f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}")
        if self.max_shape >= self.image_size:
            raise ValueError(
                f"max_shape {self.max_shape} must be smaller than image_size {self.image_size}")
        if self.image_size % 64:
            raise ValueError(f"image_size must be divisible by 64, got {self.image_size}")


@dataclass
class InstanceAnnotation:
    mask: np.ndarray            # (h, w) bool, visible pixels only
    box: BoxXYXY                # tight bounds of mask, pixel coordinates
    occluded: bool = False


@dataclass
class Sample:
    image: np.ndarray           # (1, 3, h, w) float64 in [0, 1]
    instances: List[InstanceAnnotation]
    id: str


def tight_box(mask: np.ndarray) -> BoxXYXY:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("tight_box: empty mask")
    return BoxXYXY(float(cols[0]), float(rows[0]),
                   float(cols[-1] + 1), float(rows[-1] + 1))


# ---------------------------------------------------------------------------
# shape rasterization


def _raster_shape(kind: str, cx: float, cy: float, w: float, h: float,
                  size: int, rng) -> np.ndarray:
    xs = np.arange(size) + 0.5
    ys = np.arange(size) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    if kind == "rectangle":
        return ((np.abs(gx - cx) <= w / 2) & (np.abs(gy - cy) <= h / 2))
    if kind == "ellipse":
        return (((gx - cx) / (w / 2)) ** 2 + ((gy - cy) / (h / 2)) ** 2) <= 1.0
    if kind == "triangle":
        for _ in range(20):
            px = cx + (rng.random(3) - 0.5) * w
            py = cy + (rng.random(3) - 0.5) * h
            area2 = abs((px[1] - px[0]) * (py[2] - py[0])
                        - (px[2] - px[0]) * (py[1] - py[0]))
            if area2 >= 0.3 * w * h:
                break
        d0 = (gx - px[0]) * (py[1] - py[0]) - (gy - py[0]) * (px[1] - px[0])
        d1 = (gx - px[1]) * (py[2] - py[1]) - (gy - py[1]) * (px[2] - px[1])
        d2 = (gx - px[2]) * (py[0] - py[2]) - (gy - py[2]) * (px[0] - px[2])
        return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    raise ValueError(f"unknown shape kind {kind!r}")


def _place_disjoint(full_masks, kind, w, h, size, rng, tries=40):
    for _ in range(tries):
        cx = rng.uniform(w / 2 + 1, size - w / 2 - 1)
        cy = rng.uniform(h / 2 + 1, size - h / 2 - 1)
        m = _raster_shape(kind, cx, cy, w, h, size, rng)
        if m.sum() < 9:
            continue
        if not any((m & fm).any() for fm in full_masks):
            return m
    return None


def _shift_mask(m: np.ndarray, dy: int, dx: int):
    """Translate a boolean mask; returns None if any set pixel would leave
    the canvas."""
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    h, w = m.shape
    if (rows[0] + dy < 0 or rows[-1] + dy >= h
            or cols[0] + dx < 0 or cols[-1] + dx >= w):
        return None
    out = np.zeros_like(m)
    src = m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    out[rows[0] + dy:rows[-1] + 1 + dy, cols[0] + dx:cols[-1] + 1 + dx] = src
    return out


def _place_occluding(others, target: np.ndarray, kind, w, h, size, rng, tries=40):
    """Place a shape that hides 10..80% of the target and touches nothing
    else. The shape is rasterized once over the target's center and slid
    outward along a random direction; coverage falls monotonically with the
    offset, so a bisection lands inside the wide coverage window."""
    tb = tight_box(target)
    tcx, tcy = tb.center
    t_area = target.sum()
    # a too-small occluder could never hide 10% of the target; triangles
    # keep at least 0.3*w*h of their bounding area, so size up if needed
    scale = np.sqrt(0.4 * t_area / (w * h))
    if scale > 1.0:
        w = min(w * scale, size - 2.0)
        h = min(h * scale, size - 2.0)

    def coverage(m):
        return (m & target).sum() / t_area

    for _ in range(tries):
        base = _raster_shape(kind, tcx, tcy, w, h, size, rng)
        if base.sum() < 9:
            continue

        def at(dist, ux, uy):
            return _shift_mask(base, int(round(dist * uy)), int(round(dist * ux)))

        theta = rng.uniform(0.0, 2.0 * np.pi)
        ux, uy = np.cos(theta), np.sin(theta)
        lo, hi = 0.0, np.hypot((tb.width + w) / 2, (tb.height + h) / 2) + 2.0
        m = at(lo, ux, uy)
        if m is None or coverage(m) < 0.1:
            continue
        found = None
        if coverage(m) <= 0.8:
            found = m
        for _ in range(30):
            if found is not None:
                break
            mid = 0.5 * (lo + hi)
            m = at(mid, ux, uy)
            cov = coverage(m) if m is not None else 0.0
            if cov > 0.8:
                lo = mid
            elif cov < 0.1:
                hi = mid
            else:
                found = m
        if found is not None and not any((found & o).any() for o in others):
            return found
    return None


def _sample_layout(config: SynthConfig, rng_layout):
    """Instance count and per-shape overlap decisions. Drawn from a separate
    stream so placement retries cannot bias the occlusion statistics."""
    n_shapes = int(rng_layout.integers(config.min_instances, config.max_instances + 1))
    overlaps = [i > 0 and rng_layout.random() < config.occlusion_prob
                for i in range(n_shapes)]
    return n_shapes, overlaps


def _generate_one(config: SynthConfig, layout, rng, sample_id: str) -> Optional[Sample]:
    size = config.image_size
    n_shapes, overlaps = layout

    full_masks: List[np.ndarray] = []
    for i in range(n_shapes):
        kind = str(rng.choice(config.shapes))
        w = rng.uniform(config.min_shape, config.max_shape)
        h = rng.uniform(config.min_shape, config.max_shape)
        if overlaps[i]:
            m = _place_occluding(full_masks[:-1], full_masks[i - 1], kind, w, h, size, rng)
        else:
            m = _place_disjoint(full_masks, kind, w, h, size, rng)
        if m is None:
            return None
        full_masks.append(m)

    # later shapes are on top; visible mask excludes everything drawn above
    visible = []
    for i, m in enumerate(full_masks):
        vis = m.copy()
        for later in full_masks[i + 1:]:
            vis &= ~later
        if not vis.any():
            return None
        visible.append(vis)

    # background: coarse texture plus pixel noise
    bg_base = rng.uniform(0.35, 0.55)
    coarse = rng.uniform(-0.06, 0.06, (3, size // 8, size // 8))
    image = bg_base + np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)
    lo, hi = config.contrast
    for i, m in enumerate(full_masks):
        delta = rng.uniform(lo, hi, 3) * rng.choice([-1.0, 1.0])
        color = np.clip(bg_base + delta, 0.02, 0.98)
        vis = visible[i]
        for ch in range(3):
            image[ch][vis] = color[ch]
    image += rng.normal(0.0, config.noise_amp, image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    instances = []
    for i, vis in enumerate(visible):
        hidden = 1.0 - vis.sum() / full_masks[i].sum()
        instances.append(InstanceAnnotation(mask=vis, box=tight_box(vis),
                                            occluded=bool(hidden >= 0.1)))
    return Sample(image=image[None], instances=instances, id=sample_id)


def synth_generate(config: SynthConfig, n: int) -> List[Sample]:
    """Generate n samples, deterministic under config.seed."""
    if n < 1:
        raise ValueError(f"synth_generate: n must be >= 1, got {n}")
    samples = []
    for i in range(n):
        layout = _sample_layout(config, np.random.default_rng([config.seed, i]))
        for attempt in range(50):
            rng = np.random.default_rng([config.seed, i, attempt])
            s = _generate_one(config, layout, rng, sample_id=f"synth_{config.seed}_{i:05d}")
            if s is not None:
                samples.append(s)
                break
        else:
            raise RuntimeError(f"synth_generate: could not place shapes for sample {i}; "
                               "config leaves too little room")
    return samples


# ---------------------------------------------------------------------------
# dataset I/O


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path)


def dataset_write(samples: Sequence[Sample], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "annotations.jsonl", "w") as f:
        for s in samples:
            img8 = np.round(s.image[0] * 255.0).astype(np.uint8).transpose(1, 2, 0)
            image_rel = f"images/{s.id}.png"
            _save_png(img8, root / image_rel)
            records = []
            for k, inst in enumerate(s.instances):
                mask_rel = f"masks/{s.id}_{k:02d}.png"
                _save_png(inst.mask.astype(np.uint8) * 255, root / mask_rel)
                records.append({"box": [float(v) for v in inst.box.as_tuple()],
                                "occluded": bool(inst.occluded), "mask": mask_rel})
            f.write(json.dumps({"id": s.id, "image": image_rel,
                                "instances": records}) + "\n")


def dataset_read(root) -> List[Sample]:
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"{ann}: annotations file not found")
    samples = []
    with open(ann) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                with Image.open(root / rec["image"]) as im:
                    img8 = np.asarray(im.convert("RGB"))
                image = img8.astype(np.float64).transpose(2, 0, 1)[None] / 255.0
                instances = []
                for r in rec["instances"]:
                    mask_path = root / r["mask"]
                    if not mask_path.exists():
                        raise FileNotFoundError(f"missing mask file {mask_path}")
                    with Image.open(mask_path) as im:
                        mask = np.asarray(im) > 127
                    instances.append(InstanceAnnotation(
                        mask=mask, box=BoxXYXY(*r["box"]), occluded=bool(r["occluded"])))
                samples.append(Sample(image=image, instances=instances, id=rec["id"]))
            except (KeyError, ValueError, FileNotFoundError) as e:
                raise ValueError(f"{ann}:{lineno}: malformed record: {e}") from e
    return samples


def augment_hflip(sample: Sample) -> Sample:
    """Mirror image, masks, and boxes about the vertical axis."""
    w = sample.image.shape[3]
    instances = []
    for inst in sample.instances:
        instances.append(InstanceAnnotation(
            mask=inst.mask[:, ::-1].copy(),
            box=BoxXYXY(w - inst.box.x1, inst.box.y0, w - inst.box.x0, inst.box.y1),
            occluded=inst.occluded))
    return Sample(image=sample.image[:, :, :, ::-1].copy(),
                  instances=instances, id=sample.id)


def split_dataset(samples: Sequence[Sample], ratios=(0.5, 0.2, 0.3)):
    """Train/val/test split in the given proportions, in generation order."""
    n = len(samples)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return (list(samples[:n_train]), list(samples[n_train:n_train + n_val]),
            list(samples[n_train + n_val:]))
