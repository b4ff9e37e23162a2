"""Segmentation branch: channel compression, region feature extraction,
then a dilated/residual conv stack producing per-proposal instance logits
at the stride-8 resolution.

The default extractor multiplies the compressed features by a box-derived
mask and keeps the full feature extent; RoIAlign/RoIPool baselines (used
for ablations) crop to a fixed grid instead and their logits are pasted
back into the box afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .detector import RELU_GAIN, _conv, _conv_params
from .roimask import BoxXYXY, MaskConfig, RoiMask, apply_mask, make_mask
from .tensor import Tensor, _from_op

EXTRACTORS = ("roimasking_ternary", "roimasking_binary", "roimasking_expanded",
              "roialign", "roipool")

_EXTRACTOR_TO_MODE = {
    "roimasking_ternary": "ternary",
    "roimasking_binary": "binary",
    "roimasking_expanded": "expanded_binary",
}


@dataclass(frozen=True)
class SegBranchConfig:
    compress_channels: int = 256
    head_channels: Tuple[int, int, int] = (128, 128, 128)
    mid_channels: int = 64
    dilation: int = 2
    extractor: str = "roimasking_ternary"
    roi_out_size: int = 8    # roialign/roipool only

    def __post_init__(self):
        if self.extractor not in EXTRACTORS:
            raise ValueError(f"unknown extractor {self.extractor!r}")

    def mask_mode(self) -> Optional[str]:
        return _EXTRACTOR_TO_MODE.get(self.extractor)


@dataclass
class InstanceLogits:
    """Full-frame logit map at stride-8 resolution for one proposal."""
    logits: Tensor              # (1, 1, feat_h, feat_w)
    box: BoxXYXY                # image coordinates
    mask: Optional[RoiMask]     # None for roialign/roipool extraction
    support: np.ndarray         # boolean (feat_h, feat_w) supervised region


def init_segbranch_params(config: SegBranchConfig, lateral_channels: int,
                          rng) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    cc = config.compress_channels
    h1, h2, h3 = config.head_channels
    m = config.mid_channels
    g = RELU_GAIN
    _conv_params(rng, "seg.compress", lateral_channels, cc, 1, params)  # linear
    _conv_params(rng, "seg.c1", cc, h1, 3, params, gain=g)
    _conv_params(rng, "seg.c2", h1, h2, 3, params, gain=g)
    _conv_params(rng, "seg.c3", h2, h3, 3, params, gain=g)
    _conv_params(rng, "seg.res1a", h3, m, 3, params, gain=g)
    _conv_params(rng, "seg.res1b", m, m, 3, params)
    _conv_params(rng, "seg.res1p", h3, m, 1, params)
    _conv_params(rng, "seg.d1", m, m, 3, params, gain=g)
    _conv_params(rng, "seg.res2a", m, m, 3, params, gain=g)
    _conv_params(rng, "seg.res2b", m, m, 3, params)
    _conv_params(rng, "seg.d2", m, m, 3, params, gain=g)
    _conv_params(rng, "seg.logit", m, 1, 1, params, zero=True)
    return params


def compress_features(lateral_s8: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Linear 1x1 compression: the signed features every extractor operates on.

    Deliberately no activation here — the ternary extractor encodes the
    surrounding band by negating features, which only carries information
    when the features are signed; a ReLU before masking would let the next
    layer's ReLU silently discard most of the band signal."""
    return _conv(params, "seg.compress", lateral_s8)


def _residual_block(params, prefix, x, project: bool):
    y = T.relu(_conv(params, f"{prefix}a", x, padding=1))
    y = _conv(params, f"{prefix}b", y, padding=1)
    skip = _conv(params, f"{prefix}p", x) if project else x
    return T.relu(T.add(y, skip))


def _branch(params: Dict[str, Tensor], x: Tensor, dilation: int) -> Tensor:
    x = T.relu(_conv(params, "seg.c1", x, padding=1))
    x = T.relu(_conv(params, "seg.c2", x, padding=1))
    x = T.relu(_conv(params, "seg.c3", x, padding=1))
    x = _residual_block(params, "seg.res1", x, project=True)
    x = T.maxpool2d(x, 3, stride=1, padding=1)
    x = T.relu(_conv(params, "seg.d1", x, dilation=dilation, padding=dilation))
    x = _residual_block(params, "seg.res2", x, project=False)
    x = T.maxpool2d(x, 3, stride=1, padding=1)
    x = T.relu(_conv(params, "seg.d2", x, dilation=dilation, padding=dilation))
    return _conv(params, "seg.logit", x)


def seg_forward(lateral_s8: Tensor, boxes: Sequence[BoxXYXY], params: Dict[str, Tensor],
                config: SegBranchConfig, mask_cfg: MaskConfig) -> List[InstanceLogits]:
    """Run the branch once per box over shared weights."""
    if not boxes:
        raise ValueError("seg_forward: empty box list")
    features = compress_features(lateral_s8, params)
    return seg_forward_from_features(features, boxes, params, config, mask_cfg)


def seg_forward_from_features(features: Tensor, boxes: Sequence[BoxXYXY],
                              params: Dict[str, Tensor], config: SegBranchConfig,
                              mask_cfg: MaskConfig) -> List[InstanceLogits]:
    _, _, fh, fw = features.shape
    out: List[InstanceLogits] = []
    for box in boxes:
        if config.extractor in _EXTRACTOR_TO_MODE:
            cfg = MaskConfig(mode=_EXTRACTOR_TO_MODE[config.extractor],
                             alpha=mask_cfg.alpha, stride=mask_cfg.stride)
            mask = make_mask(box, cfg, fh, fw)
            logits = _branch(params, apply_mask(features, mask), config.dilation)
            out.append(InstanceLogits(logits=logits, box=box, mask=mask,
                                      support=mask.support))
        else:
            fb = box.scaled(1.0 / mask_cfg.stride)
            pooled = baseline_extract(features, fb, config.extractor, config.roi_out_size)
            small = _branch(params, pooled, config.dilation)
            inner = make_mask(box, MaskConfig(mode="binary", alpha=0.0,
                                              stride=mask_cfg.stride), fh, fw)
            logits = paste_nearest(small, inner.inner_box, fh, fw)
            out.append(InstanceLogits(logits=logits, box=box, mask=None,
                                      support=inner.support))
    return out


# ---------------------------------------------------------------------------
# baseline extractors (differentiable primitives)


def baseline_extract(features: Tensor, box: BoxXYXY, kind: str, out_size: int) -> Tensor:
    """Fixed-size region extraction: RoIPool (quantized bin max) or RoIAlign
    (bilinear 4-sample average per bin). box is in feature coordinates."""
    if box.area() <= 0:
        raise ValueError(f"baseline_extract: degenerate box {box.as_tuple()}")
    if kind == "roialign":
        return roi_align(features, box, out_size)
    if kind == "roipool":
        return roi_pool(features, box, out_size)
    raise ValueError(f"baseline_extract: unknown kind {kind!r}")


def bilinear_sample(data: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Sample (n, c, h, w) data at continuous (y, x) points with border clamp.

    Returns the samples plus the corner indices/weights needed to scatter
    gradients back.
    """
    n, c, h, w = data.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    vals = (data[:, :, y0, x0] * w00 + data[:, :, y0, x1] * w01
            + data[:, :, y1, x0] * w10 + data[:, :, y1, x1] * w11)
    corners = ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11))
    return vals, corners


def roi_align(features: Tensor, box: BoxXYXY, out_size: int) -> Tensor:
    n, c, h, w = features.shape
    s = out_size
    bin_h = box.height / s
    bin_w = box.width / s
    # 2x2 regular sample grid per bin
    ii, jj, sy, sx = np.meshgrid(np.arange(s), np.arange(s),
                                 np.arange(2), np.arange(2), indexing="ij")
    ys = (box.y0 + (ii + (sy + 0.5) / 2.0) * bin_h - 0.5).reshape(-1)
    xs = (box.x0 + (jj + (sx + 0.5) / 2.0) * bin_w - 0.5).reshape(-1)
    vals, corners = bilinear_sample(features.data, ys, xs)   # (n, c, s*s*4)
    out = vals.reshape(n, c, s, s, 4).mean(axis=-1)

    def bwd(g):
        gs = np.repeat(g.reshape(n, c, s * s), 4, axis=2).reshape(n, c, -1) / 4.0
        gx = np.zeros_like(features.data)
        for y_i, x_i, w_i in corners:
            np.add.at(gx.transpose(2, 3, 0, 1), (y_i, x_i), (gs * w_i).transpose(2, 0, 1))
        features._accumulate(gx)

    return _from_op(out, (features,), bwd)


def roi_pool(features: Tensor, box: BoxXYXY, out_size: int) -> Tensor:
    n, c, h, w = features.shape
    s = out_size
    x0 = int(round(box.x0))
    y0 = int(round(box.y0))
    bw = max(1.0, round(box.x1) - x0)
    bh = max(1.0, round(box.y1) - y0)
    out = np.empty((n, c, s, s))
    arg_rows = np.empty((n, c, s, s), dtype=np.intp)
    arg_cols = np.empty((n, c, s, s), dtype=np.intp)
    for i in range(s):
        r0 = min(max(y0 + int(math.floor(i * bh / s)), 0), h - 1)
        r1 = min(max(y0 + int(math.ceil((i + 1) * bh / s)), r0 + 1), h)
        for j in range(s):
            c0 = min(max(x0 + int(math.floor(j * bw / s)), 0), w - 1)
            c1 = min(max(x0 + int(math.ceil((j + 1) * bw / s)), c0 + 1), w)
            window = features.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            a = np.argmax(window, axis=-1)
            out[:, :, i, j] = np.take_along_axis(window, a[..., None], axis=-1)[..., 0]
            arg_rows[:, :, i, j] = r0 + a // (c1 - c0)
            arg_cols[:, :, i, j] = c0 + a % (c1 - c0)

    def bwd(g):
        gx = np.zeros_like(features.data)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, arg_rows, arg_cols), g)
        features._accumulate(gx)

    return _from_op(out, (features,), bwd)


def paste_nearest(small: Tensor, inner_box: BoxXYXY, feat_h: int, feat_w: int) -> Tensor:
    """Resize a (1, 1, s, s) logit map into the inner box of a full frame by
    nearest-bin lookup; cells outside the box stay 0."""
    _, _, s, s2 = small.shape
    cy = np.arange(feat_h) + 0.5
    cx = np.arange(feat_w) + 0.5
    in_y = np.flatnonzero((cy >= inner_box.y0) & (cy < inner_box.y1))
    in_x = np.flatnonzero((cx >= inner_box.x0) & (cx < inner_box.x1))
    src_i = np.clip(((cy[in_y] - inner_box.y0) / inner_box.height * s).astype(np.intp),
                    0, s - 1)
    src_j = np.clip(((cx[in_x] - inner_box.x0) / inner_box.width * s2).astype(np.intp),
                    0, s2 - 1)
    out = np.zeros((1, 1, feat_h, feat_w))
    out[0, 0, in_y[:, None], in_x[None, :]] = small.data[0, 0, src_i[:, None], src_j[None, :]]

    def bwd(g):
        gsm = np.zeros_like(small.data)
        np.add.at(gsm[0, 0], (src_i[:, None], src_j[None, :]),
                  g[0, 0, in_y[:, None], in_x[None, :]])
        small._accumulate(gsm)

    return _from_op(out, (small,), bwd)


# ---------------------------------------------------------------------------
# logits -> image-resolution masks


def box_raster(box: BoxXYXY, image_h: int, image_w: int) -> np.ndarray:
    """Boolean pixel-center rasterization of a continuous box."""
    cx = np.arange(image_w) + 0.5
    cy = np.arange(image_h) + 0.5
    return (((cy >= box.y0) & (cy < box.y1))[:, None]
            & ((cx >= box.x0) & (cx < box.x1))[None, :])


def logits_to_instance_mask(inst: InstanceLogits, image_h: int, image_w: int,
                            threshold: float = 0.5, stride: int = 8) -> np.ndarray:
    """Sigmoid, threshold, upsample x8 nearest, and clip to the proposal box."""
    prob = 1.0 / (1.0 + np.exp(-inst.logits.data[0, 0]))
    binary = prob > threshold
    up = np.repeat(np.repeat(binary, stride, axis=0), stride, axis=1)
    up = up[:image_h, :image_w]
    if up.shape != (image_h, image_w):
        padded = np.zeros((image_h, image_w), dtype=bool)
        padded[:up.shape[0], :up.shape[1]] = up
        up = padded
    return up & box_raster(inst.box, image_h, image_w)
