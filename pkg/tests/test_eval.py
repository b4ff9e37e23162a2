import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salinst.config import RunConfig
from salinst.data import InstanceAnnotation, Sample, SynthConfig, synth_generate
from salinst.detector import BackboneConfig
from salinst.evaluate import (Detection, EvalReport, average_precision,
                              band_mass_ratio, evaluate_detections,
                              gradient_map, mask_iou, occlusion_subset,
                              report_write)
from salinst.roimask import BoxXYXY, MaskConfig
from salinst.segbranch import SegBranchConfig
from salinst.training import build_model


def rect_mask(h, w, y0, x0, y1, x1):
    m = np.zeros((h, w), bool)
    m[y0:y1, x0:x1] = True
    return m


class TestMaskIoU:
    def test_identical(self):
        m = rect_mask(8, 8, 1, 1, 5, 5)
        assert mask_iou(m, m) == 1.0

    def test_half_overlap(self):
        a = rect_mask(8, 8, 0, 0, 4, 4)
        b = rect_mask(8, 8, 0, 2, 4, 6)
        assert mask_iou(a, b) == pytest.approx(8 / 24)

    def test_disjoint(self):
        assert mask_iou(rect_mask(8, 8, 0, 0, 2, 2), rect_mask(8, 8, 4, 4, 6, 6)) == 0.0

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError, match="resolution"):
            mask_iou(np.ones((4, 4), bool), np.ones((5, 5), bool))

    def test_both_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            mask_iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool))


def brute_ap(detections, gts, thr):
    """All-point interpolated AP recomputed with plain scalar loops."""
    n_gt = sum(len(v) for v in gts.values())
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    used = {img: [False] * len(v) for img, v in gts.items()}
    points = []   # (recall, precision) after each detection
    tp = fp = 0
    flags = []
    for i in order:
        d = detections[i]
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts.get(d.image_id, [])):
            if used[d.image_id][j]:
                continue
            iou = mask_iou(d.mask, g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= thr:
            used[d.image_id][best_j] = True
            tp += 1
            flags.append(True)
        else:
            fp += 1
            flags.append(False)
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        if not flags[k]:
            continue
        p_interp = max(p for r2, p in points if r2 >= r)
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def random_instances(rng, n_images=4, size=32):
    """Random rectangles as gt masks plus jittered/noisy detections."""
    gts, dets = {}, []
    for k in range(n_images):
        img = f"im{k}"
        masks = []
        for _ in range(rng.integers(1, 4)):
            y0, x0 = rng.integers(0, size - 10, 2)
            h, w = rng.integers(4, 10, 2)
            masks.append(rect_mask(size, size, y0, x0, y0 + h, x0 + w))
        gts[img] = masks
        for m in masks:
            if rng.random() < 0.85:   # jittered true detection
                dy, dx = rng.integers(-2, 3, 2)
                shifted = np.roll(np.roll(m, dy, axis=0), dx, axis=1)
                dets.append(Detection(img, shifted, float(rng.random())))
        for _ in range(rng.integers(0, 3)):   # random false positives
            y0, x0 = rng.integers(0, size - 8, 2)
            dets.append(Detection(img, rect_mask(size, size, y0, x0, y0 + 5, x0 + 5),
                                  float(rng.random())))
    return gts, dets


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = {"a": [rect_mask(16, 16, 2, 2, 8, 8)], "b": [rect_mask(16, 16, 5, 5, 12, 12)]}
        dets = [Detection("a", gts["a"][0], 0.9), Detection("b", gts["b"][0], 0.8)]
        ap, curve = average_precision(dets, gts, 0.5)
        assert ap == 1.0
        assert curve.recall[-1] == 1.0

    def test_fp_above_tp_hand_case(self):
        gt = rect_mask(16, 16, 2, 2, 10, 10)
        fp = rect_mask(16, 16, 12, 12, 15, 15)
        dets = [Detection("a", fp, 0.9), Detection("a", gt, 0.8)]
        ap, _ = average_precision(dets, {"a": [gt]}, 0.5)
        # single gt recovered at precision 1/2
        assert ap == pytest.approx(0.5)

    def test_no_gt_returns_none(self):
        ap, _ = average_precision([], {}, 0.5)
        assert ap is None

    def test_no_detections_zero(self):
        ap, _ = average_precision([], {"a": [rect_mask(8, 8, 0, 0, 4, 4)]}, 0.5)
        assert ap == 0.0

    def test_duplicate_detections_count_as_fp(self):
        gt = rect_mask(16, 16, 2, 2, 10, 10)
        dets = [Detection("a", gt, 0.9), Detection("a", gt, 0.8)]
        ap, curve = average_precision(dets, {"a": [gt]}, 0.5)
        assert ap == 1.0                   # duplicate ranks below the match
        assert curve.precision[-1] == 0.5  # but is a false positive

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10 ** 9), st.sampled_from([0.3, 0.5, 0.7]))
    def test_agrees_with_bruteforce(self, seed, thr):
        rng = np.random.default_rng(seed)
        gts, dets = random_instances(rng)
        ap, _ = average_precision(dets, gts, thr)
        assert ap == pytest.approx(brute_ap(dets, gts, thr), abs=1e-12)

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(12)
        gts, dets = random_instances(rng)
        ap1, _ = average_precision(dets, gts, 0.5)
        squashed = [Detection(d.image_id, d.mask, 1 / (1 + np.exp(-5 * d.score)))
                    for d in dets]
        ap2, _ = average_precision(squashed, gts, 0.5)
        assert ap1 == pytest.approx(ap2, abs=1e-12)

    def test_ignore_masks_are_not_false_positives(self):
        occ = rect_mask(16, 16, 1, 1, 7, 7)
        other = rect_mask(16, 16, 9, 9, 15, 15)
        dets = [Detection("a", other, 0.95),   # matches the out-of-subset gt
                Detection("a", occ, 0.5)]
        ap_plain, _ = average_precision(dets, {"a": [occ]}, 0.5)
        ap_ignore, _ = average_precision(dets, {"a": [occ]}, 0.5,
                                         ignore={"a": [other]})
        assert ap_plain == pytest.approx(0.5)
        assert ap_ignore == 1.0


def sample_with_flags(flags, size=64):
    instances = []
    for k, occ in enumerate(flags):
        m = rect_mask(size, size, 2 + 12 * k, 2, 10 + 12 * k, 30)
        instances.append(InstanceAnnotation(mask=m, box=BoxXYXY(2.0, 2.0 + 12 * k,
                                                                30.0, 10.0 + 12 * k),
                                            occluded=occ))
    return Sample(image=np.zeros((1, 3, size, size)), instances=instances, id="s")


class TestOcclusionSubset:
    def test_flag_mode(self):
        s = sample_with_flags([True, False, True])
        assert occlusion_subset(s) == [0, 2]

    def test_overlap_mode(self):
        a = InstanceAnnotation(mask=rect_mask(32, 32, 0, 0, 10, 10),
                               box=BoxXYXY(0.0, 0.0, 10.0, 10.0))
        b = InstanceAnnotation(mask=rect_mask(32, 32, 5, 5, 15, 15),
                               box=BoxXYXY(5.0, 5.0, 15.0, 15.0))
        c = InstanceAnnotation(mask=rect_mask(32, 32, 25, 25, 30, 30),
                               box=BoxXYXY(25.0, 25.0, 30.0, 30.0))
        s = Sample(image=np.zeros((1, 3, 32, 32)), instances=[a, b, c], id="x")
        assert occlusion_subset(s, mode="overlap") == [0, 1]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            occlusion_subset(sample_with_flags([False]), mode="boxes")


class TestEvaluateDetections:
    def test_report_keys_and_perfect_score(self):
        s = sample_with_flags([True, False])
        dets = [Detection("s", inst.mask, 0.9 - 0.1 * i)
                for i, inst in enumerate(s.instances)]
        report = evaluate_detections(dets, [s])
        d = report.as_dict()
        assert set(d) == {"mAP@0.5", "mAP@0.7", "mAP_O@0.5", "mAP_O@0.7"}
        assert d["mAP@0.5"] == 1.0 and d["mAP_O@0.7"] == 1.0

    def test_stricter_threshold_never_higher(self):
        rng = np.random.default_rng(3)
        samples = synth_generate(SynthConfig(seed=13), 6)
        dets = []
        for s in samples:
            for inst in s.instances:
                m = np.roll(inst.mask, rng.integers(-3, 4), axis=0)
                dets.append(Detection(s.id, m, float(rng.random())))
        report = evaluate_detections(dets, samples)
        assert report.map70 <= report.map50 + 1e-9

    def test_report_write(self, tmp_path):
        s = sample_with_flags([True])
        report = evaluate_detections([Detection("s", s.instances[0].mask, 0.9)], [s])
        report_write(report, tmp_path)
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "report.txt").exists()
        assert (tmp_path / "pr_all_0.5.csv").exists()
        import json
        loaded = json.loads((tmp_path / "report.json").read_text())
        assert loaded["mAP@0.5"] == 1.0


MICRO_CFG = dataclasses.replace(
    RunConfig(),
    backbone=BackboneConfig(widths=(4, 4, 4, 4), lateral_channels=4),
    seg=SegBranchConfig(compress_channels=4, head_channels=(4, 4, 4), mid_channels=4))


class TestGradientMap:
    def _sample(self):
        return synth_generate(SynthConfig(seed=17, min_instances=1, max_instances=1), 1)[0]

    @staticmethod
    def _model(cfg):
        """Untrained model with the final logit layer nudged off its neutral
        zero init so a gradient actually reaches the feature map."""
        model = build_model(cfg, seed=0)
        w = model.params["seg.logit.w"]
        w.data[:] = np.random.default_rng(1).normal(0.0, 0.3, w.shape)
        return model

    def test_zero_outside_support_for_ternary(self):
        model = self._model(MICRO_CFG)
        s = self._sample()
        gmap = gradient_map(model, s, s.instances[0].box)
        assert gmap.values.shape == (8, 8)
        outside = gmap.values[~gmap.mask.support]
        np.testing.assert_array_equal(outside, 0.0)

    def test_binary_band_mass_is_zero(self):
        cfg = dataclasses.replace(
            MICRO_CFG, seg=dataclasses.replace(MICRO_CFG.seg,
                                               extractor="roimasking_binary"))
        model = self._model(cfg)
        s = self._sample()
        gmap = gradient_map(model, s, s.instances[0].box)
        assert band_mass_ratio(gmap) == 0.0

    def test_ternary_band_mass_positive(self):
        model = self._model(MICRO_CFG)
        s = self._sample()
        ratio = band_mass_ratio(gradient_map(model, s, s.instances[0].box))
        assert 0.0 < ratio < 1.0
