import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import salinst.tensor as T
from salinst.roimask import (BoxXYXY, MaskConfig, apply_mask, make_mask,
                             mask_to_csv, mask_to_pgm)


def centers(n):
    return np.arange(n) + 0.5


def brute_values(box, config, fh, fw):
    """Per-cell reference: test every cell center against the continuous boxes."""
    fb = box.scaled(1.0 / config.stride)
    a = config.alpha
    ox0 = max(0.0, fb.x0 - a * fb.width)
    oy0 = max(0.0, fb.y0 - a * fb.height)
    ox1 = min(float(fw), fb.x1 + a * fb.width)
    oy1 = min(float(fh), fb.y1 + a * fb.height)
    vals = np.zeros((fh, fw))
    for i in range(fh):
        for j in range(fw):
            x, y = j + 0.5, i + 0.5
            inner = fb.x0 <= x < fb.x1 and fb.y0 <= y < fb.y1
            outer = ox0 <= x < ox1 and oy0 <= y < oy1
            if config.mode == "binary":
                vals[i, j] = 1.0 if inner else 0.0
            elif config.mode == "expanded_binary":
                vals[i, j] = 1.0 if (inner or outer) else 0.0
            else:
                vals[i, j] = 1.0 if inner else (-1.0 if outer else 0.0)
    return vals


boxes = st.builds(
    lambda x0, y0, w, h: BoxXYXY(x0, y0, x0 + w, y0 + h),
    st.floats(0, 400), st.floats(0, 400), st.floats(0.5, 300), st.floats(0.5, 300))
alphas = st.floats(0, 1)
modes = st.sampled_from(["binary", "expanded_binary", "ternary"])


class TestCenteredExample:
    """Inner 30x30 cells, symmetric band ten cells wide on a 60x60 grid."""

    CFG = MaskConfig(mode="ternary", alpha=1 / 3, stride=8)
    BOX = BoxXYXY(120.0, 120.0, 360.0, 360.0)

    def test_region_counts(self):
        m = make_mask(self.BOX, self.CFG, 60, 60)
        assert (m.values == 1.0).sum() == 30 * 30
        assert (m.values == -1.0).sum() == 50 * 50 - 30 * 30
        assert (m.values == 0.0).sum() == 60 * 60 - 50 * 50

    def test_band_geometry(self):
        m = make_mask(self.BOX, self.CFG, 60, 60)
        assert m.values[15, 15] == 1.0   # inner corner cell
        assert m.values[14, 15] == -1.0  # one row above the box
        assert m.values[5, 30] == -1.0   # top edge of band
        assert m.values[4, 30] == 0.0    # just outside
        assert m.inner_box.as_tuple() == (15.0, 15.0, 45.0, 45.0)
        assert m.outer_box.as_tuple() == (5.0, 5.0, 55.0, 55.0)


class TestModes:
    def test_alpha_zero_equals_binary(self):
        box = BoxXYXY(30.0, 50.0, 200.0, 170.0)
        tern = make_mask(box, MaskConfig("ternary", alpha=0.0), 32, 32)
        bina = make_mask(box, MaskConfig("binary", alpha=0.0), 32, 32)
        np.testing.assert_array_equal(tern.values, bina.values)
        assert not tern.band.any()

    def test_expanded_has_no_negative(self):
        box = BoxXYXY(30.0, 50.0, 200.0, 170.0)
        m = make_mask(box, MaskConfig("expanded_binary"), 32, 32)
        assert m.values.min() >= 0.0

    def test_full_image_box_clips(self):
        m = make_mask(BoxXYXY(0.0, 0.0, 256.0, 256.0), MaskConfig("ternary"), 32, 32)
        np.testing.assert_array_equal(m.values, 1.0)

    def test_tiny_subcell_box_empty_interior(self):
        m = make_mask(BoxXYXY(0.5, 0.5, 1.5, 1.5), MaskConfig("ternary"), 16, 16)
        assert m.empty_interior
        assert (m.values == 1.0).sum() == 0

    def test_invalid_mode_and_alpha(self):
        with pytest.raises(ValueError):
            MaskConfig("trinary")
        with pytest.raises(ValueError):
            MaskConfig("ternary", alpha=-0.1)
        with pytest.raises(ValueError):
            BoxXYXY(5.0, 0.0, 5.0, 4.0)


@settings(max_examples=400, deadline=None)
@given(box=boxes, alpha=alphas, mode=modes)
def test_matches_cellwise_reference(box, alpha, mode):
    cfg = MaskConfig(mode, alpha=alpha)
    m = make_mask(box, cfg, 24, 24)
    np.testing.assert_array_equal(m.values, brute_values(box, cfg, 24, 24))


@settings(max_examples=400, deadline=None)
@given(box=boxes, alpha=alphas)
def test_ternary_region_invariants(box, alpha):
    m = make_mask(box, MaskConfig("ternary", alpha=alpha), 24, 24)
    assert m.values.shape == (24, 24)
    assert set(np.unique(m.values)) <= {-1.0, 0.0, 1.0}
    # interior cells are exactly those whose center falls in the scaled box
    fb = m.inner_box
    cx, cy = centers(24), centers(24)
    inner = ((cy[:, None] >= fb.y0) & (cy[:, None] < fb.y1)
             & (cx[None, :] >= fb.x0) & (cx[None, :] < fb.x1))
    np.testing.assert_array_equal(m.values == 1.0, inner)
    # band never overlaps interior, support = interior | band
    assert not (m.band & inner).any()
    np.testing.assert_array_equal(m.support, inner | m.band)


@settings(max_examples=300, deadline=None)
@given(box=boxes, a1=alphas, a2=alphas)
def test_alpha_monotonicity(box, a1, a2):
    lo, hi = sorted([a1, a2])
    small = make_mask(box, MaskConfig("ternary", alpha=lo), 24, 24)
    big = make_mask(box, MaskConfig("ternary", alpha=hi), 24, 24)
    # growing alpha only adds support, never removes it
    assert (big.support >= small.support).all()
    np.testing.assert_array_equal(small.values == 1.0, big.values == 1.0)


@settings(max_examples=200, deadline=None)
@given(box=boxes, alpha=alphas, mode=modes)
def test_idempotent_and_resolution_preserving(box, alpha, mode):
    cfg = MaskConfig(mode, alpha=alpha)
    m1 = make_mask(box, cfg, 20, 28)
    m2 = make_mask(box, cfg, 20, 28)
    np.testing.assert_array_equal(m1.values, m2.values)
    feats = T.Tensor(np.random.default_rng(0).normal(size=(1, 3, 20, 28)))
    out = apply_mask(feats, m1)
    assert out.shape == feats.shape


class TestApplyMask:
    def test_multiplies_and_backprops_through_band(self):
        box = BoxXYXY(64.0, 64.0, 128.0, 128.0)
        m = make_mask(box, MaskConfig("ternary", alpha=0.5), 32, 32)
        x = T.Tensor(np.ones((1, 2, 32, 32)), requires_grad=True)
        y = apply_mask(x, m)
        np.testing.assert_array_equal(y.data[0, 0], m.values)
        T.sum_all(y).backward()
        np.testing.assert_array_equal(x.grad[0, 0], m.values)
        np.testing.assert_array_equal(x.grad[0, 1], m.values)

    def test_exterior_features_cannot_influence_output(self):
        box = BoxXYXY(64.0, 64.0, 128.0, 128.0)
        m = make_mask(box, MaskConfig("ternary", alpha=0.2), 32, 32)
        rng = np.random.default_rng(1)
        base = rng.normal(size=(1, 2, 32, 32))
        bumped = base + ~m.support * rng.normal(size=(1, 2, 32, 32))
        out_a = apply_mask(T.Tensor(base), m).data
        out_b = apply_mask(T.Tensor(bumped), m).data
        np.testing.assert_array_equal(out_a, out_b)

    def test_shape_mismatch(self):
        m = make_mask(BoxXYXY(0.0, 0.0, 64.0, 64.0), MaskConfig(), 16, 16)
        with pytest.raises(T.ShapeError):
            apply_mask(T.Tensor(np.zeros((1, 1, 8, 8))), m)


class TestExport:
    def test_pgm_levels(self, tmp_path):
        m = make_mask(BoxXYXY(40.0, 40.0, 120.0, 120.0),
                      MaskConfig("ternary", alpha=0.5), 24, 24)
        path = tmp_path / "mask.pgm"
        mask_to_pgm(m, path)
        raw = path.read_bytes()
        header, pixels = raw.split(b"255\n", 1)
        assert header == b"P5\n24 24\n"
        arr = np.frombuffer(pixels, dtype=np.uint8).reshape(24, 24)
        np.testing.assert_array_equal(arr == 255, m.values == 1.0)
        np.testing.assert_array_equal(arr == 0, m.values == -1.0)
        np.testing.assert_array_equal(arr == 128, m.values == 0.0)

    def test_csv_roundtrip(self, tmp_path):
        m = make_mask(BoxXYXY(40.0, 40.0, 120.0, 120.0), MaskConfig(), 12, 12)
        path = tmp_path / "mask.csv"
        mask_to_csv(m, path)
        back = np.loadtxt(path, delimiter=",")
        np.testing.assert_array_equal(back, m.values)
