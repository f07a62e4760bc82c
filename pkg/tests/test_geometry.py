"""Geometry layer: resampling, adjoint splats, windows, jitter, sampling."""

import math

import numpy as np
import pytest

from cropeq.errors import ConstraintError, DimensionError, SemanticsError
from cropeq.geometry import (
    ColorJitterParams,
    CropSampler,
    CropTransform,
    DenseMap,
    JitterFactors,
    Semantics,
    apply,
    color_jitter,
    compose,
    cosine_window,
    identity_transform,
    inverse_splat,
    jitter_apply,
    sample_transform,
    scale_transform,
)


# ---------------------------------------------------------------------------
# Independent references


def naive_apply(values, t, boundary="zero"):
    """Scalar per-pixel 4-tap bilinear gather, written without vectorization."""
    h, w, c = values.shape
    out = np.zeros((t.out_h, t.out_w, c))
    mask = np.zeros((t.out_h, t.out_w), bool)
    for i in range(t.out_h):
        y = t.y0 + (i + 0.5) * t.win_h / t.out_h - 0.5
        for j in range(t.out_w):
            x = t.x0 + (j + 0.5) * t.win_w / t.out_w - 0.5
            yf, xf = math.floor(y), math.floor(x)
            fy, fx = y - yf, x - xf
            acc = np.zeros(c)
            for dy, wy in ((0, 1.0 - fy), (1, fy)):
                for dx, wx in ((0, 1.0 - fx), (1, fx)):
                    yy, xx = yf + dy, xf + dx
                    if boundary == "wrap":
                        acc += wy * wx * values[yy % h, xx % w]
                    elif 0 <= yy < h and 0 <= xx < w:
                        acc += wy * wx * values[yy, xx]
            out[i, j] = acc
            mask[i, j] = (0.0 <= y <= h - 1.0) and (0.0 <= x <= w - 1.0)
    return out, mask


def supersample_reference(values, t, s=16):
    """Bilinear values via piecewise-linear refinement to a 1/s grid.

    Each axis is refined with np.interp (anchored at source pixel centers),
    then the mapped output centers are looked up by nearest grid point.
    Exact whenever the mapped coordinates land on the 1/s grid.
    """
    h, w, c = values.shape
    xs_fine = np.arange((w - 1) * s + 1) / s
    ys_fine = np.arange((h - 1) * s + 1) / s
    fine_x = np.empty((h, xs_fine.size, c))
    for i in range(h):
        for ch in range(c):
            fine_x[i, :, ch] = np.interp(xs_fine, np.arange(w), values[i, :, ch])
    fine = np.empty((ys_fine.size, xs_fine.size, c))
    for j in range(xs_fine.size):
        for ch in range(c):
            fine[:, j, ch] = np.interp(ys_fine, np.arange(h), fine_x[:, j, ch])
    ys, xs = t.source_coords()
    yi = np.rint(np.asarray(ys) * s).astype(int)
    xi = np.rint(np.asarray(xs) * s).astype(int)
    return fine[yi][:, xi]


def random_map(rng, h, w, c=1, semantics=Semantics.FEATURE):
    return DenseMap(values=rng.standard_normal((h, w, c)), semantics=semantics)


def random_transform(rng, src_h, src_w):
    out_h = int(rng.integers(3, 11))
    out_w = int(rng.integers(3, 11))
    win_h = rng.uniform(1.5, src_h + 2.0)
    win_w = rng.uniform(1.5, src_w + 2.0)
    y0 = rng.uniform(-2.0, src_h - win_h + 2.0)
    x0 = rng.uniform(-2.0, src_w - win_w + 2.0)
    return CropTransform(
        y0=y0, x0=x0, win_h=win_h, win_w=win_w, out_h=out_h, out_w=out_w
    )


def translation(dy, dx, h, w):
    return CropTransform(
        y0=float(dy), x0=float(dx), win_h=float(h), win_w=float(w),
        out_h=h, out_w=w, src_h=h, src_w=w,
    )


# ---------------------------------------------------------------------------
# DenseMap


class TestDenseMap:
    def test_channel_count_enforced(self):
        with pytest.raises(SemanticsError):
            DenseMap(values=np.zeros((4, 4, 2)), semantics=Semantics.RGB)

    def test_mask_shape_enforced(self):
        with pytest.raises(DimensionError):
            DenseMap(
                values=np.zeros((4, 4, 1)),
                semantics=Semantics.DEPTH,
                validity_mask=np.ones((3, 4), bool),
            )

    def test_depth_positivity_checked(self):
        m = DenseMap(values=np.full((2, 2, 1), -1.0), semantics=Semantics.DEPTH)
        with pytest.raises(SemanticsError):
            m.validate()

    def test_normal_unit_norm_checked(self):
        vals = np.zeros((2, 2, 3))
        vals[..., 2] = 1.0
        DenseMap(values=vals, semantics=Semantics.NORMAL).validate()
        vals2 = vals * 1.01
        with pytest.raises(SemanticsError):
            DenseMap(values=vals2, semantics=Semantics.NORMAL).validate()

    def test_invalid_pixels_exempt_from_range_checks(self):
        vals = np.ones((2, 2, 1))
        vals[0, 0, 0] = -5.0
        mask = np.ones((2, 2), bool)
        mask[0, 0] = False
        DenseMap(values=vals, semantics=Semantics.DEPTH, validity_mask=mask).validate()


# ---------------------------------------------------------------------------
# apply


class TestApply:
    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(0)
        src = random_map(rng, 9, 7, 3)
        out = apply(identity_transform(9, 7), src)
        assert np.array_equal(out.values, src.values)
        assert out.validity_mask.all()

    def test_frozen_one_dim_example(self):
        # 1x4 ramp, window x in [0.5, 2.5] at out_w=2: centers 0.5 and 1.5.
        src = DenseMap(
            values=np.array([0.0, 1.0, 2.0, 3.0]).reshape(1, 4, 1),
            semantics=Semantics.FEATURE,
        )
        t = CropTransform(y0=0.0, x0=0.5, win_h=1.0, win_w=2.0, out_h=1, out_w=2)
        out = apply(t, src)
        np.testing.assert_allclose(out.values[0, :, 0], [0.5, 1.5], atol=1e-6)
        ref = supersample_reference(src.values, t)
        np.testing.assert_allclose(out.values, ref, atol=1e-6)

    def test_matches_supersampled_reference_on_grid_aligned_windows(self):
        rng = np.random.default_rng(1)
        src = random_map(rng, 12, 12, 2)
        # Windows whose mapped centers land on the 1/16 source grid.
        for y0, x0, win, out in [
            (0.25, 0.5, 8.0, 8),
            (1.0, 2.0, 8.0, 16),
            (0.5, 0.5, 10.0, 4),
            (2.125, 1.25, 4.0, 8),
        ]:
            t = CropTransform(
                y0=y0, x0=x0, win_h=win, win_w=win, out_h=out, out_w=out
            )
            ys, xs = t.source_coords()
            assert np.allclose(np.rint(ys * 16), ys * 16)
            assert (ys >= 0).all() and (ys <= 11).all()
            got = apply(t, src).values
            ref = supersample_reference(src.values, t)
            np.testing.assert_allclose(got, ref, atol=1e-6)

    def test_matches_naive_reference_on_random_windows(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            src = random_map(rng, 8, 9, 2)
            t = random_transform(rng, 8, 9)
            got = apply(t, src)
            ref_vals, ref_mask = naive_apply(src.values, t)
            np.testing.assert_allclose(got.values, ref_vals, atol=1e-12)
            assert np.array_equal(got.validity_mask, ref_mask)

    def test_out_of_bounds_reads_zero_and_invalid(self):
        src = DenseMap(values=np.ones((4, 4, 1)), semantics=Semantics.FEATURE)
        t = CropTransform(y0=-4.0, x0=0.0, win_h=4.0, win_w=4.0, out_h=4, out_w=4)
        out = apply(t, src)
        # Window sits entirely above the frame except the last row's support.
        assert not out.validity_mask[:3].any()
        np.testing.assert_allclose(out.values[:3], 0.0)

    def test_source_mask_propagates(self):
        vals = np.ones((6, 6, 1))
        mask = np.ones((6, 6), bool)
        mask[2, 2] = False
        src = DenseMap(values=vals, semantics=Semantics.FEATURE, validity_mask=mask)
        out = apply(identity_transform(6, 6), src)
        assert not out.validity_mask[2, 2]
        # Half-pixel shift makes neighbors read the invalid pixel too.
        t = CropTransform(y0=0.5, x0=0.0, win_h=6.0, win_w=6.0, out_h=6, out_w=6)
        shifted = apply(t, src)
        assert not shifted.validity_mask[1, 2]
        assert not shifted.validity_mask[2, 2]

    def test_linearity(self):
        rng = np.random.default_rng(3)
        a = random_map(rng, 7, 7, 2)
        b = random_map(rng, 7, 7, 2)
        t = random_transform(rng, 7, 7)
        lhs = apply(t, DenseMap(a.values + 2.5 * b.values, Semantics.FEATURE)).values
        rhs = apply(t, a).values + 2.5 * apply(t, b).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_wrap_translation_matches_roll(self):
        rng = np.random.default_rng(4)
        src = random_map(rng, 6, 5, 2)
        out = apply(translation(1, 2, 6, 5), src, boundary="wrap")
        expect = np.roll(src.values, shift=(-1, -2), axis=(0, 1))
        np.testing.assert_allclose(out.values, expect, atol=1e-12)
        assert out.validity_mask is None


# ---------------------------------------------------------------------------
# inverse_splat


class TestInverseSplat:
    def test_identity_weights_are_one(self):
        rng = np.random.default_rng(5)
        crop = random_map(rng, 6, 6, 2)
        res = inverse_splat(identity_transform(6, 6), crop, 6, 6)
        np.testing.assert_allclose(res.weights, 1.0, atol=1e-12)
        np.testing.assert_allclose(res.accum, crop.values, atol=1e-12)

    def test_disjoint_integer_crops(self):
        rng = np.random.default_rng(6)
        src_h = src_w = 8
        t_a = CropTransform(y0=0.0, x0=0.0, win_h=4.0, win_w=4.0, out_h=4, out_w=4)
        t_b = CropTransform(y0=4.0, x0=4.0, win_h=4.0, win_w=4.0, out_h=4, out_w=4)
        for t in (t_a, t_b):
            crop = random_map(rng, 4, 4, 1)
            res = inverse_splat(t, crop, src_h, src_w)
            region = res.weights > 0.5
            assert region.sum() == 16
            np.testing.assert_allclose(
                res.accum[region], crop.values.reshape(16, 1), atol=1e-12
            )
            np.testing.assert_allclose(res.weights[~region], 0.0, atol=1e-12)

    def test_adjointness_random_draws(self):
        rng = np.random.default_rng(7)
        for boundary in ("zero", "wrap"):
            for _ in range(200):
                h, w = int(rng.integers(4, 10)), int(rng.integers(4, 10))
                c = int(rng.integers(1, 4))
                t = random_transform(rng, h, w)
                a = rng.standard_normal((h, w, c))
                b = rng.standard_normal((t.out_h, t.out_w, c))
                lhs = np.vdot(
                    apply(t, DenseMap(a, Semantics.FEATURE), boundary=boundary).values, b
                )
                res = inverse_splat(
                    t, DenseMap(b, Semantics.FEATURE), h, w, boundary=boundary
                )
                rhs = np.vdot(a, res.accum)
                bound = 1e-6 * np.linalg.norm(a) * np.linalg.norm(b)
                assert abs(lhs - rhs) <= bound

    def test_apply_after_splat_is_identity_on_integer_crop(self):
        rng = np.random.default_rng(8)
        t = CropTransform(y0=2.0, x0=1.0, win_h=4.0, win_w=4.0, out_h=4, out_w=4)
        src = random_map(rng, 8, 8, 2)
        crop = apply(t, src)
        res = inverse_splat(t, crop, 8, 8)
        back = apply(t, DenseMap(res.accum, Semantics.FEATURE))
        np.testing.assert_allclose(back.values, crop.values, atol=1e-12)

    def test_window_weighting(self):
        crop = DenseMap(values=np.ones((4, 4, 1)), semantics=Semantics.FEATURE)
        window = np.full((4, 4), 0.25)
        res = inverse_splat(identity_transform(4, 4), crop, 4, 4, window=window)
        np.testing.assert_allclose(res.weights, 0.25, atol=1e-12)
        np.testing.assert_allclose(res.accum, 0.25, atol=1e-12)

    def test_crop_mask_blocks_contributions(self):
        vals = np.ones((4, 4, 1))
        mask = np.zeros((4, 4), bool)
        mask[0, 0] = True
        crop = DenseMap(values=vals, semantics=Semantics.FEATURE, validity_mask=mask)
        res = inverse_splat(identity_transform(4, 4), crop, 4, 4)
        assert res.weights[0, 0] == 1.0
        assert res.weights.sum() == 1.0

    def test_shape_mismatch_raises(self):
        crop = DenseMap(values=np.ones((3, 3, 1)), semantics=Semantics.FEATURE)
        with pytest.raises(DimensionError):
            inverse_splat(identity_transform(4, 4), crop, 4, 4)


# ---------------------------------------------------------------------------
# compose


class TestCompose:
    def test_frozen_translation_composition(self):
        # (+2, +3) then (+1, -1) is the translation (+3, +2).
        inner = translation(2, 3, 8, 8)
        outer = translation(1, -1, 8, 8)
        c = compose(outer, inner)
        assert (c.y0, c.x0) == (3.0, 2.0)
        assert (c.win_h, c.win_w) == (8.0, 8.0)

    def test_identity_composition(self):
        rng = np.random.default_rng(9)
        t = random_transform(rng, 8, 8)
        ident_in = identity_transform(8, 8)
        c = compose(t, ident_in)
        assert (c.y0, c.x0, c.win_h, c.win_w) == (t.y0, t.x0, t.win_h, t.win_w)

    def test_matches_sequential_application_on_smooth_map(self):
        # Smooth data keeps the double-resampling discrepancy small.
        yy, xx = np.mgrid[0:16, 0:16]
        vals = (np.sin(yy / 10.0) + np.cos(xx / 9.0))[..., None]
        src = DenseMap(values=vals, semantics=Semantics.FEATURE)
        inner = CropTransform(
            y0=1.0, x0=2.0, win_h=12.0, win_w=11.0, out_h=12, out_w=12,
            src_h=16, src_w=16,
        )
        outer = CropTransform(
            y0=1.5, x0=0.5, win_h=9.0, win_w=10.0, out_h=10, out_w=10,
            src_h=12, src_w=12,
        )
        seq = apply(outer, apply(inner, src))
        one = apply(compose(outer, inner), src)
        m = seq.validity_mask & one.validity_mask
        assert m.any()
        err = np.abs(seq.values[m] - one.values[m]).mean()
        assert err <= 2e-3

    def test_frame_mismatch_raises(self):
        inner = CropTransform(
            y0=0.0, x0=0.0, win_h=8.0, win_w=8.0, out_h=8, out_w=8, src_h=8, src_w=8
        )
        outer = CropTransform(
            y0=0.0, x0=0.0, win_h=6.0, win_w=6.0, out_h=6, out_w=6, src_h=6, src_w=6
        )
        with pytest.raises(DimensionError):
            compose(outer, inner)

    def test_scale_transform_halves_frames(self):
        t = CropTransform(
            y0=1.0, x0=2.0, win_h=32.0, win_w=32.0, out_h=64, out_w=64,
            src_h=64, src_w=64,
        )
        s = scale_transform(t, 0.5)
        assert (s.out_h, s.out_w, s.src_h, s.src_w) == (32, 32, 32, 32)
        assert (s.y0, s.win_h) == (0.5, 16.0)
        with pytest.raises(DimensionError):
            scale_transform(CropTransform(0.0, 0.0, 3.0, 3.0, 3, 3), 0.5)


# ---------------------------------------------------------------------------
# cosine_window


class TestCosineWindow:
    def test_frozen_profile_value(self):
        # 8x8 at margin 0.25: margin band is 2 px, the pixel one inset from
        # the edge sits 1.5 px from it, so the axis profile is
        # 0.5 * (1 - cos(pi * 1.5 / 2)).
        w = cosine_window(8, 8, margin_frac=0.25).values[..., 0]
        expect_axis = 0.5 * (1.0 - math.cos(math.pi * 1.5 / 2.0))
        assert abs(expect_axis - 0.8535533905932737) < 1e-15
        np.testing.assert_allclose(w[1, 4], expect_axis, atol=1e-12)
        np.testing.assert_allclose(w[1, 1], expect_axis**2, atol=1e-12)

    def test_interior_is_one_and_edges_positive(self):
        w = cosine_window(16, 16, margin_frac=0.25).values[..., 0]
        np.testing.assert_allclose(w[4:12, 4:12], 1.0, atol=1e-12)
        assert (w > 0.0).all()

    def test_symmetry_and_monotonicity(self):
        w = cosine_window(12, 10, margin_frac=0.3).values[..., 0]
        np.testing.assert_allclose(w, w[::-1], atol=1e-12)
        np.testing.assert_allclose(w, w[:, ::-1], atol=1e-12)
        col = w[:6, 5]
        assert (np.diff(col) >= -1e-12).all()

    def test_zero_margin_is_flat(self):
        w = cosine_window(6, 6, margin_frac=0.0).values[..., 0]
        np.testing.assert_allclose(w, 1.0)

    def test_semantics_tag(self):
        assert cosine_window(4, 4).semantics is Semantics.WEIGHT


# ---------------------------------------------------------------------------
# color jitter


class TestColorJitter:
    def test_brightness_frozen_value(self):
        img = DenseMap(values=np.full((2, 2, 3), 0.5), semantics=Semantics.RGB)
        out = jitter_apply(img, JitterFactors(brightness=1.4))
        np.testing.assert_allclose(out.values, 0.7, atol=1e-12)

    def test_identity_factors_are_exact(self):
        rng = np.random.default_rng(10)
        img = DenseMap(values=rng.uniform(0, 1, (4, 4, 3)), semantics=Semantics.RGB)
        out = jitter_apply(img, JitterFactors())
        assert np.array_equal(out.values, img.values)

    def test_all_zero_strengths_identity(self):
        rng = np.random.default_rng(11)
        img = DenseMap(values=rng.uniform(0, 1, (4, 4, 3)), semantics=Semantics.RGB)
        params = ColorJitterParams(brightness=0, contrast=0, saturation=0, hue=0)
        out = color_jitter(img, params, np.random.default_rng(0))
        assert np.array_equal(out.values, img.values)

    def test_seeded_determinism(self):
        rng = np.random.default_rng(12)
        img = DenseMap(values=rng.uniform(0, 1, (6, 6, 3)), semantics=Semantics.RGB)
        params = ColorJitterParams()
        a = color_jitter(img, params, np.random.default_rng(99)).values
        b = color_jitter(img, params, np.random.default_rng(99)).values
        assert np.array_equal(a, b)

    def test_output_clamped(self):
        img = DenseMap(values=np.full((2, 2, 3), 0.9), semantics=Semantics.RGB)
        out = jitter_apply(img, JitterFactors(brightness=1.4))
        np.testing.assert_allclose(out.values, 1.0, atol=1e-12)

    def test_zero_saturation_makes_gray(self):
        rng = np.random.default_rng(13)
        img = DenseMap(values=rng.uniform(0.2, 0.8, (4, 4, 3)), semantics=Semantics.RGB)
        out = jitter_apply(img, JitterFactors(saturation=0.0)).values
        np.testing.assert_allclose(out[..., 0], out[..., 1], atol=1e-12)
        np.testing.assert_allclose(out[..., 1], out[..., 2], atol=1e-12)

    def test_contrast_preserves_gray_images(self):
        img = DenseMap(values=np.full((3, 3, 3), 0.42), semantics=Semantics.RGB)
        out = jitter_apply(img, JitterFactors(contrast=1.7)).values
        np.testing.assert_allclose(out, 0.42, atol=1e-12)

    def test_hue_preserves_luma_of_gray(self):
        img = DenseMap(values=np.full((3, 3, 3), 0.5), semantics=Semantics.RGB)
        out = jitter_apply(img, JitterFactors(hue=0.1)).values
        np.testing.assert_allclose(out, 0.5, atol=1e-12)

    def test_non_rgb_rejected(self):
        img = DenseMap(values=np.ones((2, 2, 1)), semantics=Semantics.DEPTH)
        with pytest.raises(SemanticsError):
            jitter_apply(img, JitterFactors(brightness=1.2))


# ---------------------------------------------------------------------------
# sample_transform


class TestSampleTransform:
    def test_bounds_hold_over_many_draws(self):
        sampler = CropSampler(out_h=32, out_w=32, seed=21)
        rng = sampler.rng()
        src_h = src_w = 48
        for _ in range(10_000):
            t = sample_transform(sampler, src_h, src_w, rng)
            frac = (t.win_h * t.win_w) / (src_h * src_w)
            assert sampler.scale_lo - 1e-9 <= frac <= sampler.scale_hi + 1e-9
            aspect = t.win_w / t.win_h
            assert sampler.aspect_lo - 1e-9 <= aspect <= sampler.aspect_hi + 1e-9
            pad = sampler.pad_frac * min(t.win_h, t.win_w)
            assert -t.y0 <= pad + 1e-9
            assert t.y0 + t.win_h - src_h <= pad + 1e-9
            assert -t.x0 <= pad + 1e-9
            assert t.x0 + t.win_w - src_w <= pad + 1e-9

    def test_total_pad_mode_bounds(self):
        sampler = CropSampler(
            out_h=16, out_w=16, pad_mode="total", pad_frac=0.15, seed=22
        )
        rng = sampler.rng()
        for _ in range(2000):
            t = sample_transform(sampler, 40, 40, rng)
            pad = sampler.pad_frac * min(t.win_h, t.win_w)
            over_y = max(0.0, -t.y0) + max(0.0, t.y0 + t.win_h - 40)
            over_x = max(0.0, -t.x0) + max(0.0, t.x0 + t.win_w - 40)
            assert over_y <= pad + 1e-9
            assert over_x <= pad + 1e-9

    def test_seeded_determinism(self):
        sampler = CropSampler(seed=7)
        a = [sample_transform(sampler, 64, 64, sampler.rng()) for _ in range(1)]
        b = [sample_transform(sampler, 64, 64, sampler.rng()) for _ in range(1)]
        assert a == b

    def test_infeasible_configuration_names_bound(self):
        sampler = CropSampler(
            out_h=8, out_w=8, scale_lo=1.0, scale_hi=1.0,
            aspect_lo=4.0, aspect_hi=4.0, pad_frac=0.0, seed=1,
        )
        with pytest.raises(ConstraintError, match="width"):
            sample_transform(sampler, 8, 8, sampler.rng())

    def test_jitter_factors_attached_within_ranges(self):
        sampler = CropSampler(seed=5)
        rng = sampler.rng()
        t = sample_transform(sampler, 64, 64, rng)
        assert t.jitter is not None
        assert 0.6 - 1e-9 <= t.jitter.brightness <= 1.4 + 1e-9
        assert abs(t.jitter.hue) <= 0.1 + 1e-9

    def test_zero_jitter_strengths_attach_nothing(self):
        sampler = CropSampler(
            jitter=ColorJitterParams(brightness=0, contrast=0, saturation=0, hue=0),
            seed=5,
        )
        t = sample_transform(sampler, 64, 64, sampler.rng())
        assert t.jitter is None
