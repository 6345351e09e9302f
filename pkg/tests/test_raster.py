import numpy as np
import pytest

from panosynth.raster import (
    CalibMask,
    CalibrationError,
    HdrImage,
    LdrImage,
    RasterError,
    calib_mask,
    calibrate,
    expose,
    load_png,
    luminance,
    reinhard_tonemap,
    resample_area,
    rotate_horizontal,
    save_png,
)


def gray(h, w, value, cls=HdrImage):
    return cls(np.full((h, w, 3), value, dtype=np.float64))


class TestTypes:
    def test_ldr_rejects_out_of_range(self):
        with pytest.raises(RasterError):
            LdrImage(np.full((2, 2, 3), 1.5))

    def test_hdr_rejects_negative(self):
        with pytest.raises(RasterError):
            HdrImage(np.full((2, 2, 3), -0.1))

    def test_hdr_rejects_nonfinite(self):
        bad = np.ones((2, 2, 3))
        bad[0, 0, 0] = np.inf
        with pytest.raises(RasterError):
            HdrImage(bad)

    def test_mask_values_binary(self):
        with pytest.raises(RasterError):
            CalibMask(np.full((2, 2), 2))


class TestTonemap:
    def test_zero_maps_to_zero(self):
        out = reinhard_tonemap(gray(2, 2, 0.0))
        assert np.all(out.pixels == 0)

    def test_unit_luminance_halves(self):
        out = reinhard_tonemap(gray(2, 2, 1.0))
        assert luminance(out.pixels)[0, 0] == pytest.approx(0.5, abs=1e-6)

    def test_luminance_order_preserved(self):
        img = HdrImage(np.stack([np.full((1, 3), v) for v in (3.0, 1.0)]).reshape(2, 1, 3))
        out = luminance(reinhard_tonemap(img).pixels)
        assert out[0, 0] == pytest.approx(0.75, abs=1e-6)
        assert out[1, 0] == pytest.approx(0.5, abs=1e-6)
        assert out[0, 0] > out[1, 0]

    def test_monotone_on_random(self, rng):
        y = rng.random((16, 16)) * 10
        img = HdrImage(np.repeat(y[..., None], 3, axis=2))
        out_y = luminance(reinhard_tonemap(img).pixels)
        order_in = np.argsort(y.ravel())
        assert np.all(np.diff(out_y.ravel()[order_in]) >= 0)

    def test_output_in_unit_range(self, rng):
        img = HdrImage(rng.random((8, 8, 3)) * 100)
        out = reinhard_tonemap(img)
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1

    def test_per_channel_variant(self):
        img = HdrImage(np.full((1, 1, 3), 1.0))
        out = reinhard_tonemap(img, per_channel=True)
        assert np.allclose(out.pixels, 0.5, atol=1e-6)


class TestExpose:
    def test_identity_at_ev0(self):
        out = expose(gray(1, 1, 1.0), 0.0)
        assert out.pixels[0, 0, 0] == pytest.approx(1.0)

    def test_ev_minus4_scales_16_to_one(self):
        out = expose(gray(1, 1, 16.0), -4.0)
        assert out.pixels[0, 0, 0] == pytest.approx(1.0)

    def test_clamps_above_one(self):
        out = expose(gray(1, 1, 32.0), -4.0)
        assert out.pixels[0, 0, 0] == pytest.approx(1.0)


class TestCalibration:
    def test_mask_rule_below_threshold(self):
        m = calib_mask(gray(1, 1, 0.5, LdrImage), sigma=0.83)
        assert m.values[0, 0] == 1  # sum 1.5 < 2.49

    def test_mask_rule_above_threshold(self):
        m = calib_mask(gray(1, 1, 1.0, LdrImage), sigma=0.83)
        assert m.values[0, 0] == 0  # sum 3.0 >= 2.49

    def test_mask_boundary_is_strict(self):
        # sigma chosen exactly representable in float32 so sum == 3*sigma
        m = calib_mask(gray(1, 1, 0.75, LdrImage), sigma=0.75)
        assert m.values[0, 0] == 0

    def test_identity_when_hdr_equals_ldr(self):
        vals = np.full((2, 2, 3), 0.25)
        out = calibrate(HdrImage(vals), LdrImage(vals))
        assert np.allclose(out.pixels, vals, atol=1e-7)

    def test_kappa_half_for_doubled_hdr(self):
        ldr = np.full((2, 2, 3), 0.3)
        out = calibrate(HdrImage(2 * ldr), LdrImage(ldr))
        assert np.allclose(out.pixels, ldr, atol=1e-7)

    def test_masked_sums_match(self, rng):
        hdr = HdrImage(rng.random((8, 8, 3)) * 5)
        ldr = reinhard_tonemap(hdr)
        out = calibrate(hdr, ldr)
        m = calib_mask(ldr).values[..., None].astype(np.float64)
        s_out = (m * out.pixels.astype(np.float64)).sum()
        s_ldr = (m * ldr.pixels.astype(np.float64)).sum()
        assert abs(s_out - s_ldr) / s_ldr < 1e-6

    def test_idempotent(self, rng):
        hdr = HdrImage(rng.random((8, 8, 3)) * 5)
        ldr = reinhard_tonemap(hdr)
        once = calibrate(hdr, ldr)
        twice = calibrate(once, ldr)
        assert np.allclose(once.pixels, twice.pixels, rtol=1e-6)

    def test_all_bright_raises(self):
        with pytest.raises(CalibrationError):
            calibrate(gray(2, 2, 5.0), gray(2, 2, 1.0, LdrImage))

    def test_dim_mismatch_raises(self):
        with pytest.raises(RasterError):
            calibrate(gray(2, 2, 1.0), gray(2, 3, 0.5, LdrImage))


class TestRotate:
    def test_zero_shift_identity(self, rng):
        img = LdrImage(rng.random((4, 8, 3)))
        assert np.array_equal(rotate_horizontal(img, 0).pixels, img.pixels)

    def test_full_width_identity(self, rng):
        img = LdrImage(rng.random((4, 8, 3)))
        assert np.array_equal(rotate_horizontal(img, 8).pixels, img.pixels)

    def test_quarter_twice_equals_half(self, rng):
        img = LdrImage(rng.random((4, 8, 3)))
        a = rotate_horizontal(rotate_horizontal(img, 2), 2)
        b = rotate_horizontal(img, 4)
        assert np.array_equal(a.pixels, b.pixels)

    def test_shift_then_complement_identity(self, rng):
        img = LdrImage(rng.random((4, 8, 3)))
        for k in range(8):
            back = rotate_horizontal(rotate_horizontal(img, k), 8 - k)
            assert np.array_equal(back.pixels, img.pixels)

    def test_pixel_multiset_preserved(self, rng):
        img = LdrImage(rng.random((4, 8, 3)))
        rot = rotate_horizontal(img, 3)
        assert np.allclose(
            np.sort(img.pixels.ravel()), np.sort(rot.pixels.ravel())
        )


class TestResample:
    def test_constant_preserved_any_size(self):
        img = gray(4, 6, 0.5, LdrImage)
        for nh, nw in [(2, 3), (8, 12), (3, 7), (1, 1)]:
            out = resample_area(img, nh, nw)
            assert np.allclose(out.pixels, 0.5, atol=1e-7)

    def test_two_by_two_mean(self):
        img = LdrImage(np.array([[[0.0] * 3, [1.0] * 3], [[0.0] * 3, [1.0] * 3]]))
        out = resample_area(img, 1, 1)
        assert np.allclose(out.pixels, 0.5, atol=1e-12)

    def test_checkerboard_box_filter(self):
        checker = np.indices((4, 4)).sum(axis=0) % 2
        img = LdrImage(np.repeat(checker[..., None], 3, axis=2).astype(float))
        out = resample_area(img, 2, 2)
        assert np.allclose(out.pixels, 0.5, atol=1e-12)

    def test_integer_downscale_is_block_mean(self, rng):
        arr = rng.random((8, 8, 3))
        out = resample_area(LdrImage(arr), 4, 4)
        blocks = arr.reshape(4, 2, 4, 2, 3).mean(axis=(1, 3))
        assert np.allclose(out.pixels, blocks, atol=1e-7)

    def test_bad_dims_raise(self):
        with pytest.raises(RasterError):
            resample_area(gray(2, 2, 0.5, LdrImage), 0, 2)


class TestPngIo:
    def test_roundtrip_is_quantized_exact(self, rng, tmp_path):
        img = LdrImage(np.round(rng.random((5, 7, 3)) * 255) / 255.0)
        path = tmp_path / "img.png"
        save_png(img, path)
        back = load_png(path)
        assert np.allclose(back.pixels, img.pixels, atol=1e-7)

    def test_save_is_deterministic(self, rng, tmp_path):
        img = LdrImage(rng.random((5, 7, 3)))
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        save_png(img, p1)
        save_png(img, p2)
        assert p1.read_bytes() == p2.read_bytes()
