import numpy as np
import pytest

from conftest import make_image, random_bitonal
from oracles import dense_resample, naive_morph, naive_morph_iterated, nearest_resample

from soleprint import raster
from soleprint.raster import (
    CropBoundsError,
    NoForegroundError,
    NonBitonalError,
    bounding_box,
    crop,
    detexture,
    dilate,
    erode,
    invert,
    letterbox,
    make_composite,
    normalize_size,
    resample,
)


class TestBoundingBox:
    def test_single_ink_pixel(self):
        px = np.ones((40, 30))
        px[20, 10] = 0.0
        assert bounding_box(make_image(px)) == (10, 20, 10, 20)

    def test_all_background_raises(self):
        with pytest.raises(NoForegroundError):
            bounding_box(make_image(np.ones((8, 8))))

    def test_two_blobs_match_full_scan(self, rng):
        px = np.ones((50, 60))
        px[5:9, 40:46] = 0.0
        px[30:42, 3:7] = 0.0
        mask = px < 0.5
        ys, xs = np.nonzero(mask)
        assert bounding_box(make_image(px)) == (xs.min(), ys.min(), xs.max(), ys.max())


class TestCrop:
    def test_full_rect_identity(self, rng):
        img = make_image(rng.random((12, 9)))
        out = crop(img, (0, 0, 8, 11))
        assert np.array_equal(out.pixels, img.pixels)

    def test_single_pixel(self, rng):
        img = make_image(rng.random((12, 9)))
        out = crop(img, (3, 7, 3, 7))
        assert out.pixels.shape == (1, 1)
        assert out.pixels[0, 0] == img.pixels[7, 3]

    def test_nested_crops_compose(self, rng):
        img = make_image(rng.random((30, 25)))
        once = crop(crop(img, (2, 3, 20, 24)), (1, 2, 10, 12))
        direct = img.pixels[5:16, 3:13]  # composed inclusive rects
        assert np.array_equal(once.pixels, direct)

    def test_out_of_bounds(self):
        with pytest.raises(CropBoundsError):
            crop(make_image(np.ones((5, 5))), (0, 0, 5, 4))


class TestKernelContract:
    def test_peak_at_zero_and_zero_outside_support(self):
        xs = np.linspace(-2.0, 2.0, 4001)
        for name, kernel in raster.KERNELS.items():
            values = kernel.weight(xs)
            assert values[2000] == values.max() == kernel.weight(np.zeros(1))[0], name
            beyond = np.abs(xs) > kernel.support  # BOX includes its endpoints
            assert np.all(values[beyond] == 0.0), name

    def test_named_supports(self):
        assert raster.KERNELS["BILINEAR"].support == 1.0
        assert raster.KERNELS["HAMMING"].support == 1.0
        assert raster.KERNELS["BOX"].support == 0.5


class TestResample:
    def test_same_size_nearest_identity(self, rng):
        img = make_image(rng.random((17, 13)))
        out = resample(img, 13, 17, "NEAREST")
        assert np.array_equal(out.pixels, img.pixels)

    @pytest.mark.parametrize("kernel", raster.KERNEL_NAMES)
    def test_constant_preserved(self, kernel):
        img = make_image(np.full((20, 16), 0.3))
        out = resample(img, 7, 31, kernel)
        assert np.abs(out.pixels - 0.3).max() < 1e-6

    def test_checkerboard_box_average(self):
        img = make_image(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert resample(img, 1, 1, "BOX").pixels[0, 0] == pytest.approx(0.5)

    def test_box_integer_downscale_is_block_mean(self, rng):
        arr = rng.random((18, 24))
        out = resample(make_image(arr), 6, 6, "BOX").pixels
        blocks = arr.reshape(6, 3, 6, 4).mean(axis=(1, 3))
        assert np.abs(out - blocks).max() < 1e-9

    def test_bilinear_ramp_matches_dense_oracle(self):
        ramp = np.array([[0.0, 1 / 3, 2 / 3, 1.0]])
        out = resample(make_image(ramp), 2, 1, "BILINEAR").pixels
        assert np.allclose(out, dense_resample(ramp, 2, 1, "BILINEAR"), atol=1e-12)

    @pytest.mark.parametrize("kernel", ["BILINEAR", "HAMMING", "BOX"])
    def test_random_images_match_dense_oracle(self, rng, kernel):
        for _ in range(10):
            h, w = rng.integers(3, 40, size=2)
            th, tw = rng.integers(1, 50, size=2)
            arr = rng.random((h, w))
            got = resample(make_image(arr), int(tw), int(th), kernel).pixels
            want = dense_resample(arr, int(tw), int(th), kernel)
            assert np.abs(got - want).max() < 1e-6

    def test_nearest_matches_oracle_and_value_set(self, rng):
        arr = rng.choice([0.0, 0.25, 1.0], size=(11, 7))
        got = resample(make_image(arr), 23, 5, "NEAREST").pixels
        assert np.array_equal(got, nearest_resample(arr, 23, 5))
        assert set(np.unique(got)) <= set(np.unique(arr))


class TestLetterbox:
    def test_exact_fit_no_padding(self, rng):
        img = make_image(rng.random((320, 256)))
        out = letterbox(img)
        assert (out.width, out.height) == (512, 640)
        # scale factor 2: no padding cell remains background-only by construction
        assert np.abs(out.pixels - raster.resample_array(img.pixels, 512, 640, "BILINEAR")).max() == 0

    def test_walker_dims(self):
        img = make_image(np.zeros((3200, 2240)))
        out = letterbox(img, pad_value=1.0)
        assert (out.width, out.height) == (512, 640)
        # content 448x640 centered: 32-px side bands stay background
        assert np.all(out.pixels[:, :32] == 1.0)
        assert np.all(out.pixels[:, -32:] == 1.0)
        assert np.all(out.pixels[:, 32:480] == 0.0)

    def test_square_input_vertical_bands(self):
        img = make_image(np.zeros((100, 100)))
        out = letterbox(img)
        assert np.all(out.pixels[:64] == 1.0)
        assert np.all(out.pixels[-64:] == 1.0)
        assert np.all(out.pixels[64:576] == 0.0)

    def test_aspect_never_distorts(self, rng):
        for _ in range(20):
            h, w = rng.integers(20, 400, size=2)
            img = make_image(np.zeros((h, w)))
            scale = min(512 / w, 640 / h)
            out = letterbox(img)
            content_w, content_h = round(w * scale), round(h * scale)
            cols = np.flatnonzero((out.pixels == 0.0).any(axis=0))
            rows = np.flatnonzero((out.pixels == 0.0).any(axis=1))
            assert cols.size == content_w and rows.size == content_h
            assert abs(content_w / content_h - w / h) <= 1.0 / min(content_h, content_w) * (w / h + 1)

    def test_explicit_scale(self):
        img = make_image(np.zeros((100, 50)))
        out = letterbox(img, scale=2.0)
        assert np.count_nonzero(out.pixels == 0.0) == 200 * 100


class TestMorphology:
    def test_all_background_fixed_point(self):
        img = make_image(np.ones((10, 10)))
        assert np.array_equal(erode(img, 3, 1).pixels, img.pixels)
        assert np.array_equal(dilate(img, 3, 1).pixels, img.pixels)

    def test_non_bitonal_rejected(self):
        with pytest.raises(NonBitonalError):
            erode(make_image(np.full((4, 4), 0.5)), 3, 1)

    def test_matches_naive_oracle(self, rng):
        for _ in range(15):
            px = random_bitonal(rng, 32, 32)
            img = make_image(px)
            assert np.array_equal(erode(img, 3, 1).pixels, naive_morph(px, 3, "erode"))
            assert np.array_equal(dilate(img, 3, 1).pixels, naive_morph(px, 3, "dilate"))

    def test_iterations_equal_large_kernel(self, rng):
        for _ in range(5):
            px = random_bitonal(rng, 24, 24)
            img = make_image(px)
            assert np.array_equal(erode(img, 3, 2).pixels, erode(img, 5, 1).pixels)
            assert np.array_equal(dilate(img, 3, 2).pixels, dilate(img, 5, 1).pixels)

    def test_extensivity(self, rng):
        px = random_bitonal(rng, 20, 20, ink_fraction=0.3)
        img = make_image(px)
        assert np.all(erode(img, 3, 1).pixels >= px)  # ink set shrinks
        assert np.all(dilate(img, 3, 1).pixels <= px)  # ink set grows

    def test_duality_on_background_framed_input(self, rng):
        # outside-image = background makes raw duality fail at the frame, so
        # the property is checked on inputs with a background border ring
        px = random_bitonal(rng, 20, 20)
        px[0, :] = px[-1, :] = px[:, 0] = px[:, -1] = 1.0
        img = make_image(px)
        dual = invert(dilate(invert(img), 3, 1))
        assert np.array_equal(erode(img, 3, 1).pixels, dual.pixels)

    def test_line_removed_by_opening(self):
        px = np.ones((32, 32))
        px[:, 16] = 0.0
        out = detexture(make_image(px))
        assert np.all(out.pixels == 1.0)

    def test_opening_idempotent(self, rng):
        px = random_bitonal(rng, 48, 48, ink_fraction=0.35)
        once = detexture(make_image(px))
        twice = detexture(once)
        assert np.array_equal(once.pixels, twice.pixels)

    def test_solid_block_matches_oracle(self):
        px = np.ones((60, 60))
        px[5:55, 5:55] = 0.0
        got = detexture(make_image(px)).pixels
        want = naive_morph_iterated(naive_morph_iterated(px, 3, 5, "erode"), 3, 5, "dilate")
        assert np.array_equal(got, want)

    def test_alternating_lines_vanish(self):
        px = np.ones((32, 32))
        px[:, ::2] = 0.0
        assert np.all(detexture(make_image(px)).pixels == 1.0)


class TestComposite:
    def test_constant_input_three_identical_channels(self):
        img = make_image(np.full((30, 20), 0.3))
        out = make_composite(img, 64, 80)
        assert out.channels.shape == (3, 80, 64)
        for c in range(3):
            assert np.abs(out.channels[c] - out.channels[0]).max() < 1e-6

    def test_bitonal_keeps_r_channel_binary(self, rng):
        px = random_bitonal(rng, 40, 30)
        out = make_composite(make_image(px), 64, 80)
        assert set(np.unique(out.channels[0])) <= {0.0, 1.0}
        grays = np.unique(out.channels[1])
        assert ((grays > 0) & (grays < 1)).any()

    def test_standard_dims(self, rng):
        px = random_bitonal(rng, 64, 48)
        out = make_composite(make_image(px))
        assert (out.width, out.height) == (512, 640)
        assert out.provenance == ("NEAREST", "BILINEAR", "HAMMING")

    def test_leakage_guard_content_inside_scaled_box(self, rng):
        # after crop-to-box and compositing, everything non-background must
        # sit inside the centered scaled bounding box
        px = np.ones((80, 60))
        px[10:70, 12:50] = random_bitonal(rng, 60, 38, ink_fraction=0.5)
        img = make_image(px)
        cropped = crop(img, bounding_box(img))
        out = make_composite(cropped, 64, 80)
        scale = min(64 / cropped.width, 80 / cropped.height)
        cw, ch = round(cropped.width * scale), round(cropped.height * scale)
        x0, y0 = (64 - cw) // 2, (80 - ch) // 2
        outside = np.ones((80, 64), dtype=bool)
        outside[y0 : y0 + ch, x0 : x0 + cw] = False
        for c in range(3):
            assert np.all(out.channels[c][outside] == 1.0)


class TestNormalizeSize:
    def test_common_post_scale_heights(self):
        a = normalize_size(make_image(np.zeros((300, 100))), 0.95)
        b = normalize_size(make_image(np.zeros((600, 200))), 0.95)
        assert a.height == b.height == round(0.95 * 640)

    def test_already_at_fill_is_identity_scale(self):
        img = make_image(np.zeros((608, 203)))
        out = normalize_size(img, 0.95)
        assert (out.width, out.height) == (203, 608)

    def test_zero_size_variation_across_batch(self, rng):
        heights = []
        for _ in range(10):
            h = int(rng.integers(150, 800))
            w = int(h * rng.uniform(0.3, 0.5))
            out = normalize_size(make_image(np.zeros((h, w))), 0.95)
            heights.append(out.height)
        assert np.std(heights) == 0.0
