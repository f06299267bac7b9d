import numpy as np
import pytest

from conftest import make_image, random_bitonal

from soleprint.dataio import ManifestRecord
from soleprint.morphometrics import LandmarkSet
from soleprint.ridgefields import (
    IndexOutOfRangeError,
    MissingCountsError,
    OutOfBoundsError,
    SampleSquare,
    SquaresConfig,
    black_fraction,
    default_grid_shape,
    extract_square,
    extract_squares,
    patch_side_px,
    place_squares,
    ridge_feature_matrix,
    ridge_features,
    texture_tile,
    tile_grid,
)


def record(rid="r0", counts=(18, 17, 17)):
    return ManifestRecord(rid, f"{rid}.png", "F", 30, "right", "walker", ridge_counts=counts)


class TestPlacement:
    def test_midpoint(self):
        lms = LandmarkSet(np.array([[0.0, 0.0], [10.0, 0.0], [3.0, 4.0]]))
        assert place_squares(lms, [(0, 1)]) == [(5.0, 0.0)]

    @pytest.mark.parametrize("n_pairs", [7, 3])
    def test_square_counts(self, rng, n_pairs):
        lms = LandmarkSet(rng.random((18, 2)) * 100)
        pairs = [(i, i + 1) for i in range(n_pairs)]
        assert len(place_squares(lms, pairs)) == n_pairs

    def test_bad_index(self):
        lms = LandmarkSet(np.zeros((3, 2)) + np.arange(3)[:, None])
        with pytest.raises(IndexOutOfRangeError):
            place_squares(lms, [(0, 3)])

    def test_midpoints_follow_isometries(self, rng):
        pts = rng.random((6, 2)) * 40
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        pairs = [(0, 3), (2, 5)]
        base = np.array(place_squares(LandmarkSet(pts), pairs))
        moved = np.array(place_squares(LandmarkSet(pts @ rot.T + (3.0, -2.0)), pairs))
        assert np.allclose(moved, base @ rot.T + (3.0, -2.0))


class TestExtraction:
    def test_patch_side_at_200ppi(self):
        assert patch_side_px(10.0, 200.0) == 79

    def test_uniform_center_patch(self):
        img = make_image(np.full((100, 100), 0.0), ppi=25.4)  # 1 px per mm
        square = extract_square(img, (50.0, 50.0), 10.0)
        assert square.pixels.shape == (10, 10)
        assert np.all(square.pixels == 0.0)

    def test_border_overlap_rejected(self):
        img = make_image(np.zeros((50, 50)), ppi=25.4)
        with pytest.raises(OutOfBoundsError):
            extract_square(img, (2.0, 25.0), 10.0)

    def test_extract_squares_config(self, rng):
        img = make_image(random_bitonal(rng, 120, 120), ppi=25.4)
        lms = LandmarkSet(np.array([[30.0, 30.0], [60.0, 30.0], [30.0, 60.0], [60.0, 60.0]]))
        config = SquaresConfig(pairs=((0, 1), (2, 3)), side_mm=10.0)
        squares = extract_squares(img, lms, config)
        assert len(squares) == 2
        assert squares[0].source_pair == (0, 1)


class TestBlackFraction:
    def test_all_ink(self):
        square = SampleSquare((0, 0), 10, np.zeros((5, 5)), (0, 1))
        assert black_fraction(square) == 1.0

    def test_half_ink(self):
        px = np.ones((4, 4))
        px[:2] = 0.0
        assert black_fraction(SampleSquare((0, 0), 10, px, (0, 1))) == 0.5

    def test_matches_count_oracle(self, rng):
        px = random_bitonal(rng, 9, 9)
        got = black_fraction(SampleSquare((0, 0), 10, px, (0, 1)))
        want = sum(1 for v in px.ravel() if v < 0.5) / px.size
        assert got == want

    def test_inversion_complement(self, rng):
        px = random_bitonal(rng, 8, 8)
        a = black_fraction(SampleSquare((0, 0), 10, px, (0, 1)))
        b = black_fraction(SampleSquare((0, 0), 10, 1.0 - px, (0, 1)))
        assert a + b == pytest.approx(1.0)


class TestRidgeFeatures:
    def test_counts_and_total(self):
        assert np.array_equal(ridge_features(record()), [18.0, 17.0, 17.0, 52.0])

    def test_zero_counts_valid(self):
        assert ridge_features(record(counts=(0, 0, 0)))[-1] == 0.0

    def test_missing_counts_excluded(self):
        with pytest.raises(MissingCountsError):
            ridge_features(record(counts=None))
        features, ids, excluded = ridge_feature_matrix(
            [record("a"), record("b", counts=None), record("c")]
        )
        assert ids == ["a", "c"]
        assert excluded == ["b"]
        assert features.shape == (2, 4)


class TestTile:
    def _squares(self, values):
        return [SampleSquare((0, 0), 10, np.full((4, 4), v), (i, i + 1))
                for i, v in enumerate(values)]

    def test_grid_contains_patches_verbatim(self, rng):
        patches = [random_bitonal(rng, 4, 4) for _ in range(4)]
        squares = [SampleSquare((0, 0), 10, p, (i, i + 1)) for i, p in enumerate(patches)]
        grid = tile_grid(squares, (2, 2))
        assert grid.shape == (8, 8)
        assert np.array_equal(grid[:4, :4], patches[0])
        assert np.array_equal(grid[:4, 4:], patches[1])
        assert np.array_equal(grid[4:, :4], patches[2])
        assert np.array_equal(grid[4:, 4:], patches[3])

    def test_seven_in_3x3_leaves_background(self):
        grid = tile_grid(self._squares([0.0] * 7), (3, 3))
        assert np.all(grid[8:, 4:] == 1.0)  # cells 8 and 9 stay background
        assert np.all(grid[:4, :4] == 0.0)

    def test_default_grid_shape(self):
        assert default_grid_shape(7) == (3, 3)
        assert default_grid_shape(3) == (2, 2)
        assert default_grid_shape(1) == (1, 1)

    def test_single_square_equals_letterboxed_patch(self, rng):
        from soleprint.raster import letterbox

        px = random_bitonal(rng, 60, 60)
        img = make_image(px, ppi=25.4)
        square = extract_square(img, (30.0, 30.0), 20.0)
        tile = texture_tile(img, [square], target_w=64, target_h=80)
        patch_img = make_image(square.pixels, ppi=25.4)
        want = letterbox(patch_img, 64, 80, kernel="NEAREST")
        assert np.array_equal(tile.pixels, want.pixels)

    def test_uniform_patches_uniform_content(self):
        tile = texture_tile(
            make_image(np.zeros((40, 40)), ppi=25.4), self._squares([0.0] * 4),
            target_w=32, target_h=40,
        )
        content = tile.pixels[tile.pixels != 1.0]
        assert np.all(content == 0.0)
