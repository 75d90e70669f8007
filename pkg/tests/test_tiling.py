import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pam50.errors import EmptySlideError, InputError
from pam50.tiling import (
    PATCH_SIZE,
    QC_FAIL_BACKGROUND,
    QC_FAIL_BLUR,
    QC_FAIL_BORDER,
    QC_PASS,
    PatchRecord,
    SlideRaster,
    bilinear_resize,
    compute_grid,
    laplacian_variance,
    load_slide,
    prepare_patch,
    qc_filter,
    read_manifest,
    tile_slide,
    tissue_fraction,
    to_grayscale,
    write_manifest,
)

from oracles import conv_laplacian_variance


def record(m, varl):
    return PatchRecord(
        slide_id="s", patch_id=0, grid_row=0, grid_col=0, origin_x=0, origin_y=0,
        tissue_fraction=m, laplacian_var=varl,
    )


class TestComputeGrid:
    def test_1024_by_2048_gives_8(self):
        assert len(compute_grid(1024, 2048)) == 8

    def test_no_patch_fits(self):
        assert compute_grid(511, 512) == []

    def test_single_patch_at_origin(self):
        grid = compute_grid(512, 512)
        assert len(grid) == 1
        assert (grid[0].origin_x, grid[0].origin_y) == (0, 0)

    def test_row_major_order_and_invariants(self):
        grid = compute_grid(1600, 1100)  # 3 cols x 2 rows
        assert [(r.grid_row, r.grid_col) for r in grid] == [
            (0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2),
        ]
        for r in grid:
            assert r.origin_x == PATCH_SIZE * r.grid_col
            assert r.origin_y == PATCH_SIZE * r.grid_row
            assert r.origin_x + PATCH_SIZE <= 1600
            assert r.origin_y + PATCH_SIZE <= 1100
            assert r.patch_id == r.grid_row * 3 + r.grid_col
            assert r.qc_status is None

    @given(w=st.integers(0, 4000), h=st.integers(0, 4000))
    def test_count_matches_enumeration(self, w, h):
        count = 0
        x = 0
        while x + PATCH_SIZE <= w:
            y = 0
            while y + PATCH_SIZE <= h:
                count += 1
                y += PATCH_SIZE
            x += PATCH_SIZE
        assert len(compute_grid(w, h)) == count

    def test_negative_dims_rejected(self):
        with pytest.raises(InputError):
            compute_grid(-1, 512)


class TestGrayscale:
    def test_white(self):
        patch = np.full((4, 4, 3), 255, dtype=np.uint8)
        assert np.allclose(to_grayscale(patch), 254.9745)

    def test_black(self):
        patch = np.zeros((4, 4, 3), dtype=np.uint8)
        assert np.allclose(to_grayscale(patch), 0.0)

    def test_pure_red(self):
        patch = np.zeros((2, 2, 3), dtype=np.uint8)
        patch[..., 0] = 255
        assert np.allclose(to_grayscale(patch), 76.2195)

    def test_not_requantized(self):
        patch = np.full((1, 1, 3), 1, dtype=np.uint8)
        value = to_grayscale(patch)[0, 0]
        assert 0 < value < 1  # still a real number


class TestTissueFraction:
    def test_all_white_zero(self):
        assert tissue_fraction(np.full((512, 512), 255.0)) == 0.0

    def test_all_black_one(self):
        assert tissue_fraction(np.zeros((512, 512))) == 1.0

    def test_half_half(self):
        gray = np.zeros((512, 512))
        gray[:, 256:] = 255.0
        assert tissue_fraction(gray) == 0.5

    def test_threshold_is_strict(self):
        assert tissue_fraction(np.full((8, 8), 200.0)) == 0.0
        assert tissue_fraction(np.full((8, 8), 199.9999)) == 1.0

    @given(
        st.integers(0, 2**32 - 1),
        st.floats(0.0, 55.0),
    )
    def test_monotone_under_brightening(self, seed, shift):
        rng = np.random.default_rng(seed)
        gray = rng.uniform(0, 255, size=(16, 16))
        assert tissue_fraction(gray + shift) <= tissue_fraction(gray)


class TestLaplacianVariance:
    def test_constant_patch_zero(self):
        assert laplacian_variance(np.full((512, 512), 123.0)) == 0.0

    def test_impulse_matches_reference(self):
        gray = np.zeros((32, 32))
        gray[10, 17] = 1.0
        got = laplacian_variance(gray)
        want = conv_laplacian_variance(gray)
        assert got > 0
        assert got == pytest.approx(want, rel=1e-12)

    def test_checkerboard_matches_reference(self):
        idx = np.indices((24, 24)).sum(axis=0)
        gray = np.where(idx % 2 == 0, 0.0, 255.0)
        got = laplacian_variance(gray)
        want = conv_laplacian_variance(gray)
        assert got > 1e5
        assert got == pytest.approx(want, rel=1e-12)

    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100), st.floats(0.1, 10))
    def test_shift_invariant_and_quadratic_scaling(self, seed, shift, scale):
        rng = np.random.default_rng(seed)
        gray = rng.uniform(0, 255, size=(12, 12))
        base = laplacian_variance(gray)
        assert laplacian_variance(gray + shift) == pytest.approx(base, rel=1e-9, abs=1e-9)
        assert laplacian_variance(gray * scale) == pytest.approx(
            scale**2 * base, rel=1e-9
        )


class TestQCFilter:
    def test_background_fail(self):
        assert qc_filter(record(0.19, 500.0)) == QC_FAIL_BACKGROUND

    def test_blur_fail(self):
        assert qc_filter(record(0.5, 99.0)) == QC_FAIL_BLUR

    def test_boundary_inclusive(self):
        assert qc_filter(record(0.2, 100.0)) == QC_PASS

    def test_background_checked_first(self):
        assert qc_filter(record(0.1, 1.0)) == QC_FAIL_BACKGROUND

    def test_unset_fields_rejected(self):
        rec = record(0.5, 100.0)
        rec.tissue_fraction = None
        with pytest.raises(InputError):
            qc_filter(rec)

    @given(st.floats(0, 1), st.floats(0, 1e6))
    def test_pure_function_of_m_and_varl(self, m, varl):
        a = record(m, varl)
        b = record(m, varl)
        b.patch_id, b.grid_row = 99, 42
        assert qc_filter(a) == qc_filter(b)


class TestPreparePatch:
    def test_channel_at_mean_maps_to_zero(self):
        patch = np.zeros((512, 512, 3))
        patch[..., 0] = 0.485 * 255.0
        tensor = prepare_patch(patch).tensor
        assert np.allclose(tensor[0], 0.0, atol=1e-6)

    def test_red_one_maps_to_expected(self):
        patch = np.zeros((512, 512, 3))
        patch[..., 0] = 255.0
        tensor = prepare_patch(patch).tensor
        assert np.allclose(tensor[0], 2.2489, atol=1e-4)

    def test_blue_zero_maps_to_expected(self):
        patch = np.zeros((512, 512, 3))
        tensor = prepare_patch(patch).tensor
        assert np.allclose(tensor[2], -1.8044, atol=1e-4)

    def test_shape_dtype_finite(self):
        rng = np.random.default_rng(0)
        patch = rng.integers(0, 256, size=(512, 512, 3)).astype(np.uint8)
        tensor = prepare_patch(patch, patch_id=7).tensor
        assert tensor.shape == (3, 224, 224)
        assert tensor.dtype == np.float32
        assert np.all(np.isfinite(tensor))


class TestBilinearResize:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 255, size=(8, 8, 3))
        out = bilinear_resize(img, 8, 8)
        assert np.allclose(out, img)

    def test_constant_preserved(self):
        img = np.full((512, 512, 3), 77.0)
        out = bilinear_resize(img, 224, 224)
        assert np.allclose(out, 77.0)

    def test_values_within_input_range(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(10, 20, size=(64, 64, 3))
        out = bilinear_resize(img, 17, 29)
        assert out.min() >= 10.0 - 1e-9
        assert out.max() <= 20.0 + 1e-9


def _textured_tissue(rng, shape=(512, 512, 3)):
    # dark, noisy block: passes both the tissue and the focus test
    return rng.integers(20, 150, size=shape).astype(np.uint8)


def make_half_tissue_slide(seed=0):
    rng = np.random.default_rng(seed)
    pixels = np.full((512, 1024, 3), 255, dtype=np.uint8)
    pixels[:, :512] = _textured_tissue(rng)
    return SlideRaster(slide_id="half", pixels=pixels)


class TestTileSlide:
    def test_half_tissue_passes_only_tissue_side(self):
        result = tile_slide(make_half_tissue_slide())
        status = {r.grid_col: r.qc_status for r in result.manifest}
        assert status[0] == QC_PASS
        assert status[1] == QC_FAIL_BACKGROUND
        assert [p.patch_id for p in result.prepared] == [0]

    def test_all_white_slide_raises(self):
        slide = SlideRaster("white", np.full((512, 512, 3), 255, dtype=np.uint8))
        with pytest.raises(EmptySlideError):
            tile_slide(slide)

    def test_rerun_manifest_byte_identical(self, tmp_path):
        slide = make_half_tissue_slide(seed=3)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_manifest(tile_slide(slide).manifest, p1)
        write_manifest(tile_slide(slide).manifest, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_round_trip(self, tmp_path):
        manifest = tile_slide(make_half_tissue_slide()).manifest
        path = tmp_path / "m.csv"
        write_manifest(manifest, path)
        loaded = read_manifest(path)
        assert [r.patch_id for r in loaded] == [r.patch_id for r in manifest]
        assert [r.qc_status for r in loaded] == [r.qc_status for r in manifest]
        for a, b in zip(loaded, manifest):
            assert a.tissue_fraction == pytest.approx(b.tissue_fraction, abs=1e-6)

    def test_border_exclusion_flag(self):
        rng = np.random.default_rng(5)
        pixels = _textured_tissue(rng, (3 * 512, 3 * 512, 3))
        slide = SlideRaster("t", pixels)
        result = tile_slide(slide, exclude_border=True)
        by_pos = {(r.grid_row, r.grid_col): r.qc_status for r in result.manifest}
        assert by_pos[(1, 1)] == QC_PASS
        ring = [k for k in by_pos if k != (1, 1)]
        assert all(by_pos[k] == QC_FAIL_BORDER for k in ring)

    def test_stain_hook_applied_to_passing_patches(self):
        calls = []

        def fake_normalize(patch):
            calls.append(patch.shape)
            return patch

        tile_slide(make_half_tissue_slide(), normalize=fake_normalize)
        assert calls == [(512, 512, 3)]


class TestLoadSlide:
    def test_png_round_trip(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(7)
        pixels = rng.integers(0, 256, size=(512, 512, 3)).astype(np.uint8)
        path = tmp_path / "s1.png"
        Image.fromarray(pixels).save(path)
        slide = load_slide(path)
        assert slide.slide_id == "s1"
        assert np.array_equal(slide.pixels, pixels)

    def test_tile_directory(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(8)
        tiles = {}
        slide_dir = tmp_path / "s2"
        slide_dir.mkdir()
        for row in range(2):
            for col in range(3):
                tile = rng.integers(0, 256, size=(512, 512, 3)).astype(np.uint8)
                tiles[(row, col)] = tile
                Image.fromarray(tile).save(slide_dir / f"r{row:03d}_c{col:03d}.png")
        slide = load_slide(slide_dir)
        assert slide.width == 3 * 512 and slide.height == 2 * 512
        assert np.array_equal(slide.pixels[:512, 512:1024], tiles[(0, 1)])

    def test_incomplete_grid_rejected(self, tmp_path):
        from PIL import Image

        slide_dir = tmp_path / "s3"
        slide_dir.mkdir()
        tile = np.zeros((512, 512, 3), dtype=np.uint8)
        Image.fromarray(tile).save(slide_dir / "r000_c000.png")
        Image.fromarray(tile).save(slide_dir / "r001_c001.png")
        with pytest.raises(InputError):
            load_slide(slide_dir)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_slide(tmp_path / "nope.png")
