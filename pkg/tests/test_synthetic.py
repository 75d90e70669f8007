import json
from collections import Counter

import numpy as np
import pytest

from pam50.errors import EmptySlideError, InputError, UsageError
from pam50.synthetic import (
    CLASS_SIGNATURES,
    SyntheticSpec,
    SlideStyle,
    gen_synthetic,
    make_slide_pixels,
    read_labels,
    render_distractor_patch,
    render_signature_patch,
)
from pam50.tiling import QC_PASS, SlideRaster, tile_slide


class TestSpecValidation:
    def test_informative_fraction_bounds(self):
        with pytest.raises(UsageError):
            SyntheticSpec(informative_fraction=0.0)
        with pytest.raises(UsageError):
            SyntheticSpec(informative_fraction=1.2)

    def test_tissue_fraction_bounds(self):
        with pytest.raises(UsageError):
            SyntheticSpec(tissue_fraction=-0.1)


class TestRenderers:
    def test_signature_patch_passes_qc(self):
        rng = np.random.default_rng(0)
        for class_index in range(4):
            patch = render_signature_patch(rng, class_index, 1.0, 1.0)
            slide = SlideRaster("one", patch)
            result = tile_slide(slide)
            assert result.manifest[0].qc_status == QC_PASS

    def test_distractor_patch_passes_qc(self):
        rng = np.random.default_rng(1)
        style = SlideStyle.draw(rng)
        patch = render_distractor_patch(rng, style, 1.0, 1.0)
        result = tile_slide(SlideRaster("d", patch))
        assert result.manifest[0].qc_status == QC_PASS

    def test_style_is_class_agnostic_field(self):
        # mimic class drawn uniformly regardless of anything else
        rng = np.random.default_rng(2)
        seen = {SlideStyle.draw(rng).mimic_class for _ in range(100)}
        assert seen == set(range(len(CLASS_SIGNATURES)))


class TestMakeSlide:
    def test_role_counts(self):
        spec = SyntheticSpec(n_slides_per_class=1, patches_per_slide=36,
                             informative_fraction=0.1, tissue_fraction=0.9, seed=0)
        _, truth = make_slide_pixels(np.random.default_rng(0), 0, spec)
        counts = Counter(truth["roles"])
        assert counts["informative"] == 3  # round(32.4 tissue * 0.1)
        assert counts["informative"] + counts["distractor"] == 32
        assert counts["background"] == 4

    def test_background_only_slide_fails_qc_downstream(self):
        spec = SyntheticSpec(n_slides_per_class=1, patches_per_slide=9,
                             tissue_fraction=0.0, seed=0)
        pixels, truth = make_slide_pixels(np.random.default_rng(0), 0, spec)
        assert set(truth["roles"]) == {"background"}
        with pytest.raises(EmptySlideError):
            tile_slide(SlideRaster("bg", pixels))


class TestGenSynthetic:
    def test_deterministic_bytes(self, tmp_path):
        spec = SyntheticSpec(n_slides_per_class=1, patches_per_slide=9, seed=5)
        a = tmp_path / "a"
        b = tmp_path / "b"
        gen_synthetic(spec, a)
        gen_synthetic(spec, b)
        name = "luminal_a_000.tif"
        assert (a / name).read_bytes() == (b / name).read_bytes()
        assert (a / "labels.csv").read_bytes() == (b / "labels.csv").read_bytes()

    def test_labels_manifest(self, tmp_path):
        spec = SyntheticSpec(n_slides_per_class=2, patches_per_slide=9, seed=1)
        labels = gen_synthetic(spec, tmp_path / "c")
        rows = read_labels(labels)
        assert len(rows) == 8
        assert len({r["patient_id"] for r in rows}) == 8
        assert Counter(r["label"] for r in rows) == {
            "luminal_a": 2, "luminal_b": 2, "her2_enriched": 2, "basal_like": 2,
        }

    def test_ground_truth_sidecar(self, tmp_path):
        spec = SyntheticSpec(n_slides_per_class=1, patches_per_slide=9, seed=2)
        gen_synthetic(spec, tmp_path / "d")
        truth = json.loads((tmp_path / "d" / "ground_truth.json").read_text())
        assert set(truth) == {f"{c}_000" for c in ("luminal_a", "luminal_b", "her2_enriched", "basal_like")}

    def test_bad_format_rejected(self, tmp_path):
        with pytest.raises(UsageError):
            gen_synthetic(SyntheticSpec(seed=0), tmp_path / "e", image_format="bmp")


class TestLabelsReader:
    def test_missing_columns(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("slide_id,label\nx,luminal_a\n")
        with pytest.raises(InputError):
            read_labels(path)

    def test_unknown_label(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("slide_id,patient_id,label\nx,p0,weird\n")
        with pytest.raises(InputError):
            read_labels(path)

    def test_empty(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("slide_id,patient_id,label\n")
        with pytest.raises(InputError):
            read_labels(path)
