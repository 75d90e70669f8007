import json
import shutil

import numpy as np
import pytest

from pam50 import pipeline
from pam50.config import PipelineConfig
from pam50.embeddings import read_store
from pam50.errors import DependencyError, UsageError
from pam50.synthetic import SyntheticSpec, gen_synthetic
from pam50.tiling import read_manifest


def mini_config(slides_dir, work_dir, seed=5, **overrides):
    data = {
        "slides_dir": str(slides_dir),
        "work_dir": str(work_dir),
        "seed": seed,
        "stain": {"enabled": False},
        "head": {"learning_rate": 3e-3, "max_epochs": 12, "patience": 4, "hidden": 32},
        "mc": {"T": 5, "dropout_rate": 0.5},
        "ga": {"population": 16, "generations": 10},
        "k_min": 4,
    }
    data.update(overrides)
    return PipelineConfig.from_dict(data)


@pytest.fixture(scope="module")
def mini_corpus(tmp_path_factory):
    slides = tmp_path_factory.mktemp("mini_slides")
    gen_synthetic(
        SyntheticSpec(n_slides_per_class=2, patches_per_slide=16, seed=5),
        slides,
    )
    return slides


@pytest.fixture(scope="module")
def completed_run(mini_corpus, tmp_path_factory):
    work = tmp_path_factory.mktemp("mini_work")
    config = mini_config(mini_corpus, work)
    metrics = pipeline.run_all(config)
    return config, metrics


class TestStages:
    def test_run_all_produces_all_artifacts(self, completed_run):
        config, metrics = completed_run
        paths = pipeline.WorkPaths.of(config)
        assert (paths.tile / "_meta.json").exists()
        stores = list(paths.embed.glob("*.pemb"))
        assert len(stores) == 8
        assert (paths.train("provisional") / "head.phed").exists()
        assert (paths.train("final") / "head.phed").exists()
        assert len(list(paths.uncertainty.glob("*.json"))) >= 8
        assert len(list(paths.select.glob("*.json"))) >= 8
        assert (paths.predict / "predictions.json").exists()
        assert 0.0 <= metrics["accuracy"] <= 1.0
        assert metrics["seed"] == config.seed
        assert metrics["config_hash"] == config.config_hash()

    def test_manifest_and_store_consistency(self, completed_run):
        config, _ = completed_run
        paths = pipeline.WorkPaths.of(config)
        manifest = read_manifest(paths.manifest("luminal_a_000"))
        passing = [r.patch_id for r in manifest if r.qc_status == "pass"]
        store = read_store(paths.store("luminal_a_000"))
        assert store.patch_ids == passing
        assert store.dim == config.embed_dim

    def test_selection_schema(self, completed_run):
        config, _ = completed_run
        paths = pipeline.WorkPaths.of(config)
        data = json.loads((paths.select / "luminal_a_000.json").read_text())
        assert set(data) >= {
            "slide_id", "seed", "n_filtered", "selected_patch_ids",
            "objectives", "front_size", "generations", "population",
        }
        assert set(data["objectives"]) == {
            "diversity", "informativeness", "compactness", "reliability",
        }
        assert data["population"] == config.ga.population
        assert len(data["selected_patch_ids"]) >= config.k_min

    def test_split_is_patient_disjoint(self, completed_run):
        config, _ = completed_run
        paths = pipeline.WorkPaths.of(config)
        split = json.loads((paths.split / "split.json").read_text())
        assert not set(split["train_patients"]) & set(split["val_patients"])
        assert not set(split["train_slides"]) & set(split["val_slides"])

    def test_rerun_is_noop(self, completed_run):
        config, _ = completed_run
        paths = pipeline.WorkPaths.of(config)
        marker = paths.tile / "sentinel.txt"
        marker.write_text("untouched")
        pipeline.stage_tile(config)  # unchanged hash: must not rebuild
        assert marker.exists()

    def test_force_rebuilds(self, completed_run):
        config, _ = completed_run
        paths = pipeline.WorkPaths.of(config)
        marker = paths.select / "sentinel.txt"
        marker.write_text("x")
        pipeline.stage_select(config, force=True)
        assert not marker.exists()

    def test_changed_hash_rebuilds(self, completed_run, mini_corpus, tmp_path):
        config, _ = completed_run
        paths = pipeline.WorkPaths.of(config)
        marker = paths.select / "sentinel2.txt"
        marker.write_text("x")
        bumped = mini_config(mini_corpus, config.work_dir, k_min=5)
        pipeline.stage_select(bumped)
        assert not marker.exists()
        # restore the original selection for downstream module tests
        pipeline.stage_select(config)

    def test_ihc_artifacts_embed_seed_and_hash(self, completed_run):
        config, _ = completed_run
        paths = pipeline.WorkPaths.of(config)
        for stage_dir in (paths.tile, paths.embed, paths.select):
            meta = json.loads((stage_dir / "_meta.json").read_text())
            assert meta["seed"] == config.seed
            assert meta["config_hash"] == config.config_hash()
            assert meta["completed"] is True


class TestDependencies:
    def test_select_before_uncertainty(self, mini_corpus, tmp_path):
        config = mini_config(mini_corpus, tmp_path / "w1")
        pipeline.stage_tile(config)
        pipeline.stage_embed(config)
        with pytest.raises(DependencyError) as err:
            pipeline.stage_select(config)
        assert err.value.missing_stage == "uncertainty"

    def test_embed_before_tile(self, mini_corpus, tmp_path):
        config = mini_config(mini_corpus, tmp_path / "w2")
        with pytest.raises(DependencyError):
            pipeline.stage_embed(config)

    def test_final_train_requires_selection(self, mini_corpus, tmp_path):
        config = mini_config(mini_corpus, tmp_path / "w3")
        pipeline.stage_tile(config)
        pipeline.stage_embed(config)
        with pytest.raises(DependencyError):
            pipeline.stage_train(config, phase="final")


class TestDeterminism:
    def test_two_work_dirs_byte_identical(self, mini_corpus, tmp_path):
        config_a = mini_config(mini_corpus, tmp_path / "wa")
        config_b = mini_config(mini_corpus, tmp_path / "wb")
        pipeline.run_all(config_a)
        pipeline.run_all(config_b)
        pa, pb = pipeline.WorkPaths.of(config_a), pipeline.WorkPaths.of(config_b)
        for sel_a in sorted(pa.select.glob("*.json")):
            sel_b = pb.select / sel_a.name
            assert sel_a.read_bytes() == sel_b.read_bytes(), sel_a.name
        assert (pa.evaluate / "metrics.json").read_bytes() == (
            pb.evaluate / "metrics.json"
        ).read_bytes()


class TestSubstreams:
    def test_substream_stable_across_processes(self):
        # sha-based token hashing: values are reproducible constants
        a = pipeline.seed_int(7, "select", "slide_x")
        b = pipeline.seed_int(7, "select", "slide_x")
        c = pipeline.seed_int(7, "select", "slide_y")
        assert a == b
        assert a != c

    def test_config_requires_seed(self):
        with pytest.raises(UsageError):
            PipelineConfig.from_dict({"slides_dir": "s", "work_dir": "w"})

    def test_config_hash_ignores_paths(self, mini_corpus, tmp_path):
        a = mini_config(mini_corpus, tmp_path / "x")
        b = mini_config(mini_corpus, tmp_path / "y")
        assert a.config_hash() == b.config_hash()
        c = mini_config(mini_corpus, tmp_path / "x", seed=6)
        assert a.config_hash() != c.config_hash()
