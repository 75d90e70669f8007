"""Stage orchestration: tile -> embed -> split -> provisional train ->
uncertainty -> select -> final train -> predict -> evaluate.

Every stage writes into its own subdirectory of the work dir together with
a ``_meta.json`` carrying the seed and config hash; re-running a completed
stage with an unchanged hash is a no-op unless forced. All randomness
derives from the single config seed through named substreams, so two runs
with the same seed produce byte-identical JSON artifacts.

The training bootstrap follows one consistent order: a provisional head is
trained on every QC-passing patch, its MC-dropout uncertainty drives
filtering and subset search, and the final head retrains on the selected
patches only. The no-selection ablation arm reuses the provisional head
(same training data as a model without patch selection) and averages over
all passing patches.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import embeddings as emb
from . import head as head_mod
from . import selection as sel
from . import stain as stain_mod
from . import tiling
from .config import PipelineConfig
from .errors import (
    DataError,
    DependencyError,
    EmptyAfterFilterError,
    InputError,
    UndefinedMetricError,
)
from .evaluation import SUBTYPES, aggregate_slide, auc_ovr_macro, evaluate_metrics
from .synthetic import read_labels

SLIDE_EXTENSIONS = (".tif", ".tiff", ".png")


def substream(seed: int, *tokens) -> np.random.SeedSequence:
    """Named RNG substream; tokens are hashed so strings are platform-stable."""
    entropy = [int(seed)]
    for tok in tokens:
        digest = hashlib.sha256(str(tok).encode()).digest()
        entropy.append(int.from_bytes(digest[:4], "little"))
    return np.random.SeedSequence(entropy)


def seed_int(seed: int, *tokens) -> int:
    return int(substream(seed, *tokens).generate_state(1)[0])


@dataclass
class WorkPaths:
    work: Path

    @classmethod
    def of(cls, config: PipelineConfig) -> "WorkPaths":
        return cls(work=Path(config.work_dir))

    @property
    def tile(self) -> Path:
        return self.work / "tile"

    @property
    def embed(self) -> Path:
        return self.work / "embed"

    @property
    def split(self) -> Path:
        return self.work / "split"

    def train(self, phase: str) -> Path:
        return self.work / "train" / phase

    @property
    def uncertainty(self) -> Path:
        return self.work / "uncertainty"

    @property
    def select(self) -> Path:
        return self.work / "select"

    @property
    def predict(self) -> Path:
        return self.work / "predict"

    @property
    def evaluate(self) -> Path:
        return self.work / "evaluate"

    @property
    def ablate(self) -> Path:
        return self.work / "ablate"

    def manifest(self, slide_id: str) -> Path:
        return self.tile / f"{slide_id}.manifest.csv"

    def stain_profile(self, slide_id: str) -> Path:
        return self.tile / f"{slide_id}.stain.json"

    def store(self, slide_id: str) -> Path:
        return self.embed / f"{slide_id}.pemb"


# cumulative config fields each stage depends on: overriding, say, the GA
# settings must not invalidate tiling artifacts
TILE_FIELDS = ("qc", "stain")
EMBED_FIELDS = TILE_FIELDS + ("embed_dim", "toy_embed_augment", "seed")
SPLIT_FIELDS = ("split", "seed")
TRAIN_FIELDS = tuple(sorted(set(EMBED_FIELDS + SPLIT_FIELDS + ("head",))))
MC_FIELDS = TRAIN_FIELDS + ("mc",)
SELECT_FIELDS = MC_FIELDS + ("filter", "ga", "k_min")


def _meta_path(stage_dir: Path) -> Path:
    return stage_dir / "_meta.json"


def _stage_current(stage_dir: Path, stage_hash: str) -> bool:
    meta = _meta_path(stage_dir)
    if not meta.exists():
        return False
    try:
        data = json.loads(meta.read_text())
    except json.JSONDecodeError:
        return False
    return bool(data.get("completed")) and data.get("stage_hash") == stage_hash


def _begin_stage(stage_dir: Path, stage_hash: str, force: bool) -> bool:
    """True when the stage must run; resets the directory if stale or forced."""
    if _stage_current(stage_dir, stage_hash) and not force:
        return False
    if stage_dir.exists():
        shutil.rmtree(stage_dir)
    stage_dir.mkdir(parents=True)
    return True


def _finish_stage(stage_dir: Path, stage: str, config: PipelineConfig, stage_hash: str) -> None:
    _meta_path(stage_dir).write_text(
        _dump({
            "stage": stage,
            "seed": config.seed,
            "stage_hash": stage_hash,
            "config_hash": config.config_hash(),
            "completed": True,
        })
    )


def _require_stage(stage_dir: Path, stage_hash: str, stage: str, command: str) -> None:
    if not _stage_current(stage_dir, stage_hash):
        raise DependencyError(
            f"stage {stage!r} has not run for this config; run `pam50 {command}` first",
            missing_stage=stage,
        )


def _dump(data) -> str:
    return json.dumps(data, indent=1, sort_keys=True) + "\n"


def resolve_slide_path(config: PipelineConfig, slide_id: str) -> Path:
    base = Path(config.slides_dir)
    for ext in SLIDE_EXTENSIONS:
        candidate = base / f"{slide_id}{ext}"
        if candidate.exists():
            return candidate
    tile_dir = base / slide_id
    if tile_dir.is_dir():
        return tile_dir
    raise InputError(f"no slide raster or tile directory for {slide_id!r} in {base}")


def _slide_rows(config: PipelineConfig) -> list[dict]:
    return read_labels(config.labels_path)


def stage_tile(config: PipelineConfig, force: bool = False, dump_patches: bool = False) -> Path:
    """QC-tile every slide; writes manifests and per-slide stain profiles.

    With ``dump_patches`` the passing 512x512 tiles are also written as PNGs
    under ``tile/patches/<slide_id>/`` for external embedding exporters.
    """
    paths = WorkPaths.of(config)
    if not _begin_stage(paths.tile, config.stage_hash(*TILE_FIELDS), force):
        return paths.tile
    for row in _slide_rows(config):
        slide = tiling.load_slide(resolve_slide_path(config, row["slide_id"]), row["slide_id"])
        result = tiling.tile_slide(
            slide,
            m_min=config.qc.m_min,
            varl_min=config.qc.varl_min,
            exclude_border=config.qc.exclude_border,
            prepare=False,
        )
        tiling.write_manifest(result.manifest, paths.manifest(row["slide_id"]))
        if dump_patches:
            from PIL import Image

            patch_dir = paths.tile / "patches" / row["slide_id"]
            patch_dir.mkdir(parents=True, exist_ok=True)
            for rec in result.manifest:
                if rec.qc_status != tiling.QC_PASS:
                    continue
                Image.fromarray(tiling.extract_patch(slide, rec)).save(
                    patch_dir / f"patch_{rec.patch_id:06d}.png"
                )
        if config.stain.enabled:
            passing = [r for r in result.manifest if r.qc_status == tiling.QC_PASS]
            stride = max(1, len(passing) // 50)
            sample = passing[::stride][:50]
            profile = stain_mod.fit_profile_from_patches(
                tiling.extract_patch(slide, rec) for rec in sample
            )
            profile.save(paths.stain_profile(row["slide_id"]))
    _finish_stage(paths.tile, "tile", config, config.stage_hash(*TILE_FIELDS))
    return paths.tile


def _reference_profile(config: PipelineConfig) -> stain_mod.StainProfile:
    if config.stain.reference_path:
        return stain_mod.StainProfile.load(config.stain.reference_path)
    return stain_mod.default_reference()


def stage_embed(config: PipelineConfig, force: bool = False) -> Path:
    """Toy-embed every passing patch into a PEMB store per slide."""
    paths = WorkPaths.of(config)
    _require_stage(paths.tile, config.stage_hash(*TILE_FIELDS), "tile", "tile")
    if not _begin_stage(paths.embed, config.stage_hash(*EMBED_FIELDS), force):
        return paths.embed
    reference = _reference_profile(config) if config.stain.enabled else None
    for row in _slide_rows(config):
        sid = row["slide_id"]
        manifest = tiling.read_manifest(paths.manifest(sid))
        passing = [r for r in manifest if r.qc_status == tiling.QC_PASS]
        slide = tiling.load_slide(resolve_slide_path(config, sid), sid)
        profile = None
        if config.stain.enabled:
            profile = stain_mod.StainProfile.load(paths.stain_profile(sid))
        ids, vectors = [], []
        for rec in passing:
            patch = tiling.extract_patch(slide, rec)
            if profile is not None:
                patch = stain_mod.macenko_apply(patch, profile, reference)
            prepared = tiling.prepare_patch(patch, patch_id=rec.patch_id)
            tensor = prepared.tensor
            if config.toy_embed_augment:
                rng = np.random.default_rng(substream(config.seed, "augment", sid, rec.patch_id))
                tensor = emb.augment_tensor(tensor, rng)
            ids.append(rec.patch_id)
            vectors.append(emb.toy_embed(tensor, seed=config.seed, dim=config.embed_dim))
        store = emb.EmbeddingStore(
            slide_id=sid, dim=config.embed_dim, patch_ids=ids,
            vectors=np.asarray(vectors, dtype=np.float32),
        )
        emb.write_store(store, paths.store(sid), source="toy", model=f"toy/seed{config.seed}")
    _finish_stage(paths.embed, "embed", config, config.stage_hash(*EMBED_FIELDS))
    return paths.embed


def stage_split(config: PipelineConfig, force: bool = False) -> dict:
    """Patient-level stratified train/validation split."""
    paths = WorkPaths.of(config)
    split_file = paths.split / "split.json"
    if not _begin_stage(paths.split, config.stage_hash(*SPLIT_FIELDS), force):
        return json.loads(split_file.read_text())
    rows = _slide_rows(config)
    by_patient: dict[str, dict] = {}
    for row in rows:
        entry = by_patient.setdefault(
            row["patient_id"], {"class_index": row["class_index"], "slides": []}
        )
        entry["slides"].append(row["slide_id"])
    rng = np.random.default_rng(substream(config.seed, "split"))
    train_patients, val_patients = [], []
    for class_index in range(len(SUBTYPES)):
        patients = sorted(
            pid for pid, entry in by_patient.items() if entry["class_index"] == class_index
        )
        if not patients:
            continue
        order = rng.permutation(len(patients))
        n_val = max(1, round(config.split.val_fraction * len(patients))) if len(patients) > 1 else 0
        chosen = [patients[i] for i in order]
        val_patients.extend(sorted(chosen[:n_val]))
        train_patients.extend(sorted(chosen[n_val:]))
    split = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "train_patients": sorted(train_patients),
        "val_patients": sorted(val_patients),
        "train_slides": sorted(
            s for p in train_patients for s in by_patient[p]["slides"]
        ),
        "val_slides": sorted(s for p in val_patients for s in by_patient[p]["slides"]),
    }
    split_file.write_text(_dump(split))
    _finish_stage(paths.split, "split", config, config.stage_hash(*SPLIT_FIELDS))
    return split


def _load_split(config: PipelineConfig) -> dict:
    paths = WorkPaths.of(config)
    _require_stage(paths.split, config.stage_hash(*SPLIT_FIELDS), "split", "train")
    return json.loads((paths.split / "split.json").read_text())


def _selected_ids(paths: WorkPaths, slide_id: str) -> list[int]:
    data = json.loads((paths.select / f"{slide_id}.json").read_text())
    return list(data["selected_patch_ids"])


def _dataset(
    config: PipelineConfig,
    slide_ids: list[str],
    labels: dict[str, int],
    selected_only: bool,
) -> tuple[np.ndarray, np.ndarray]:
    paths = WorkPaths.of(config)
    xs, ys = [], []
    for sid in slide_ids:
        store = emb.read_store(paths.store(sid))
        if selected_only:
            wanted = set(_selected_ids(paths, sid))
            idx = [i for i, pid in enumerate(store.patch_ids) if pid in wanted]
        else:
            idx = list(range(len(store.patch_ids)))
        if not idx:
            continue
        xs.append(store.vectors[idx])
        ys.append(np.full(len(idx), labels[sid], dtype=int))
    if not xs:
        raise DataError("no patches available to build a training set")
    return np.concatenate(xs), np.concatenate(ys)


def _train_config(config: PipelineConfig, phase: str) -> head_mod.TrainConfig:
    return head_mod.TrainConfig(
        learning_rate=config.head.learning_rate,
        batch_size=config.head.batch_size,
        max_epochs=config.head.max_epochs,
        patience=config.head.patience,
        seed=seed_int(config.seed, "train", phase),
        hidden=config.head.hidden,
        n_classes=len(SUBTYPES),
        dropout_rate=config.head.dropout_rate,
        feature_jitter=config.head.feature_jitter,
    )


def resolve_train_phase(config: PipelineConfig, phase: str) -> str:
    if phase in ("provisional", "final", "baseline"):
        return phase
    if phase != "auto":
        raise DataError(f"unknown train phase {phase!r}")
    paths = WorkPaths.of(config)
    select_hash = config.stage_hash(*SELECT_FIELDS)
    return "final" if _stage_current(paths.select, select_hash) else "provisional"


def stage_train(config: PipelineConfig, phase: str = "auto", force: bool = False) -> Path:
    """Train a classification head.

    Phases: ``provisional`` trains on all passing patches and early-stops on
    training-set accuracy (it is the uncertainty-scoring scaffold, so it must
    actually converge rather than halt on the noisy patch-level validation
    signal); ``final`` trains on the NSGA-II-selected patches with proper
    validation early stopping; ``baseline`` is the no-selection model for the
    ablation (all patches, validation early stopping).
    """
    phase = resolve_train_phase(config, phase)
    paths = WorkPaths.of(config)
    _require_stage(paths.embed, config.stage_hash(*EMBED_FIELDS), "embed", "embed-toy")
    stage_split(config)  # idempotent; keeps split alongside training
    train_hash = config.stage_hash(*TRAIN_FIELDS)
    if phase == "final":
        _require_stage(paths.select, config.stage_hash(*SELECT_FIELDS), "select", "select")
        train_hash = config.stage_hash(*SELECT_FIELDS)
    stage_dir = paths.train(phase)
    if not _begin_stage(stage_dir, train_hash, force):
        return stage_dir
    split = _load_split(config)
    labels = {row["slide_id"]: row["class_index"] for row in _slide_rows(config)}
    selected_only = phase == "final"
    train_set = _dataset(config, split["train_slides"], labels, selected_only)
    if phase == "provisional":
        val_set = train_set
    else:
        val_set = _dataset(config, split["val_slides"], labels, selected_only)
    params, history = head_mod.train_head(train_set, val_set, _train_config(config, phase))
    head_mod.save_head(params, stage_dir / "head.phed")
    head_mod.write_history_csv(history, stage_dir / "history.csv")
    _finish_stage(stage_dir, f"train/{phase}", config, train_hash)
    return stage_dir


def stage_uncertainty(config: PipelineConfig, force: bool = False) -> Path:
    """MC-dropout uncertainty for every embedded patch, per-slide JSON."""
    paths = WorkPaths.of(config)
    _require_stage(paths.embed, config.stage_hash(*EMBED_FIELDS), "embed", "embed-toy")
    _require_stage(
        paths.train("provisional"), config.stage_hash(*TRAIN_FIELDS),
        "train/provisional", "train",
    )
    if not _begin_stage(paths.uncertainty, config.stage_hash(*MC_FIELDS), force):
        return paths.uncertainty
    params = head_mod.load_head(paths.train("provisional") / "head.phed")
    if config.mc.dropout_rate != params.dropout_rate:
        params = params.copy()
        params.dropout_rate = config.mc.dropout_rate
    for row in _slide_rows(config):
        sid = row["slide_id"]
        store = emb.read_store(paths.store(sid))
        base_seed = seed_int(config.seed, "mc", sid)
        reports = head_mod.mc_uncertainty_batch(
            params, store.vectors, store.patch_ids, T=config.mc.T, base_seed=base_seed
        )
        payload = {
            "slide_id": sid,
            "seed": base_seed,
            "config_hash": config.config_hash(),
            "T": config.mc.T,
            "dropout_rate": config.mc.dropout_rate,
            "reports": [
                {
                    "patch_id": r.patch_id,
                    "u": r.u,
                    "class_variances": r.class_variances.tolist(),
                }
                for r in reports
            ],
        }
        (paths.uncertainty / f"{sid}.json").write_text(_dump(payload))
    _finish_stage(paths.uncertainty, "uncertainty", config, config.stage_hash(*MC_FIELDS))
    return paths.uncertainty


def _filter_policy(config: PipelineConfig) -> head_mod.FilterPolicy:
    return head_mod.FilterPolicy(
        tau=config.filter.tau, keep_fraction=config.filter.keep_fraction
    )


def stage_select(config: PipelineConfig, force: bool = False) -> Path:
    """Uncertainty filter plus per-slide NSGA-II subset search."""
    paths = WorkPaths.of(config)
    _require_stage(paths.embed, config.stage_hash(*EMBED_FIELDS), "embed", "embed-toy")
    _require_stage(
        paths.uncertainty, config.stage_hash(*MC_FIELDS), "uncertainty", "uncertainty"
    )
    if not _begin_stage(paths.select, config.stage_hash(*SELECT_FIELDS), force):
        return paths.select
    policy = _filter_policy(config)
    for row in _slide_rows(config):
        sid = row["slide_id"]
        store = emb.read_store(paths.store(sid))
        udata = json.loads((paths.uncertainty / f"{sid}.json").read_text())
        reports = [
            head_mod.UncertaintyReport(
                patch_id=r["patch_id"],
                class_variances=np.asarray(r["class_variances"]),
                u=r["u"],
                T=udata["T"],
            )
            for r in udata["reports"]
        ]
        try:
            kept_ids = head_mod.filter_by_uncertainty(reports, policy)
        except EmptyAfterFilterError:
            kept_ids = head_mod.filter_by_uncertainty(
                reports, head_mod.FilterPolicy(keep_fraction=1.0)
            )
        pos = {pid: i for i, pid in enumerate(store.patch_ids)}
        kept_idx = [pos[pid] for pid in kept_ids]
        z = store.vectors[kept_idx].astype(np.float64)
        u = np.asarray([reports[i].u for i in kept_idx])
        ga_seed = seed_int(config.seed, "select", sid)
        n_filtered = len(kept_ids)
        if n_filtered == 1:
            problem = sel.SelectionProblem(z, u, k_min=2)
            chosen_bits = np.array([True])
            objectives = sel.eval_objectives(chosen_bits, problem)
            front_size = 1
        else:
            # clamp the subset floor on slides smaller than the configured k_min
            k_eff = max(2, min(config.k_min, n_filtered))
            problem = sel.SelectionProblem(z, u, k_min=k_eff)
            ga = sel.GAConfig(
                population=config.ga.population,
                generations=config.ga.generations,
                tournament_size=config.ga.tournament_size,
                crossover_prob=config.ga.crossover_prob,
                mutation_prob=config.ga.mutation_prob,
                per_gene_flip_rate=config.ga.per_gene_flip_rate,
                init_density=config.ga.init_density,
                seed=ga_seed,
            )
            result = sel.evolve(problem, ga)
            chosen = sel.pick_subset(result.pareto_front)
            chosen_bits = chosen.bits
            objectives = chosen.objectives
            front_size = len(result.pareto_front)
        selected = [kept_ids[i] for i in np.flatnonzero(chosen_bits)]
        payload = {
            "slide_id": sid,
            "seed": ga_seed,
            "config_hash": config.config_hash(),
            "n_filtered": n_filtered,
            "selected_patch_ids": selected,
            "objectives": {
                "diversity": float(objectives[0]),
                "informativeness": float(objectives[1]),
                "compactness": float(objectives[2]),
                "reliability": float(objectives[3]),
            },
            "front_size": front_size,
            "generations": config.ga.generations,
            "population": config.ga.population,
        }
        (paths.select / f"{sid}.json").write_text(_dump(payload))
    _finish_stage(paths.select, "select", config, config.stage_hash(*SELECT_FIELDS))
    return paths.select


def stage_predict(
    config: PipelineConfig,
    force: bool = False,
    all_patches: bool = False,
    head_phase: str = "final",
    out_name: str = "predict",
) -> Path:
    """Slide-level probability averaging with the chosen head."""
    paths = WorkPaths.of(config)
    _require_stage(paths.embed, config.stage_hash(*EMBED_FIELDS), "embed", "embed-toy")
    head_hash = config.stage_hash(
        *(SELECT_FIELDS if head_phase == "final" else TRAIN_FIELDS)
    )
    _require_stage(paths.train(head_phase), head_hash, f"train/{head_phase}", "train")
    predict_hash = f"{config.stage_hash(*SELECT_FIELDS)}:{head_phase}:{all_patches}"
    if not all_patches:
        _require_stage(paths.select, config.stage_hash(*SELECT_FIELDS), "select", "select")
    out_dir = paths.work / out_name
    if not _begin_stage(out_dir, predict_hash, force):
        return out_dir
    split = _load_split(config)
    val_slides = set(split["val_slides"])
    params = head_mod.load_head(paths.train(head_phase) / "head.phed")
    predictions = []
    for row in _slide_rows(config):
        sid = row["slide_id"]
        store = emb.read_store(paths.store(sid))
        if all_patches:
            idx = list(range(len(store.patch_ids)))
        else:
            wanted = set(_selected_ids(paths, sid))
            idx = [i for i, pid in enumerate(store.patch_ids) if pid in wanted]
        probs = head_mod.forward(params, store.vectors[idx], mode="eval")
        pred = aggregate_slide([p for p in probs], slide_id=sid)
        predictions.append(
            {
                "slide_id": sid,
                "split": "val" if sid in val_slides else "train",
                "true_label": row["label"],
                "true_class": row["class_index"],
                "mean_probs": [float(v) for v in pred.mean_probs],
                "predicted_class": pred.predicted_class,
                "predicted_label": SUBTYPES[pred.predicted_class],
                "n_patches_used": pred.n_patches_used,
            }
        )
    payload = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "head": head_phase,
        "all_patches": all_patches,
        "predictions": predictions,
    }
    (out_dir / "predictions.json").write_text(_dump(payload))
    _finish_stage(out_dir, out_name, config, predict_hash)
    return out_dir


def stage_evaluate(
    config: PipelineConfig,
    force: bool = False,
    split: str = "val",
    predictions_name: str = "predict",
    out_name: str = "evaluate",
) -> dict:
    """Metrics over the chosen split; writes JSON, a table and the confusion CSV."""
    paths = WorkPaths.of(config)
    pred_dir = paths.work / predictions_name
    pred_meta = _meta_path(pred_dir)
    if not pred_meta.exists() or not json.loads(pred_meta.read_text()).get("completed"):
        raise DependencyError(
            f"stage {predictions_name!r} has not run; run `pam50 predict` first",
            missing_stage=predictions_name,
        )
    pred_hash = json.loads(pred_meta.read_text())["stage_hash"]
    eval_hash = f"{pred_hash}:{split}"
    out_dir = paths.work / out_name
    metrics_file = out_dir / "metrics.json"
    if not _begin_stage(out_dir, eval_hash, force):
        return json.loads(metrics_file.read_text())
    data = json.loads((pred_dir / "predictions.json").read_text())
    rows = [
        p for p in data["predictions"] if split == "all" or p["split"] == split
    ]
    if not rows:
        raise DataError(f"no predictions in split {split!r}")
    y_true = [p["true_class"] for p in rows]
    y_pred = [p["predicted_class"] for p in rows]
    probs = np.asarray([p["mean_probs"] for p in rows])
    report = evaluate_metrics(y_pred, y_true, n_classes=len(SUBTYPES))
    try:
        report.macro_auc = auc_ovr_macro(probs, y_true)
    except UndefinedMetricError:
        report.macro_auc = None
    payload = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "split": split,
        "n_slides": len(rows),
        **report.to_dict(),
    }
    metrics_file.write_text(_dump(payload))
    (out_dir / "table.txt").write_text(report.to_table() + "\n")
    report.write_confusion_csv(out_dir / "confusion.csv")
    _finish_stage(out_dir, out_name, config, eval_hash)
    return payload


def run_all(config: PipelineConfig, force: bool = False) -> dict:
    """Chain every stage; returns the evaluation payload."""
    stage_tile(config, force)
    stage_embed(config, force)
    stage_split(config, force)
    stage_train(config, "provisional", force)
    stage_uncertainty(config, force)
    stage_select(config, force)
    stage_train(config, "final", force)
    stage_predict(config, force)
    return stage_evaluate(config, force)


def run_ablation(config: PipelineConfig, force: bool = False) -> dict:
    """Full pipeline vs the no-selection baseline (all patches, no filter).

    The baseline arm trains its own head on every QC-passing patch with the
    standard validation early stopping and averages over all passing
    patches, which is what a pipeline without patch selection would do.
    """
    full = run_all(config, force)
    paths = WorkPaths.of(config)
    paths.ablate.mkdir(parents=True, exist_ok=True)
    stage_train(config, "baseline", force)
    stage_predict(
        config, force, all_patches=True, head_phase="baseline",
        out_name="ablate/baseline_predict",
    )
    baseline = stage_evaluate(
        config, force,
        predictions_name="ablate/baseline_predict",
        out_name="ablate/baseline_evaluate",
    )
    delta = {
        key: full[key] - baseline[key]
        for key in ("accuracy", "macro_f1", "macro_precision", "macro_recall")
    }
    if full.get("macro_auc") is not None and baseline.get("macro_auc") is not None:
        delta["macro_auc"] = full["macro_auc"] - baseline["macro_auc"]
    summary = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "full": full,
        "baseline": baseline,
        "delta": delta,
    }
    (paths.ablate / "summary.json").write_text(_dump(summary))
    return summary
