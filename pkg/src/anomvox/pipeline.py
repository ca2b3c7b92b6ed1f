"""End-to-end run orchestration: synth, split, per-split train/threshold/
infer/score/evaluate, then cross-split aggregation and figures.

Every stage writes a completion marker keyed by the resolved config hash, so
--resume skips work that is already on disk for the same configuration.  All
randomness is derived from the run seed through labeled sub-streams, and in
deterministic mode emitted files contain no timestamps, so rerunning a config
reproduces every artifact byte for byte.

Results tree:

    out_dir/
      config.json                 frozen resolved config
      cohort/                     volumes, manifest, truth, atlases (synth)
      splits.json                 bootstrap split plans
      splits/split_NN/            per-split checkpoints, logs, thresholds,
                                  error maps, score tables, ROC sweeps
      summary/                    bootstrap_summary.csv and SVG figures
      stage_status/               resume markers
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .anomaly import (
    abnormality_threshold,
    binarize,
    error_volume_ae,
    error_volume_sae,
    load_error_map,
    load_threshold,
    save_error_map,
    save_threshold,
)
from .atlas import LabelAtlas, load_atlas, make_core_atlas, make_octant_atlas, save_atlas
from .config import PipelineConfig, config_from_dict, config_hash, config_to_dict, load_config, save_config
from .evaluation import (
    RocResult,
    aggregate_bootstrap,
    build_score_table,
    evaluate_split,
    load_score_table,
    save_score_table,
    save_summary,
)
from .models import EpochStats, load_ae, load_sae, save_ae, save_sae, train_ae, train_sae
from .phantom import ellipsoid_support, synth_cohort
from .report import write_report
from .sampling import (
    BalanceReport,
    SplitPlan,
    bootstrap_split,
    build_similar_pairs,
    eligible_patch_centers,
    extract_axial_slices,
    extract_patches,
)
from .volume import (
    BrainMask,
    CohortManifest,
    SubjectMeta,
    Volume,
    compute_brain_mask,
    load_manifest,
    load_mvol,
    normalize_channels,
    save_manifest,
    save_mvol,
)


class ValidationFailure(Exception):
    """Bad inputs detected before any work (exit code 1)."""


class StageFailure(Exception):
    """A pipeline stage aborted; carries the stage name and artifact path."""

    def __init__(self, stage: str, artifact: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed at {artifact}: {cause}")
        self.stage = stage
        self.artifact = artifact
        self.cause = cause


class Logger:
    """Line logger; --json-logs switches to one JSON object per line."""

    def __init__(self, json_mode: bool = False, quiet: bool = False):
        self.json_mode = json_mode
        self.quiet = quiet

    def info(self, stage: str, message: str, **fields) -> None:
        if self.quiet:
            return
        if self.json_mode:
            print(json.dumps({"stage": stage, "message": message, **fields}, sort_keys=True))
        else:
            extras = " ".join(f"{k}={v}" for k, v in fields.items())
            print(f"[{stage}] {message}" + (f" ({extras})" if extras else ""))


@dataclass(frozen=True)
class RunPaths:
    out: Path

    @property
    def config(self) -> Path:
        return self.out / "config.json"

    @property
    def splits_file(self) -> Path:
        return self.out / "splits.json"

    @property
    def status(self) -> Path:
        return self.out / "stage_status"

    @property
    def summary(self) -> Path:
        return self.out / "summary"

    def split_dir(self, index: int) -> Path:
        return self.out / "splits" / f"split_{index:02d}"


def run_paths(cfg: PipelineConfig) -> RunPaths:
    return RunPaths(out=Path(cfg.out_dir))


def _marker(paths: RunPaths, name: str) -> Path:
    return paths.status / f"{name}.json"


def stage_done(cfg: PipelineConfig, paths: RunPaths, name: str) -> bool:
    marker = _marker(paths, name)
    if not marker.exists():
        return False
    try:
        doc = json.loads(marker.read_text())
    except json.JSONDecodeError:
        return False
    return doc.get("config") == config_hash(cfg) and doc.get("done") is True


def mark_done(cfg: PipelineConfig, paths: RunPaths, name: str) -> None:
    paths.status.mkdir(parents=True, exist_ok=True)
    _marker(paths, name).write_text(
        json.dumps({"stage": name, "config": config_hash(cfg), "done": True}, sort_keys=True)
    )


# ---------------------------------------------------------------------------
# cohort on disk
# ---------------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig, log: Logger, force: bool = False) -> None:
    """Generate the phantom cohort, ground truth and synthetic atlases."""
    cohort = cfg.cohort_path
    manifest_path = cohort / "manifest.json"
    if manifest_path.exists() and not force:
        raise ValidationFailure(
            f"cohort already exists at {cohort}; pass --force to regenerate"
        )
    (cohort / "volumes").mkdir(parents=True, exist_ok=True)
    (cohort / "truth").mkdir(parents=True, exist_ok=True)
    (cohort / "atlases").mkdir(parents=True, exist_ok=True)

    seed = cfg.seeded("phantom")
    volumes, metas, truths = synth_cohort(cfg.phantom, seed)
    paths: dict[str, str] = {}
    truth_doc: dict[str, dict] = {}
    for vol, truth in zip(volumes, truths):
        rel = f"volumes/{vol.subject_id}.mvol"
        save_mvol(vol, cohort / rel)
        paths[vol.subject_id] = rel
        entry: dict = {
            "lesion_centers": [list(c) for c in truth.lesion_centers],
            "anomaly_magnitudes": list(truth.anomaly_magnitudes),
        }
        if truth.is_patient:
            mask_rel = f"truth/{vol.subject_id}_mask.mvol"
            save_mvol(
                Volume(
                    subject_id=vol.subject_id,
                    voxel_size_mm=cfg.phantom.voxel_size_mm,
                    data=truth.anomaly_mask.astype(np.float32)[None],
                    channel_names=("anomaly_mask",),
                ),
                cohort / mask_rel,
            )
            entry["mask_path"] = mask_rel
        truth_doc[vol.subject_id] = entry
    (cohort / "truth.json").write_text(json.dumps(truth_doc, indent=2, sort_keys=True))

    macro = make_octant_atlas(cfg.phantom.dims)
    micro = make_core_atlas(cfg.phantom.dims, inplane_margin=cfg.sampling.patch_size // 2)
    support = ellipsoid_support(cfg.phantom.dims)
    eligible = eligible_patch_centers(BrainMask(mask=support), cfg.sampling.patch_size)
    for atlas in (macro, micro):
        for label, name in atlas.regions():
            if not ((atlas.labels == label) & eligible).any():
                raise ValidationFailure(
                    f"atlas {atlas.atlas_id} region {name} misses patch coverage; "
                    f"phantom dims {cfg.phantom.dims} are too small"
                )
        save_atlas(
            atlas,
            cohort / "atlases" / f"{atlas.atlas_id}.labels.mvol",
            cohort / "atlases" / f"{atlas.atlas_id}.names.json",
        )

    manifest = CohortManifest(
        subjects=tuple(metas),
        paths=paths,
        extra={
            "phantom_seed": seed,
            "brain_support_voxels": int(ellipsoid_support(cfg.phantom.dims).sum()),
            "dims": list(cfg.phantom.dims),
            "atlases": ["macro", "micro"],
        },
    )
    save_manifest(manifest, manifest_path)
    log.info("synth", f"wrote {len(volumes)} subjects", cohort=str(cohort))


@dataclass
class Cohort:
    """Loaded, normalized cohort with masks and atlases."""

    manifest: CohortManifest
    volumes: dict[str, Volume]
    masks: dict[str, BrainMask]
    atlases: list[LabelAtlas]

    def meta(self, subject_id: str) -> SubjectMeta:
        for m in self.manifest.subjects:
            if m.subject_id == subject_id:
                return m
        raise KeyError(subject_id)


def load_cohort(cfg: PipelineConfig) -> Cohort:
    cohort_dir = cfg.cohort_path
    manifest_path = cohort_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValidationFailure(f"no cohort manifest at {manifest_path}; run synth first")
    manifest = load_manifest(manifest_path)
    volumes: dict[str, Volume] = {}
    masks: dict[str, BrainMask] = {}
    for meta in manifest.subjects:
        vol = normalize_channels(load_mvol(cohort_dir / manifest.paths[meta.subject_id]))
        volumes[meta.subject_id] = vol
        masks[meta.subject_id] = compute_brain_mask(vol)
    atlases = []
    for atlas_id in manifest.extra.get("atlases", []):
        labels = cohort_dir / "atlases" / f"{atlas_id}.labels.mvol"
        names = cohort_dir / "atlases" / f"{atlas_id}.names.json"
        if not labels.exists() or not names.exists():
            raise ValidationFailure(f"atlas files for {atlas_id!r} missing under {cohort_dir}")
        atlases.append(load_atlas(labels, names))
    if not atlases:
        raise ValidationFailure(f"cohort at {cohort_dir} declares no atlases")
    return Cohort(manifest=manifest, volumes=volumes, masks=masks, atlases=atlases)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def stage_split(cfg: PipelineConfig, paths: RunPaths, log: Logger) -> list[SplitPlan]:
    cohort_manifest = load_manifest(cfg.cohort_path / "manifest.json")
    plans = bootstrap_split(
        cohort_manifest.controls(),
        n_samples=cfg.split.n_samples,
        n_train=cfg.split.n_train,
        n_test=cfg.split.n_test,
        seed=cfg.seeded("split"),
        age_tolerance=cfg.split.age_tolerance,
        female_range=cfg.split.female_range,
    )
    doc = [
        {
            "sample_index": p.sample_index,
            "train_ids": list(p.train_ids),
            "test_ids": list(p.test_ids),
            "balance": dataclasses.asdict(p.balance),
        }
        for p in plans
    ]
    paths.out.mkdir(parents=True, exist_ok=True)
    paths.splits_file.write_text(json.dumps(doc, indent=2, sort_keys=True))
    log.info("split", f"wrote {len(plans)} balanced split plans")
    return plans


def load_splits(paths: RunPaths) -> list[SplitPlan]:
    if not paths.splits_file.exists():
        raise ValidationFailure(f"no split plans at {paths.splits_file}; run split first")
    doc = json.loads(paths.splits_file.read_text())
    return [
        SplitPlan(
            sample_index=row["sample_index"],
            train_ids=tuple(row["train_ids"]),
            test_ids=tuple(row["test_ids"]),
            balance=BalanceReport(**row["balance"]),
        )
        for row in doc
    ]


# ---------------------------------------------------------------------------
# per-split stages
# ---------------------------------------------------------------------------


def _write_train_log(path: Path, curve: list[EpochStats], deterministic: bool) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "wall_time_s"])
        for row in curve:
            wall = 0.0 if deterministic else row.wall_time_s
            writer.writerow([row.epoch, f"{row.mean_loss:.8f}", f"{wall:.3f}"])


def stage_train(
    cfg: PipelineConfig, split: SplitPlan, cohort: Cohort, split_dir: Path, log: Logger
) -> dict:
    split_dir.mkdir(parents=True, exist_ok=True)
    train_vols = {sid: cohort.volumes[sid] for sid in split.train_ids}
    models: dict[str, object] = {}

    if "ae" in cfg.models:
        slices = []
        for sid in split.train_ids:
            slices.extend(extract_axial_slices(train_vols[sid], cfg.sampling.slice_count))
        tc = dataclasses.replace(
            cfg.ae_train,
            seed=cfg.seeded("train-ae", split.sample_index),
            deterministic=cfg.deterministic,
        )
        ckpt_dir = split_dir if tc.checkpoint_every else None
        model, curve = train_ae(slices, tc, checkpoint_dir=ckpt_dir)
        save_ae(model, split_dir / "ae.anom", meta={"split": split.sample_index})
        _write_train_log(split_dir / "ae_train_log.csv", curve, cfg.deterministic)
        models["ae"] = model
        log.info("train", f"split {split.sample_index}: ae done", final_loss=f"{curve[-1].mean_loss:.5f}")

    if "sae" in cfg.models:
        patches = {}
        for sid in split.train_ids:
            patches[sid] = extract_patches(
                train_vols[sid],
                cohort.masks[sid],
                count=cfg.sampling.patches_per_subject,
                patch_size=cfg.sampling.patch_size,
                seed=cfg.seeded("patches", split.sample_index, sid),
            )
        pairs = build_similar_pairs(
            patches, train_vols, seed=cfg.seeded("pairs", split.sample_index),
            patch_size=cfg.sampling.patch_size,
        )
        left = np.stack([p.left.pixels for p in pairs])
        right = np.stack([p.right.pixels for p in pairs])
        del pairs, patches
        tc = dataclasses.replace(
            cfg.sae_train,
            seed=cfg.seeded("train-sae", split.sample_index),
            deterministic=cfg.deterministic,
        )
        ckpt_dir = split_dir if tc.checkpoint_every else None
        model, curve = train_sae((left, right), tc, checkpoint_dir=ckpt_dir)
        save_sae(model, split_dir / "sae.anom", meta={"split": split.sample_index})
        _write_train_log(split_dir / "sae_train_log.csv", curve, cfg.deterministic)
        models["sae"] = model
        log.info("train", f"split {split.sample_index}: sae done", final_loss=f"{curve[-1].mean_loss:.5f}")
    return models


def load_models(cfg: PipelineConfig, split_dir: Path) -> dict:
    models: dict[str, object] = {}
    for kind in cfg.models:
        path = split_dir / f"{kind}.anom"
        if not path.exists():
            raise ValidationFailure(f"missing checkpoint {path}; run train first")
        models[kind] = load_ae(path) if kind == "ae" else load_sae(path)
    return models


def _error_map(cfg: PipelineConfig, kind: str, model, vol: Volume, mask: BrainMask):
    if kind == "ae":
        return error_volume_ae(model, vol, mask, band_count=cfg.sampling.slice_count)
    return error_volume_sae(model, vol, mask, aggregate=cfg.anomaly.aggregate)


def stage_threshold(
    cfg: PipelineConfig, split: SplitPlan, cohort: Cohort, models: Mapping[str, object],
    split_dir: Path, log: Logger,
) -> None:
    """Fix the abnormality threshold on this split's training controls."""
    for kind, model in models.items():
        maps = [
            _error_map(cfg, kind, model, cohort.volumes[sid], cohort.masks[sid])
            for sid in split.train_ids
        ]
        threshold = abnormality_threshold(maps, q=cfg.anomaly.quantile)
        save_threshold(threshold, split_dir / f"threshold_{kind}.json")
        log.info(
            "threshold",
            f"split {split.sample_index}: {kind} q={cfg.anomaly.quantile}",
            value=f"{threshold.value:.6f}",
            pool=threshold.pool_size,
        )


def _eval_subjects(cohort: Cohort, split: SplitPlan) -> list[SubjectMeta]:
    test_controls = [cohort.meta(sid) for sid in split.test_ids]
    return test_controls + cohort.manifest.patients()


def stage_infer(
    cfg: PipelineConfig, split: SplitPlan, cohort: Cohort, models: Mapping[str, object],
    split_dir: Path, log: Logger,
) -> None:
    """Write error-map volumes for the test controls and all patients."""
    maps_dir = split_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    subjects = _eval_subjects(cohort, split)
    for kind, model in models.items():
        for meta in subjects:
            emap = _error_map(cfg, kind, model, cohort.volumes[meta.subject_id], cohort.masks[meta.subject_id])
            save_error_map(emap, maps_dir / f"{meta.subject_id}_{kind}.mvol")
        log.info("infer", f"split {split.sample_index}: {kind} maps for {len(subjects)} subjects")


def stage_score(
    cfg: PipelineConfig, split: SplitPlan, cohort: Cohort, split_dir: Path, log: Logger
) -> None:
    """Binarize error maps and tabulate per-ROI abnormal percentages."""
    subjects = _eval_subjects(cohort, split)
    for kind in cfg.models:
        tpath = split_dir / f"threshold_{kind}.json"
        if not tpath.exists():
            raise ValidationFailure(f"missing threshold {tpath}; run threshold first")
        threshold = load_threshold(tpath)
        bmaps = {}
        for meta in subjects:
            mpath = split_dir / "maps" / f"{meta.subject_id}_{kind}.mvol"
            if not mpath.exists():
                raise ValidationFailure(f"missing error map {mpath}; run infer first")
            bmaps[meta.subject_id] = binarize(load_error_map(mpath), threshold)
        table = build_score_table(bmaps, subjects, cohort.atlases)
        save_score_table(table, split_dir / f"scores_{kind}.csv")
        log.info("score", f"split {split.sample_index}: {kind} table {table.values.shape}")


def stage_evaluate(cfg: PipelineConfig, split: SplitPlan, split_dir: Path, log: Logger) -> None:
    """ROC threshold selection per ROI for every model of this split."""
    tables = {}
    for kind in cfg.models:
        spath = split_dir / f"scores_{kind}.csv"
        if not spath.exists():
            raise ValidationFailure(f"missing score table {spath}; run score first")
        tables[kind] = load_score_table(spath)
    results = evaluate_split(tables)
    for kind, per_roi in results.items():
        doc = {roi: res.to_dict() for roi, res in per_roi.items()}
        (split_dir / f"roc_{kind}.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        best = max(per_roi.items(), key=lambda kv: kv[1].gmean)
        log.info(
            "evaluate",
            f"split {split.sample_index}: {kind} best region",
            roi=best[0],
            gmean=f"{best[1].gmean:.4f}",
        )


def stage_report(cfg: PipelineConfig, paths: RunPaths, log: Logger) -> None:
    """Aggregate across completed splits and emit the figure bundle."""
    splits = load_splits(paths)
    split_results = []
    sample_indices = []
    for plan in splits:
        split_dir = paths.split_dir(plan.sample_index)
        per_model: dict[str, dict[str, RocResult]] = {}
        complete = True
        for kind in cfg.models:
            rpath = split_dir / f"roc_{kind}.json"
            if not rpath.exists():
                complete = False
                break
            doc = json.loads(rpath.read_text())
            per_model[kind] = {roi: RocResult.from_dict(d) for roi, d in doc.items()}
        if complete:
            split_results.append(per_model)
            sample_indices.append(plan.sample_index)
    if not split_results:
        raise ValidationFailure("no completed split evaluations to report")

    summary = aggregate_bootstrap(split_results, sample_indices)
    paths.summary.mkdir(parents=True, exist_ok=True)
    save_summary(summary, paths.summary / "bootstrap_summary.csv")

    first_dir = paths.split_dir(sample_indices[0])
    split1_tables = {
        kind: load_score_table(first_dir / f"scores_{kind}.csv") for kind in cfg.models
    }
    roi_order = list(next(iter(split1_tables.values())).columns)
    # Dashed separator between the macro block (whole brain + first atlas)
    # and the micro block (last atlas).
    last_prefix = None
    separator_after = None
    for i, col in enumerate(roi_order):
        prefix = col.split(":")[0] if ":" in col else None
        if prefix != last_prefix and last_prefix is not None and prefix is not None:
            separator_after = i
        last_prefix = prefix
    write_report(
        summary,
        roi_order,
        split1_tables,
        paths.summary,
        models=tuple(cfg.models),
        separator_after=separator_after,
    )
    for kind in cfg.models:
        row = summary.row(kind, "whole-brain")
        log.info(
            "report",
            f"whole-brain {kind}",
            mean_gmean=f"{row.mean_gmean:.4f}",
            std=f"{row.std_gmean:.4f}",
            best=f"{row.best_gmean:.4f}",
        )


# ---------------------------------------------------------------------------
# whole-run driver
# ---------------------------------------------------------------------------


def run_split(
    cfg: PipelineConfig,
    sample_index: int,
    cohort: Cohort | None = None,
    resume: bool = False,
    log: Logger | None = None,
) -> None:
    """Train/threshold/infer/score/evaluate one split, honoring markers."""
    log = log or Logger()
    paths = run_paths(cfg)
    plans = load_splits(paths)
    plan = next((p for p in plans if p.sample_index == sample_index), None)
    if plan is None:
        raise ValidationFailure(f"no split plan with sample_index {sample_index}")
    split_dir = paths.split_dir(sample_index)
    tag = f"split{sample_index:02d}"
    stage_names = ("train", "threshold", "infer", "score", "evaluate")
    if resume and all(stage_done(cfg, paths, f"{tag}_{s}") for s in stage_names):
        log.info("run", f"split {sample_index}: all stages already complete")
        return
    if cohort is None:
        cohort = load_cohort(cfg)

    models = None
    if resume and stage_done(cfg, paths, f"{tag}_train"):
        log.info("run", f"split {sample_index}: reusing trained checkpoints")
        models = load_models(cfg, split_dir)
    else:
        try:
            models = stage_train(cfg, plan, cohort, split_dir, log)
        except ValidationFailure:
            raise
        except Exception as exc:
            raise StageFailure("train", str(split_dir), exc) from exc
        mark_done(cfg, paths, f"{tag}_train")

    for name, fn in (
        ("threshold", lambda: stage_threshold(cfg, plan, cohort, models, split_dir, log)),
        ("infer", lambda: stage_infer(cfg, plan, cohort, models, split_dir, log)),
        ("score", lambda: stage_score(cfg, plan, cohort, split_dir, log)),
        ("evaluate", lambda: stage_evaluate(cfg, plan, split_dir, log)),
    ):
        if resume and stage_done(cfg, paths, f"{tag}_{name}"):
            log.info("run", f"split {sample_index}: skipping completed {name}")
            continue
        try:
            fn()
        except ValidationFailure:
            raise
        except Exception as exc:
            raise StageFailure(name, str(split_dir), exc) from exc
        mark_done(cfg, paths, f"{tag}_{name}")


def _split_worker(cfg_doc: dict, sample_index: int, resume: bool, json_logs: bool) -> int:
    cfg = config_from_dict(cfg_doc)
    run_split(cfg, sample_index, cohort=None, resume=resume, log=Logger(json_mode=json_logs))
    return sample_index


def run_pipeline(
    cfg: PipelineConfig, resume: bool = False, log: Logger | None = None
) -> None:
    """Execute the full pipeline under the resolved config."""
    log = log or Logger()
    paths = run_paths(cfg)
    paths.out.mkdir(parents=True, exist_ok=True)

    if paths.config.exists() and resume:
        stored = load_config(paths.config)
        if config_hash(stored) != config_hash(cfg):
            raise ValidationFailure(
                f"{paths.config} belongs to a different configuration; "
                "rerun without --resume or point --out elsewhere"
            )
    save_config(cfg, paths.config)

    if resume and stage_done(cfg, paths, "synth"):
        log.info("run", "skipping completed synth")
    else:
        if (cfg.cohort_path / "manifest.json").exists():
            log.info("run", f"using existing cohort at {cfg.cohort_path}")
        else:
            try:
                stage_synth(cfg, log)
            except ValidationFailure:
                raise
            except Exception as exc:
                raise StageFailure("synth", str(cfg.cohort_path), exc) from exc
        mark_done(cfg, paths, "synth")

    if resume and stage_done(cfg, paths, "split"):
        log.info("run", "skipping completed split")
    else:
        try:
            stage_split(cfg, paths, log)
        except ValidationFailure:
            raise
        except Exception as exc:
            raise StageFailure("split", str(paths.splits_file), exc) from exc
        mark_done(cfg, paths, "split")

    plans = load_splits(paths)
    indices = [p.sample_index for p in plans]
    if cfg.jobs > 1 and len(indices) > 1:
        doc = config_to_dict(cfg)
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [
                pool.submit(_split_worker, doc, i, resume, log.json_mode) for i in indices
            ]
            for fut in futures:
                fut.result()
    else:
        cohort = load_cohort(cfg)
        for i in indices:
            run_split(cfg, i, cohort=cohort, resume=resume, log=log)

    if resume and stage_done(cfg, paths, "report"):
        log.info("run", "skipping completed report")
    else:
        try:
            stage_report(cfg, paths, log)
        except ValidationFailure:
            raise
        except Exception as exc:
            raise StageFailure("report", str(paths.summary), exc) from exc
        mark_done(cfg, paths, "report")
    log.info("run", "pipeline complete", out=str(paths.out))
