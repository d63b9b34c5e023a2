"""Tile -> intermediate -> crops -> features -> cross-validated baseline -> pooled tile scores.

Used by the CLI stages (which persist every step) and by :func:`run_experiment`, which runs
the same computation in memory on procedurally rendered synthetic slides.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from multiscale_wsi.classifier import BaselineModel, featurize, fit_features
from multiscale_wsi.cohort import Annotation, FoldPlan, PatientRecord, auto_quotas, make_folds
from multiscale_wsi.config import ExperimentConfig, RunSpec
from multiscale_wsi.crops import augment, crop_seed, ordered_crops, random_crop
from multiscale_wsi.io_utils import stable_hash
from multiscale_wsi.raster import Raster, load_raster
from multiscale_wsi.stats import EvalReport, PredictionRecord, auc_roc, build_report
from multiscale_wsi.synth import cohort_layout, make_slide
from multiscale_wsi.tiler import TileRecord, make_intermediate, tile_id_for, tile_origin

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Region:
    region_id: str
    patient_id: str
    label: str


@dataclass
class RegionFeatures:
    eval: np.ndarray   # (n_ordered_crops, 16)
    train: np.ndarray  # (epochs, crops_per_tile, 16)


def parallel_map(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def sub_tile(big: TileRecord, size: int, source_w: int, source_h: int,
             tile_id: str = "") -> TileRecord:
    """The centered ``size`` tile cut from an already extracted larger tile (nesting)."""
    bx, by = big.origin
    x0, y0 = tile_origin(big.center, size)
    pixels = big.pixels.crop(x0 - bx, y0 - by, size, size)
    w = max(min(x0 + size, source_w) - max(x0, 0), 0)
    h = max(min(y0 + size, source_h) - max(y0, 0), 0)
    return TileRecord(tile_id, big.patient_id, big.label, big.center, size,
                      1.0 - (w * h) / (size * size), pixels)


def eval_features(intermediate: Raster, run: RunSpec) -> np.ndarray:
    return np.vstack([featurize(c) for c in ordered_crops(intermediate, run.input_size)])


def train_crop(intermediate: Raster, run: RunSpec, tile_id: str, index: int,
               cfg: ExperimentConfig) -> Raster:
    seed = crop_seed(cfg.crop_base_seed, tile_id, index)
    crop = random_crop(intermediate, run.input_size, seed)
    if cfg.augment is not None:
        crop = augment(crop, cfg.augment, stable_hash(seed, "augment"))
    return crop


def train_features(intermediate: Raster, run: RunSpec, tile_id: str,
                   cfg: ExperimentConfig) -> np.ndarray:
    n = cfg.epochs * cfg.crops_per_tile
    if cfg.augment is None and run.input_size == run.intermediate_size:
        rows = np.repeat(featurize(intermediate)[None, :], n, axis=0)
    else:
        rows = np.vstack([featurize(train_crop(intermediate, run, tile_id, i, cfg))
                          for i in range(n)])
    return rows.reshape(cfg.epochs, cfg.crops_per_tile, -1)


def region_features(intermediates: dict, region_id: str, cfg: ExperimentConfig,
                    need_train: bool = True) -> dict:
    """``{run name: RegionFeatures}`` from ``{RunSpec: intermediate Raster}``."""
    out = {}
    for run, inter in intermediates.items():
        tid = tile_id_for(region_id, run.tile_size)
        tr = train_features(inter, run, tid, cfg) if need_train else np.empty((0, 0, 16))
        out[run.name] = RegionFeatures(eval_features(inter, run), tr)
    return out


def region_features_from_files(args) -> tuple[str, dict]:
    """Worker: ``(region_id, {RunSpec: intermediate PNG path}, cfg, need_train)``."""
    region_id, paths, cfg, need_train = args
    inters = {run: load_raster(path) for run, path in paths.items()}
    return region_id, region_features(inters, region_id, cfg, need_train)


def intermediates_from_tiles(tiles: dict, runs) -> dict:
    """``{RunSpec: Raster}`` given ``{tile_size: TileRecord}``."""
    return {run: make_intermediate(tiles[run.tile_size], run.intermediate_size).pixels
            for run in runs}


# --- cross-validation ---------------------------------------------------------------------


def plan_folds(patients, cfg: ExperimentConfig) -> FoldPlan:
    test_q, val_q = auto_quotas(patients, cfg.k)
    return make_folds(patients, cfg.k, cfg.test_quota or test_q, cfg.val_quota or val_q,
                      cfg.fold_seed)


def _fold_regions(regions, patient_ids) -> list[Region]:
    ids = set(patient_ids)
    return [r for r in regions if r.patient_id in ids]


def train_fold(features: dict, regions, fold, run: RunSpec, fold_index: int,
               cfg: ExperimentConfig) -> BaselineModel:
    train = _fold_regions(regions, fold.train)
    if not train:
        raise ValueError(f"fold {fold_index} has no training patients")
    data = []
    for e in range(cfg.epochs):
        x = np.vstack([features[r.region_id][run.name].train[e] for r in train])
        y = [r.label for r in train for _ in range(cfg.crops_per_tile)]
        data.append((x, y))
    model = fit_features(data, cfg.train_config((run.name, fold_index)))
    val = _fold_regions(regions, fold.val)
    model.meta.update({"run": run.name, "fold": fold_index, "config_hash": cfg.hash(),
                       "seed": cfg.seed, "n_train_tiles": len(train), "n_val_tiles": len(val)})
    if len({r.label for r in val}) == 2:
        ys = [float(np.mean(model.predict_features(features[r.region_id][run.name].eval)))
              for r in val]
        model.meta["val_auc"] = auc_roc([r.label for r in val], ys)
    return model


def predict_fold(model: BaselineModel, features: dict, regions, fold, run: RunSpec):
    out = []
    for r in _fold_regions(regions, fold.test):
        scores = model.predict_features(features[r.region_id][run.name].eval)
        out.append(PredictionRecord(tile_id_for(r.region_id, run.tile_size), r.patient_id,
                                    r.label, [float(s) for s in scores]))
    return out


def cross_validate(features: dict, regions, folds: FoldPlan, cfg: ExperimentConfig):
    """Train one model per (run, fold); collect out-of-fold tile predictions per run."""
    predictions, models = {}, {}
    for run in cfg.runs:
        recs = []
        for f, fold in enumerate(folds.folds):
            model = train_fold(features, regions, fold, run, f, cfg)
            models[(run.name, f)] = model
            recs.extend(predict_fold(model, features, regions, fold, run))
        predictions[run.name] = sorted(recs, key=lambda r: r.tile_id)
    return predictions, models


def report_for(predictions: dict, cfg: ExperimentConfig) -> EvalReport:
    runs = [(run.name, predictions[run.name]) for run in cfg.runs]
    return build_report(runs, list(cfg.comparisons), cfg.stats_config(),
                        meta={"config_hash": cfg.hash(), "seed": cfg.seed})


# --- in-memory synthetic experiment -------------------------------------------------------


def _synthetic_region(args):
    pid, label, pseed, cfg = args
    slide = make_slide(label, cfg.synth, pseed)
    sizes = cfg.tile_sizes
    big = slide.render_tile(slide.center, sizes[-1], cfg.pad_value, patient_id=pid)
    tiles = {s: sub_tile(big, s, slide.size, slide.size) for s in sizes[:-1]}
    tiles[sizes[-1]] = big
    region_id = f"{pid}-r0"
    return region_id, region_features(intermediates_from_tiles(tiles, cfg.runs), region_id, cfg)


def synthetic_patients(cfg: ExperimentConfig):
    """Patient records for the synthetic cohort, without rendering any pixels."""
    out = []
    for pid, label, pseed in cohort_layout(cfg.n_cmb, cfg.n_dn, cfg.synth_seed):
        slide = make_slide(label, cfg.synth, pseed)
        out.append(PatientRecord(pid, label, (Annotation(f"{pid}.png", slide.center),)))
    return out


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, progress: Callable | None = None):
    """Synthetic cohort end to end in memory; returns ``(report, predictions)``.

    Produces the same numbers as ``run-all`` on the same config, minus the file I/O.
    """
    layout = cohort_layout(cfg.n_cmb, cfg.n_dn, cfg.synth_seed)
    patients = synthetic_patients(cfg)
    regions = [Region(f"{pid}-r0", pid, label) for pid, label, _ in layout]
    work = [(pid, label, pseed, cfg) for pid, label, pseed in layout]
    features = {}
    for rid, feats in _imap(_synthetic_region, work, jobs, progress):
        features[rid] = feats
    folds = plan_folds(patients, cfg)
    predictions, _ = cross_validate(features, regions, folds, cfg)
    return report_for(predictions, cfg), predictions


def _imap(fn, items, jobs, progress):
    items = list(items)
    if jobs <= 1:
        for i, it in enumerate(items):
            yield fn(it)
            if progress:
                progress(i + 1, len(items))
        return
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for i, res in enumerate(ex.map(fn, items)):
            yield res
            if progress:
                progress(i + 1, len(items))
