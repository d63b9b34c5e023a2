"""``mswsi``: the tile / crop / train / evaluate pipeline as resumable stages over a workdir.

Workdir layout::

    cohort/        cohort.csv and, for synthetic cohorts, one PNG per patient
    tiles/         manifest.csv, intermediates.csv, <tile_id>.png, intermediate/<tile_id>-i<n>.png
    folds/         folds.csv
    models/        <run>/fold<NN>.json
    predictions/   predictions.csv (tile level), crops.csv (crop level), crops/ (external scorer)
    reports/       report.json
    run_log.jsonl  one JSON object per executed stage

Every CSV starts with a ``# config_hash=... seed=...`` comment; PNGs carry the same fields
as text chunks; models and reports carry them in their metadata.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from multiscale_wsi.classifier import BaselineModel, score_external
from multiscale_wsi.cohort import FoldPlan, read_cohort
from multiscale_wsi.config import ConfigError, ExperimentConfig, load_config, parse_config
from multiscale_wsi.crops import ordered_crops
from multiscale_wsi.io_utils import atomic_write_text, provenance_line, read_csv_rows, \
    sha256_file
from multiscale_wsi.pipeline import (Region, parallel_map, plan_folds, predict_fold,
                                     region_features_from_files, train_fold)
from multiscale_wsi.raster import load_raster, save_raster
from multiscale_wsi.stats import EvalReport, PredictionRecord, build_report, read_predictions, \
    write_predictions
from multiscale_wsi.synth import generate_cohort
from multiscale_wsi.tiler import (INTERMEDIATE_HEADER, ManifestRow, TileManifest,
                                  build_multiscale_set, make_intermediate, region_of,
                                  tile_id_for)

log = logging.getLogger("mswsi")

STAGES = ("synth", "tile", "plan-folds", "train", "predict", "evaluate", "compare")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass
class Context:
    cfg: ExperimentConfig
    workdir: Path
    jobs: int = 1

    # -- paths
    @property
    def cohort_csv(self) -> Path:
        return Path(self.cfg.cohort) if self.cfg.cohort else self.workdir / "cohort" / "cohort.csv"

    @property
    def manifest(self) -> Path:
        return self.workdir / "tiles" / "manifest.csv"

    @property
    def intermediates(self) -> Path:
        return self.workdir / "tiles" / "intermediates.csv"

    @property
    def folds(self) -> Path:
        return self.workdir / "folds" / "folds.csv"

    def model_path(self, run_name: str, fold: int) -> Path:
        return self.workdir / "models" / run_name / f"fold{fold:02d}.json"

    @property
    def predictions(self) -> Path:
        return self.workdir / "predictions" / "predictions.csv"

    @property
    def crop_predictions(self) -> Path:
        return self.workdir / "predictions" / "crops.csv"

    @property
    def report(self) -> Path:
        return self.workdir / "reports" / "report.json"

    # -- provenance
    @property
    def preamble(self) -> str:
        return provenance_line(config_hash=self.cfg.hash(), seed=self.cfg.seed)

    @property
    def png_text(self) -> dict:
        return {"config_hash": self.cfg.hash(), "seed": str(self.cfg.seed)}

    def rel(self, path: Path) -> str:
        try:
            return str(Path(path).resolve().relative_to(self.workdir.resolve()))
        except ValueError:
            return str(Path(path).resolve())


# --- stages -------------------------------------------------------------------------------
# Each returns (inputs, outputs) as lists of paths for the run log.


def stage_synth(ctx: Context):
    if ctx.cfg.cohort:
        raise StageError("synth", "config names an existing cohort; synth would not be used")
    out_dir = ctx.workdir / "cohort"
    path = generate_cohort(ctx.cfg.n_cmb, ctx.cfg.n_dn, ctx.cfg.synth, ctx.cfg.synth_seed,
                           out_dir, jobs=ctx.jobs, text=ctx.png_text, preamble=ctx.preamble)
    return [], [path] + sorted(out_dir.glob("*.png"))


def _tile_patient(args):
    patient, sizes, pairs, pad, tiles_dir, text = args
    rows, inter_rows = [], []
    cache = {}
    for ann, region_id in zip(patient.annotations, patient.region_ids()):
        if ann.wsi_path not in cache:
            cache = {ann.wsi_path: load_raster(ann.wsi_path)}
        tiles = build_multiscale_set(cache[ann.wsi_path], ann.center, sizes, pad,
                                     region_id=region_id, patient_id=patient.patient_id,
                                     label=patient.label)
        for rec in tiles:
            name = f"{rec.tile_id}.png"
            save_raster(rec.pixels, Path(tiles_dir) / name, text=text)
            rows.append(ManifestRow.from_record(rec, name))
            for inter in sorted(i for t, i in pairs if t == rec.tile_size):
                name = f"intermediate/{rec.tile_id}-i{inter}.png"
                save_raster(make_intermediate(rec, inter).pixels, Path(tiles_dir) / name,
                            text=text)
                inter_rows.append((rec.tile_id, inter, name))
    return rows, inter_rows


def stage_tile(ctx: Context):
    patients = _read_cohort(ctx, "tile")
    tiles_dir = ctx.workdir / "tiles"
    pairs = sorted({(r.tile_size, r.intermediate_size) for r in ctx.cfg.runs})
    work = [(p, ctx.cfg.tile_sizes, pairs, ctx.cfg.pad_value, str(tiles_dir), ctx.png_text)
            for p in patients]
    rows, inter_rows = [], []
    for r, ir in parallel_map(_tile_patient, work, ctx.jobs):
        rows.extend(r)
        inter_rows.extend(ir)
    TileManifest(rows, tiles_dir).write(ctx.manifest, ctx.preamble)
    lines = [",".join(INTERMEDIATE_HEADER)]
    lines += [f"{t},{i},{p}" for t, i, p in sorted(inter_rows)]
    atomic_write_text(ctx.intermediates, ctx.preamble + "\n".join(lines) + "\n")
    outputs = [ctx.manifest, ctx.intermediates] + [tiles_dir / r.path for r in rows] \
        + [tiles_dir / p for _, _, p in inter_rows]
    return [ctx.cohort_csv], outputs


def stage_plan_folds(ctx: Context):
    patients = _read_cohort(ctx, "plan-folds")
    try:
        plan = plan_folds(patients, ctx.cfg)
    except ValueError as exc:
        raise StageError("plan-folds", str(exc)) from exc
    plan.write(ctx.folds, ctx.preamble)
    return [ctx.cohort_csv], [ctx.folds]


def stage_train(ctx: Context):
    regions, inter_paths = _read_tiles(ctx, "train")
    folds = _read_folds(ctx, "train")
    features = _features(ctx, regions, inter_paths, need_train=True)
    outputs = []
    for run in ctx.cfg.runs:
        for f, fold in enumerate(folds.folds):
            model = train_fold(features, regions, fold, run, f, ctx.cfg)
            path = ctx.model_path(run.name, f)
            model.save(path)
            outputs.append(path)
    return [ctx.manifest, ctx.intermediates, ctx.folds], outputs


def stage_predict(ctx: Context, scorer: str | None = None, timeout: float | None = None):
    regions, inter_paths = _read_tiles(ctx, "predict")
    folds = _read_folds(ctx, "predict")
    models = {}
    for run in ctx.cfg.runs:
        for f in range(len(folds.folds)):
            path = ctx.model_path(run.name, f)
            if scorer is None:
                if not path.is_file():
                    raise StageError("predict", f"missing model {ctx.rel(path)}; run train first")
                models[(run.name, f)] = BaselineModel.load(path)
    predictions = {}
    if scorer is None:
        features = _features(ctx, regions, inter_paths, need_train=False)
        for run in ctx.cfg.runs:
            recs = []
            for f, fold in enumerate(folds.folds):
                recs.extend(predict_fold(models[(run.name, f)], features, regions, fold, run))
            predictions[run.name] = sorted(recs, key=lambda r: r.tile_id)
    else:
        predictions = _predict_external(ctx, regions, inter_paths, folds, scorer, timeout)
    write_predictions(predictions, ctx.predictions, ctx.crop_predictions, ctx.preamble)
    inputs = [ctx.manifest, ctx.intermediates, ctx.folds] + \
        [p for p in (ctx.model_path(r.name, f) for r in ctx.cfg.runs
                     for f in range(len(folds.folds))) if p.is_file()]
    return inputs, [ctx.predictions, ctx.crop_predictions]


def _predict_external(ctx, regions, inter_paths, folds, scorer, timeout):
    tested = {pid for fold in folds.folds for pid in fold.test}
    crop_dir = ctx.workdir / "predictions" / "crops"
    predictions = {}
    for run in ctx.cfg.runs:
        paths, owners = [], []
        for r in regions:
            if r.patient_id not in tested:
                continue
            inter = load_raster(inter_paths[r.region_id][run])
            tid = tile_id_for(r.region_id, run.tile_size)
            for k, crop in enumerate(ordered_crops(inter, run.input_size)):
                path = crop_dir / run.name / f"{tid}-c{k:03d}.png"
                save_raster(crop, path, text=ctx.png_text)
                paths.append(path)
                owners.append(r)
        try:
            scores = score_external(paths, scorer, timeout)
        except RuntimeError as exc:
            raise StageError("predict", str(exc)) from exc
        by_region: dict = {}
        for r, s in zip(owners, scores):
            by_region.setdefault(r, []).append(s)
        predictions[run.name] = sorted(
            (PredictionRecord(tile_id_for(r.region_id, run.tile_size), r.patient_id, r.label, sc)
             for r, sc in by_region.items()), key=lambda rec: rec.tile_id)
    return predictions


def stage_evaluate(ctx: Context):
    runs = _read_predictions(ctx, "evaluate")
    report = build_report(runs, [], ctx.cfg.stats_config(), _meta(ctx))
    report.write(ctx.report)
    return [ctx.predictions, ctx.crop_predictions], [ctx.report]


def stage_compare(ctx: Context, pairs=None):
    runs = _read_predictions(ctx, "compare")
    comparisons = list(pairs or ctx.cfg.comparisons)
    if not comparisons:
        raise StageError("compare", "no comparisons configured")
    if not ctx.report.is_file():
        raise StageError("compare", f"missing {ctx.rel(ctx.report)}; run evaluate first")
    try:
        base = EvalReport.read(ctx.report)
        cmp = build_report(runs, comparisons, ctx.cfg.stats_config(), _meta(ctx))
    except ValueError as exc:
        raise StageError("compare", str(exc)) from exc
    base.comparisons = cmp.comparisons
    base.meta = cmp.meta
    base.write(ctx.report)
    return [ctx.predictions, ctx.crop_predictions], [ctx.report]


# --- stage helpers ------------------------------------------------------------------------


def _meta(ctx: Context) -> dict:
    return {"config_hash": ctx.cfg.hash(), "seed": ctx.cfg.seed}


def _read_cohort(ctx: Context, stage: str):
    if not ctx.cohort_csv.is_file():
        raise StageError(stage, f"cohort file not found: {ctx.cohort_csv} (run synth first)")
    try:
        return read_cohort(ctx.cohort_csv)
    except ValueError as exc:
        raise StageError(stage, str(exc)) from exc


def _read_folds(ctx: Context, stage: str) -> FoldPlan:
    if not ctx.folds.is_file():
        raise StageError(stage, f"missing {ctx.rel(ctx.folds)}; run plan-folds first")
    return FoldPlan.read(ctx.folds, ctx.cfg.fold_seed)


def _read_tiles(ctx: Context, stage: str):
    """Regions (sorted) and ``{region_id: {RunSpec: intermediate path}}`` from the manifests."""
    for p in (ctx.manifest, ctx.intermediates):
        if not p.is_file():
            raise StageError(stage, f"missing {ctx.rel(p)}; run tile first")
    manifest = TileManifest.read(ctx.manifest)
    inter = {(r["tile_id"], int(r["intermediate_size"])): manifest.root / r["path"]
             for r in read_csv_rows(ctx.intermediates, INTERMEDIATE_HEADER)}
    regions = sorted({Region(region_of(r.tile_id), r.patient_id, r.label)
                      for r in manifest.rows}, key=lambda r: r.region_id)
    paths = {}
    for reg in regions:
        paths[reg.region_id] = {}
        for run in ctx.cfg.runs:
            key = (tile_id_for(reg.region_id, run.tile_size), run.intermediate_size)
            if key not in inter:
                raise StageError(stage, f"no intermediate {key[1]} for tile {key[0]}; "
                                        "re-run tile with this config")
            paths[reg.region_id][run] = inter[key]
    return regions, paths


def _features(ctx: Context, regions, inter_paths, need_train: bool) -> dict:
    work = [(r.region_id, inter_paths[r.region_id], ctx.cfg, need_train) for r in regions]
    return dict(parallel_map(region_features_from_files, work, ctx.jobs))


def _read_predictions(ctx: Context, stage: str):
    if not ctx.predictions.is_file():
        raise StageError(stage, f"missing {ctx.rel(ctx.predictions)}; run predict first")
    crops = ctx.crop_predictions if ctx.crop_predictions.is_file() else None
    runs = read_predictions(ctx.predictions, crops)
    missing = [r.name for r in ctx.cfg.runs if r.name not in runs]
    if missing:
        raise StageError(stage, f"predictions lack runs {missing}")
    return [(r.name, runs[r.name]) for r in ctx.cfg.runs]


def run_stage(ctx: Context, name: str, fn, *args) -> None:
    t0 = time.perf_counter()
    log.info("stage %s ...", name)
    try:
        inputs, outputs = fn(ctx, *args)
    except StageError:
        raise
    except (ValueError, OSError, RuntimeError) as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    entry = {
        "stage": name,
        "duration_s": round(time.perf_counter() - t0, 3),
        "config_hash": ctx.cfg.hash(),
        "seed": ctx.cfg.seed,
        "inputs": {ctx.rel(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": {ctx.rel(p): sha256_file(p) for p in outputs},
    }
    ctx.workdir.mkdir(parents=True, exist_ok=True)
    with open(ctx.workdir / "run_log.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
    log.info("stage %s done in %.1fs", name, entry["duration_s"])


def run_all(ctx: Context, scorer: str | None = None) -> EvalReport:
    if not ctx.cfg.cohort:
        run_stage(ctx, "synth", stage_synth)
    run_stage(ctx, "tile", stage_tile)
    run_stage(ctx, "plan-folds", stage_plan_folds)
    if scorer is None:
        run_stage(ctx, "train", stage_train)
    run_stage(ctx, "predict", stage_predict, scorer)
    run_stage(ctx, "evaluate", stage_evaluate)
    if ctx.cfg.comparisons:
        run_stage(ctx, "compare", stage_compare)
    return EvalReport.read(ctx.report)


# --- argument handling --------------------------------------------------------------------


def _pair(text: str) -> tuple[str, str]:
    a, sep, b = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("expected RUN_A:RUN_B")
    return a.strip(), b.strip()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mswsi", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="experiment INI file (defaults apply when omitted)")
    ap.add_argument("--seed", type=int, help="override [experiment] seed")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    ap.add_argument("--workdir", default="work", help="artifact directory (default ./work)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--cmb", type=int, help="CMB-like patients")
    p.add_argument("--dn", type=int, help="DN-like patients")
    sub.add_parser("tile", help="extract tiles and intermediates, write manifests")
    sub.add_parser("plan-folds", help="patient-level folds")
    sub.add_parser("train", help="one baseline model per run and fold")
    p = sub.add_parser("predict", help="score ordered crops and pool them per tile")
    p.add_argument("--scorer", help="external scorer command (paths on stdin, scores on stdout)")
    p.add_argument("--scorer-timeout", type=float, default=None)
    sub.add_parser("evaluate", help="AUC with BCa intervals per run")
    p = sub.add_parser("compare", help="paired permutation tests between runs")
    p.add_argument("--pair", type=_pair, action="append", metavar="RUN_A:RUN_B",
                   help="comparison to run (repeatable); default: the config's comparisons")
    p = sub.add_parser("run-all", help="every stage in order")
    p.add_argument("--cmb", type=int)
    p.add_argument("--dn", type=int)
    p.add_argument("--scorer", help="external scorer command; skips training")
    return ap


def load_context(args) -> Context:
    cfg = load_config(args.config) if args.config else parse_config("")
    overrides = {"seed": args.seed, "n_cmb": getattr(args, "cmb", None),
                 "n_dn": getattr(args, "dn", None)}
    cfg = cfg.with_overrides(**overrides)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return Context(cfg, Path(args.workdir), args.jobs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        ctx = load_context(args)
    except ConfigError as exc:
        print(f"mswsi: config error: {exc}", file=sys.stderr)
        return 2
    try:
        cmd = args.command
        if cmd == "synth":
            run_stage(ctx, "synth", stage_synth)
        elif cmd == "tile":
            run_stage(ctx, "tile", stage_tile)
        elif cmd == "plan-folds":
            run_stage(ctx, "plan-folds", stage_plan_folds)
        elif cmd == "train":
            run_stage(ctx, "train", stage_train)
        elif cmd == "predict":
            run_stage(ctx, "predict", stage_predict, args.scorer, args.scorer_timeout)
        elif cmd == "evaluate":
            run_stage(ctx, "evaluate", stage_evaluate)
            print(EvalReport.read(ctx.report).table())
        elif cmd == "compare":
            run_stage(ctx, "compare", stage_compare, args.pair)
            print(EvalReport.read(ctx.report).table())
        elif cmd == "run-all":
            print(run_all(ctx, args.scorer).table())
    except StageError as exc:
        print(f"mswsi: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
