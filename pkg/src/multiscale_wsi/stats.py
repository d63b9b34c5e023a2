"""Tile-level pooling of crop scores and the evaluation statistics: AUC, BCa CIs, permutation tests.

Resampling is driven by one ``numpy.random.default_rng(seed)`` stream per call:

* bootstrap: ``rng.integers(0, m, (B, m))`` gives replicate ``b`` as row ``b`` (``m``
  resampling units). For the AUC, rows missing a class are then redrawn in replicate
  order with ``rng.integers(0, m, m)``, at most ``MAX_REDRAWS`` times each.
* permutation: ``rng.random((n_perm, m)) < 0.5`` marks the units whose two scores swap.

Normal CDF and quantile come from ``scipy.special.ndtr`` / ``ndtri``. Reference values::

    norm_cdf(0) = 0.5                      norm_ppf(0.975) = 1.959963984540054
    norm_cdf(1.96) = 0.9750021048517795    norm_ppf(0.025) = -1.959963984540054
    norm_cdf(-1) = 0.15865525393145707     norm_ppf(0.5) = 0.0
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from multiscale_wsi import _kernels
from multiscale_wsi.cohort import label_to_int
from multiscale_wsi.io_utils import atomic_write_text, read_csv_rows
from multiscale_wsi.tiler import region_of

REPORT_FORMAT_VERSION = 1
PREDICTION_HEADER = ("config", "tile_id", "patient_id", "label", "y")
CROP_HEADER = ("config", "tile_id", "crop_index", "score")
MAX_REDRAWS = 1000
_PERM_CHUNK = 4096


class StatsError(ValueError):
    pass


# --- records and config -------------------------------------------------------------------


@dataclass
class PredictionRecord:
    tile_id: str
    patient_id: str
    label: str
    crop_scores: list[float]
    y: float = field(default=float("nan"))

    def __post_init__(self):
        if not self.crop_scores:
            raise StatsError(f"tile {self.tile_id} has no crop scores")
        mean = aggregate(self.crop_scores)
        if math.isnan(self.y):
            self.y = mean
        elif abs(self.y - mean) > 1e-12:
            raise StatsError(f"tile {self.tile_id}: y={self.y!r} is not the mean of its crop scores")

    @property
    def region_id(self) -> str:
        return region_of(self.tile_id)


@dataclass(frozen=True)
class StatsConfig:
    n_ci: int = 10000
    n_perm: int = 10000
    alpha: float = 0.05
    seed: int = 0
    resample_unit: Literal["tile", "patient"] = "tile"

    def __post_init__(self):
        if self.n_ci < 1 or self.n_perm < 1:
            raise StatsError("n_ci and n_perm must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise StatsError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.resample_unit not in ("tile", "patient"):
            raise StatsError(f"resample_unit must be 'tile' or 'patient'")


def aggregate(crop_scores: Sequence[float]) -> float:
    """Mean pooling of crop predictions into one tile prediction."""
    scores = np.asarray(crop_scores, dtype=np.float64)
    if scores.size == 0:
        raise StatsError("cannot aggregate an empty list of crop scores")
    return math.fsum(scores.tolist()) / scores.size


# --- AUC ----------------------------------------------------------------------------------


def _as_binary(labels) -> np.ndarray:
    out = np.array([lab if isinstance(lab, (int, np.integer, bool, np.bool_)) else
                    label_to_int(lab) for lab in labels], dtype=np.int64)
    if out.size and not np.isin(out, (0, 1)).all():
        raise StatsError("labels must be binary")
    return out


def mann_whitney_2u(pos: np.ndarray, neg: np.ndarray) -> int:
    """``2 * U``: twice the count of positive-over-negative wins, ties counting one half."""
    neg = np.sort(neg)
    less = np.searchsorted(neg, pos, side="left")
    leq = np.searchsorted(neg, pos, side="right")
    return int(less.sum() + leq.sum())


def auc_roc(labels, scores) -> float:
    y = _as_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise StatsError(f"{y.size} labels vs {s.size} scores")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise StatsError("AUC needs both classes present")
    return mann_whitney_2u(pos, neg) / (2 * pos.size * neg.size)


# --- normal distribution ------------------------------------------------------------------


def norm_cdf(x):
    return ndtr(x)


def norm_ppf(p):
    return ndtri(p)


# --- BCa bootstrap ------------------------------------------------------------------------


def _groups(n: int, groups) -> list[np.ndarray]:
    if groups is None:
        return [np.array([i]) for i in range(n)]
    index: dict = defaultdict(list)
    for i, g in enumerate(groups):
        index[g].append(i)
    return [np.array(index[g]) for g in sorted(index)]


def _both_classes(y: np.ndarray) -> bool:
    return bool(y.any()) and not bool(y.all())


def _bootstrap(y, s, units, cfg: StatsConfig, stat, need_both: bool, grouped: bool):
    m = len(units)
    rng = np.random.default_rng(cfg.seed)
    picks = rng.integers(0, m, (cfg.n_ci, m))
    if need_both:
        unit_pos = np.array([bool(y[u].any()) for u in units])
        unit_neg = np.array([not bool(y[u].all()) for u in units])
        bad = ~(unit_pos[picks].any(axis=1) & unit_neg[picks].any(axis=1))
        for b in np.flatnonzero(bad):
            for _ in range(MAX_REDRAWS):
                row = rng.integers(0, m, m)
                if unit_pos[row].any() and unit_neg[row].any():
                    picks[b] = row
                    break
            else:
                raise StatsError(
                    f"bootstrap replicate {b} lacked a class after {MAX_REDRAWS} draws")
    if need_both and not grouped:
        return _kernels.bootstrap_auc(y, s, picks)
    out = np.empty(cfg.n_ci)
    for b in range(cfg.n_ci):
        idx = np.concatenate([units[i] for i in picks[b]]) if grouped else picks[b]
        out[b] = stat(y[idx], s[idx])
    return out


def bca_ci(labels, scores, cfg: StatsConfig, statistic: Callable | None = None,
           groups=None) -> tuple[float, float]:
    """BCa confidence interval at level ``1 - cfg.alpha``.

    ``statistic(labels, scores)`` defaults to the AUC; with the default, resamples that
    lose a class are redrawn from the same replicate stream. ``groups`` switches the
    resampling unit from single items to groups (e.g. patients).
    """
    y = _as_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise StatsError(f"{y.size} labels vs {s.size} scores")
    need_both = statistic is None
    stat = statistic or auc_roc
    if need_both and not _both_classes(y):
        raise StatsError("BCa for AUC needs both classes present")
    units = _groups(len(y), groups)
    m = len(units)
    if m < 2:
        raise StatsError("BCa needs at least two resampling units")
    theta = float(stat(y, s))

    boot = _bootstrap(y, s, units, cfg, stat, need_both, groups is not None)
    if np.all(boot == boot[0]):
        return theta, theta

    B = cfg.n_ci
    prop = (np.count_nonzero(boot < theta) + 0.5 * np.count_nonzero(boot == theta)) / B
    prop = min(max(prop, 1.0 / (B + 1)), B / (B + 1.0))
    z0 = float(norm_ppf(prop))

    jack = []
    for i in range(m):
        keep = np.concatenate([units[j] for j in range(m) if j != i])
        if need_both and not _both_classes(y[keep]):
            continue
        jack.append(float(stat(y[keep], s[keep])))
    jack = np.asarray(jack)
    accel = 0.0
    if jack.size >= 2:
        d = jack.mean() - jack
        den = 6.0 * float(np.sum(d * d)) ** 1.5
        if den > 0:
            accel = float(np.sum(d ** 3)) / den

    ordered = np.sort(boot)
    bounds = []
    for z_alpha in (norm_ppf(cfg.alpha / 2), norm_ppf(1 - cfg.alpha / 2)):
        zz = z0 + z_alpha
        level = float(norm_cdf(z0 + zz / (1.0 - accel * zz)))
        k = min(max(math.ceil(level * B), 1), B)
        bounds.append(float(ordered[k - 1]))
    lo, hi = bounds
    # the interval is widened to contain the point estimate when the adjusted
    # percentiles land entirely on one side of it
    return min(lo, theta), max(hi, theta)


# --- permutation test ---------------------------------------------------------------------


def _auc_2u(y: np.ndarray, s: np.ndarray) -> int:
    return int(_kernels.mw2u(s[y == 1], s[y == 0]))


def permutation_test(labels, scores_a, scores_b, cfg: StatsConfig, groups=None) -> float:
    """Two-sided paired test of ``AUC(a) == AUC(b)`` by random per-unit swaps.

    Returns the add-one estimate ``(1 + #{T* >= T}) / (1 + n_perm)`` with
    ``T = |AUC(a) - AUC(b)|``, compared exactly in integer Mann-Whitney units.
    """
    y = _as_binary(labels)
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if not (y.shape == a.shape == b.shape):
        raise StatsError(f"length mismatch: {y.size} labels, {a.size} and {b.size} scores")
    if not _both_classes(y):
        raise StatsError("permutation test needs both classes present")
    observed = abs(_auc_2u(y, a) - _auc_2u(y, b))
    if groups is None:
        unit_of = np.arange(len(y))
        m = len(y)
    else:
        keys = sorted(set(groups))
        pos = {g: i for i, g in enumerate(keys)}
        unit_of = np.array([pos[g] for g in groups])
        m = len(keys)
    rng = np.random.default_rng(cfg.seed)
    hits = 0
    for start in range(0, cfg.n_perm, _PERM_CHUNK):
        swap = rng.random((min(_PERM_CHUNK, cfg.n_perm - start), m)) < 0.5
        hits += _kernels.permutation_hits(y, a, b, swap, unit_of, observed)
    return (1 + hits) / (1 + cfg.n_perm)


# --- reports ------------------------------------------------------------------------------


@dataclass
class RunSummary:
    config: str
    auc: float
    ci_lo: float
    ci_hi: float
    n: int


@dataclass
class Comparison:
    a: str
    b: str
    delta_auc: float
    p: float
    significant: bool


@dataclass
class EvalReport:
    runs: list[RunSummary]
    comparisons: list[Comparison]
    alpha: float = 0.05
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "alpha": self.alpha,
            "meta": self.meta,
            "runs": [vars(r) for r in self.runs],
            "comparisons": [vars(c) for c in self.comparisons],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("format_version") != REPORT_FORMAT_VERSION:
            raise StatsError(f"unsupported report format_version {d.get('format_version')}")
        return cls([RunSummary(**r) for r in d["runs"]],
                   [Comparison(**c) for c in d["comparisons"]],
                   d.get("alpha", 0.05), dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    @classmethod
    def read(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def best(self) -> RunSummary:
        return max(self.runs, key=lambda r: r.auc)

    def table(self) -> str:
        best = self.best().config if self.runs else None
        lines = [f"{'config':<24} {'AUC':>7}  95% CI            n"]
        for r in self.runs:
            mark = " *" if r.config == best else ""
            lines.append(f"{r.config:<24} {100 * r.auc:7.2f}  ({100 * r.ci_lo:.2f}-"
                         f"{100 * r.ci_hi:.2f})  {r.n}{mark}")
        for c in self.comparisons:
            flag = "significant" if c.significant else "n.s."
            lines.append(f"{c.a} vs {c.b}: dAUC={100 * c.delta_auc:+.2f}  p={c.p:.4f}  {flag}")
        return "\n".join(lines)


def _arrays(records):
    return ([r.label for r in records], np.array([r.y for r in records]),
            [r.patient_id for r in records])


def align_runs(recs_a, recs_b):
    """Pair two runs' records by annotated region (tile ids differ only in their size)."""
    by_a = {r.region_id: r for r in recs_a}
    by_b = {r.region_id: r for r in recs_b}
    if set(by_a) != set(by_b):
        raise StatsError("runs cover different regions and cannot be paired")
    keys = sorted(by_a)
    for k in keys:
        if by_a[k].label != by_b[k].label:
            raise StatsError(f"region {k} has different labels in the two runs")
    return [by_a[k] for k in keys], [by_b[k] for k in keys]


def build_report(runs, comparisons, cfg: StatsConfig, meta: dict | None = None) -> EvalReport:
    """AUC and BCa CI per ``(config, records)`` run; permutation p per ``(a, b)`` pair."""
    by_name = {}
    summaries = []
    for name, records in runs:
        records = sorted(records, key=lambda r: r.region_id)
        by_name[name] = records
        labels, y, patients = _arrays(records)
        groups = patients if cfg.resample_unit == "patient" else None
        auc = auc_roc(labels, y)
        lo, hi = bca_ci(labels, y, cfg, groups=groups)
        summaries.append(RunSummary(name, auc, lo, hi, len(records)))
    comps = []
    for a, b in comparisons:
        if a not in by_name or b not in by_name:
            raise StatsError(f"comparison {a} vs {b} names an unknown run")
        ra, rb = align_runs(by_name[a], by_name[b])
        labels, ya, patients = _arrays(ra)
        yb = np.array([r.y for r in rb])
        groups = patients if cfg.resample_unit == "patient" else None
        p = permutation_test(labels, ya, yb, cfg, groups=groups)
        delta = auc_roc(labels, ya) - auc_roc(labels, yb)
        comps.append(Comparison(a, b, delta, p, bool(p < cfg.alpha)))
    return EvalReport(summaries, comps, cfg.alpha, dict(meta or {}))


# --- prediction files ---------------------------------------------------------------------


def predictions_to_csv(runs, preamble: str = "") -> tuple[str, str]:
    """Tile-level and crop-level CSV text for ``{config: [PredictionRecord]}``."""
    tiles, crops = io.StringIO(), io.StringIO()
    tiles.write(preamble)
    crops.write(preamble)
    tw = csv.writer(tiles, lineterminator="\n")
    cw = csv.writer(crops, lineterminator="\n")
    tw.writerow(PREDICTION_HEADER)
    cw.writerow(CROP_HEADER)
    for config in sorted(runs):
        for r in sorted(runs[config], key=lambda r: r.tile_id):
            tw.writerow([config, r.tile_id, r.patient_id, r.label, repr(float(r.y))])
            for i, sc in enumerate(r.crop_scores):
                cw.writerow([config, r.tile_id, i, repr(float(sc))])
    return tiles.getvalue(), crops.getvalue()


def write_predictions(runs, path, crop_path=None, preamble: str = "") -> None:
    tiles, crops = predictions_to_csv(runs, preamble)
    atomic_write_text(path, tiles)
    if crop_path is not None:
        atomic_write_text(crop_path, crops)


def read_predictions(path, crop_path=None) -> dict:
    crop_scores: dict = defaultdict(list)
    if crop_path is not None:
        for row in read_csv_rows(crop_path, CROP_HEADER):
            crop_scores[(row["config"], row["tile_id"])].append(
                (int(row["crop_index"]), float(row["score"])))
    runs: dict = defaultdict(list)
    for row in read_csv_rows(path, PREDICTION_HEADER):
        key = (row["config"], row["tile_id"])
        y = float(row["y"])
        scores = [s for _, s in sorted(crop_scores[key])] if key in crop_scores else [y]
        runs[row["config"]].append(
            PredictionRecord(row["tile_id"], row["patient_id"], row["label"], scores, y))
    return dict(runs)
