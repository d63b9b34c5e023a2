"""Experiment configuration: a single INI file with the sections below; CLI flags override it.

::

    [experiment]
    seed = 42
    runs = 4000/2000/456, 2000/456/456, 8000/224/224   ; tile/intermediate/input
    ; or a grid instead of runs:
    ; tile_sizes = 2000, 4000, 8000
    ; intermediate_sizes = 456, 1000, 2000
    ; input_resolution = 456
    comparisons = t4000-i2000-r456 : t2000-i456-r456
    crops_per_tile = 1          ; random training crops per tile per epoch
    pad_value = 255
    cohort =                    ; existing cohort CSV; empty -> synthesise one

    [folds]
    k = 10
    test_quota = CMB:5, DN:2    ; or "auto"
    val_quota = CMB:5, DN:2

    [train]
    epochs = 300
    batch_size = 15
    learning_rate = 0.05

    [augment]
    enabled = true
    brightness = 0.8, 1.2
    contrast = 0.8, 1.2
    saturation = 0.8, 1.2
    hue_shift = -18, 18
    flip_h = 0.5
    flip_v = 0.5

    [stats]
    n_ci = 10000
    n_perm = 10000
    alpha = 0.05
    resample_unit = tile

    [synth]
    n_cmb = 103
    n_dn = 58
    wsi_size = 10000
    ; ... any SynthParams field

All randomness derives from ``[experiment] seed``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from multiscale_wsi.classifier import TrainConfig
from multiscale_wsi.crops import AugmentParams
from multiscale_wsi.io_utils import canonical_json, stable_hash
from multiscale_wsi.stats import StatsConfig
from multiscale_wsi.synth import SynthParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class RunSpec:
    tile_size: int
    intermediate_size: int
    input_size: int

    @property
    def name(self) -> str:
        return f"t{self.tile_size}-i{self.intermediate_size}-r{self.input_size}"

    @classmethod
    def parse(cls, text: str) -> "RunSpec":
        try:
            t, i, r = (int(v) for v in text.strip().split("/"))
        except ValueError:
            raise ConfigError(f"run must look like tile/intermediate/input, got {text!r}") from None
        return cls(t, i, r)

    def validate(self) -> None:
        if min(self.tile_size, self.intermediate_size, self.input_size) < 1:
            raise ConfigError(f"{self.name}: sizes must be positive")
        if self.intermediate_size > self.tile_size:
            raise ConfigError(f"{self.name}: intermediate size exceeds tile size")
        if self.input_size > self.intermediate_size:
            raise ConfigError(f"{self.name}: input resolution exceeds intermediate size")


@dataclass(frozen=True)
class ExperimentConfig:
    runs: tuple[RunSpec, ...]
    comparisons: tuple[tuple[str, str], ...] = ()
    seed: int = 0
    crops_per_tile: int = 1
    pad_value: int = 255
    cohort: str | None = None
    k: int = 10
    test_quota: dict | None = None
    val_quota: dict | None = None
    epochs: int = 300
    batch_size: int = 15
    learning_rate: float = 0.05
    augment: AugmentParams | None = field(default_factory=AugmentParams)
    n_ci: int = 10000
    n_perm: int = 10000
    alpha: float = 0.05
    resample_unit: str = "tile"
    n_cmb: int = 103
    n_dn: int = 58
    synth: SynthParams = field(default_factory=SynthParams)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.runs:
            raise ConfigError("no runs configured")
        for run in self.runs:
            run.validate()
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate runs")
        for a, b in self.comparisons:
            for n in (a, b):
                if n not in names:
                    raise ConfigError(f"comparison names unknown run {n!r}; known: {names}")
        if self.crops_per_tile < 1:
            raise ConfigError("crops_per_tile must be >= 1")
        if not 0 <= self.pad_value <= 255:
            raise ConfigError("pad_value must be in [0, 255]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.n_cmb < 1 or self.n_dn < 1:
            raise ConfigError("synthetic cohort needs at least one patient per class")
        max_tile = max(r.tile_size for r in self.runs)
        if self.cohort is None and self.synth.wsi_size < max_tile // 2:
            raise ConfigError("synthetic wsi_size too small for the largest tile")
        try:
            self.train_config()
            self.stats_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def tile_sizes(self) -> list[int]:
        return sorted({r.tile_size for r in self.runs})

    def train_config(self, salt=()) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate,
                           stable_hash(self.seed, "train", *salt))

    def stats_config(self) -> StatsConfig:
        return StatsConfig(self.n_ci, self.n_perm, self.alpha,
                           stable_hash(self.seed, "stats") % (1 << 63), self.resample_unit)

    @property
    def synth_seed(self) -> int:
        return stable_hash(self.seed, "synth")

    @property
    def fold_seed(self) -> int:
        return stable_hash(self.seed, "folds")

    @property
    def crop_base_seed(self) -> int:
        return stable_hash(self.seed, "crops")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["runs"] = [r.name for r in self.runs]
        d["comparisons"] = [list(c) for c in self.comparisons]
        d.pop("cohort")
        return d

    def hash(self) -> str:
        """Digest of every setting that can change results (paths excluded)."""
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _pair(text: str) -> tuple[float, float]:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise ConfigError(f"expected an interval 'lo, hi', got {text!r}")
    return vals[0], vals[1]


def _quota(text: str | None):
    if text is None or text.strip().lower() in ("", "auto"):
        return None
    out = {}
    for part in text.split(","):
        label, _, n = part.partition(":")
        if not n:
            raise ConfigError(f"quota must look like 'CMB:5, DN:2', got {text!r}")
        out[label.strip()] = int(n)
    return out


def grid_runs(tile_sizes, intermediate_sizes, input_resolution) -> tuple[RunSpec, ...]:
    """Every (tile, intermediate) pair with ``input <= intermediate <= tile``."""
    return tuple(RunSpec(t, i, input_resolution) for t in sorted(tile_sizes)
                 for i in sorted(intermediate_sizes) if input_resolution <= i <= t)


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    known = {"experiment", "folds", "train", "augment", "stats", "synth"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    get = lambda sec, key, fallback=None: cp.get(sec, key, fallback=fallback) if cp.has_section(sec) else fallback
    try:
        kw: dict = {}
        runs_text = get("experiment", "runs")
        if runs_text:
            kw["runs"] = tuple(RunSpec.parse(t) for t in runs_text.split(","))
        else:
            tiles = _ints(get("experiment", "tile_sizes", "2000, 4000, 8000"))
            inters = _ints(get("experiment", "intermediate_sizes", "456, 1000, 2000"))
            res = int(get("experiment", "input_resolution", "456"))
            kw["runs"] = grid_runs(tiles, inters, res)
        comps = get("experiment", "comparisons", "")
        kw["comparisons"] = tuple(
            tuple(s.strip() for s in c.split(":")) for c in comps.split(",") if c.strip())
        if any(len(c) != 2 for c in kw["comparisons"]):
            raise ConfigError("comparisons must look like 'runA : runB, runC : runD'")
        for key, conv in (("seed", int), ("crops_per_tile", int), ("pad_value", int)):
            v = get("experiment", key)
            if v is not None:
                kw[key] = conv(v)
        cohort = get("experiment", "cohort")
        if cohort:
            p = Path(cohort)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            kw["cohort"] = str(p)
        if get("folds", "k") is not None:
            kw["k"] = int(get("folds", "k"))
        kw["test_quota"] = _quota(get("folds", "test_quota"))
        kw["val_quota"] = _quota(get("folds", "val_quota"))
        for key, conv in (("epochs", int), ("batch_size", int), ("learning_rate", float)):
            if get("train", key) is not None:
                kw[key] = conv(get("train", key))
        if cp.has_section("augment") and not cp.getboolean("augment", "enabled", fallback=True):
            kw["augment"] = None
        else:
            d = AugmentParams()
            kw["augment"] = AugmentParams(
                _pair(get("augment", "brightness", "%r, %r" % d.brightness_range)),
                _pair(get("augment", "contrast", "%r, %r" % d.contrast_range)),
                _pair(get("augment", "saturation", "%r, %r" % d.saturation_range)),
                _pair(get("augment", "hue_shift", "%r, %r" % d.hue_shift_range)),
                float(get("augment", "flip_h", d.flip_h_prob)),
                float(get("augment", "flip_v", d.flip_v_prob)),
            )
        for key, conv in (("n_ci", int), ("n_perm", int), ("alpha", float),
                          ("resample_unit", str)):
            if get("stats", key) is not None:
                kw[key] = conv(get("stats", key))
        synth_kw = {}
        if cp.has_section("synth"):
            for key in ("n_cmb", "n_dn"):
                if cp.has_option("synth", key):
                    kw[key] = cp.getint("synth", key)
            types = {f.name: f.type for f in fields(SynthParams)}
            for key, val in cp.items("synth"):
                if key in ("n_cmb", "n_dn"):
                    continue
                if key not in types:
                    raise ConfigError(f"unknown synth parameter {key!r}")
                if key in ("nodule_radius_range",):
                    synth_kw[key] = _pair(val)
                elif key == "base_color":
                    synth_kw[key] = tuple(_ints(val))
                elif key in ("wsi_size", "fine_texture_scale", "stain_scale", "seed"):
                    synth_kw[key] = int(val)
                else:
                    synth_kw[key] = float(val)
        kw["synth"] = SynthParams(**synth_kw)
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)
