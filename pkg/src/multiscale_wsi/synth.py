"""Synthetic H&E-like slides whose class signal lives at a coarse spatial scale.

A slide is a procedural field evaluated per pixel::

    T(x, y) = fine(x, y) + stain(x, y) - contrast * nodules(x, y)
    q = clip(floor(16 T + 0.5), -4096, 4095) / 16          (T quantised to 1/16 gray)
    channel_c = clip(floor(base_c + gain_c * q + 0.5), 0, 255)

``fine`` and ``stain`` are value noise: standard-normal lattice values (scaled by
``noise_std`` / ``stain_std``) on a square lattice of spacing ``fine_texture_scale`` /
``stain_scale`` pixels, interpolated with the smoothstep fade ``3t^2 - 2t^3`` separably
(along x, then y). Lattice point ``(i, j)`` sits at pixel ``(j * spacing, i * spacing)``.
Reference values for lattice ``[[0, 1, 5], [2, 3, -1], [4, 0, 2]]`` with spacing 4::

    (x, y) = (0, 0) -> 0.0     (2, 1) -> 0.8125     (4, 4) -> 3.0     (5, 6) -> 1.34375

Lattices are drawn as ``default_rng(s).standard_normal((m, m)) * amplitude`` with
``m = wsi_size // spacing + 2`` and ``s`` derived from the slide seed.

``nodules`` is 0 everywhere for CMB-like slides. DN-like slides draw a Poisson number of
disks (mean ``nodule_density * area_in_Mpx``) with uniform centers and uniform radii; each
disk is 1 inside ``r - edge/2``, 0 outside ``r + edge/2`` with a raised-cosine rim in
between, and overlapping disks combine by maximum.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from multiscale_wsi import _kernels
from multiscale_wsi.cohort import CLASSES, Annotation, PatientRecord, write_cohort
from multiscale_wsi.io_utils import stable_hash
from multiscale_wsi.raster import Raster, save_raster
from multiscale_wsi.tiler import TileRecord, tile_origin

CHANNEL_GAIN = (0.8, 1.2, 0.9)
ANNOTATION_TILE = 2000
_BLOCK_ROWS = 512


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthParams:
    wsi_size: int = 10000
    nodule_density: float = 0.25
    nodule_radius_range: tuple[float, float] = (150.0, 400.0)
    nodule_contrast: float = 25.0
    nodule_edge: float = 24.0
    fine_texture_scale: int = 6
    noise_std: float = 12.0
    stain_scale: int = 800
    stain_std: float = 10.0
    base_color: tuple[int, int, int] = (225, 180, 200)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.nodule_radius_range
        problems = []
        if self.wsi_size < 1:
            problems.append("wsi_size must be >= 1")
        if not 0 < lo <= hi:
            problems.append("nodule radii must be positive with lo <= hi")
        if self.nodule_density < 0:
            problems.append("nodule_density must be >= 0")
        if self.nodule_contrast < 0:
            problems.append("nodule_contrast must be >= 0")
        if self.nodule_edge < 0:
            problems.append("nodule_edge must be >= 0")
        if self.fine_texture_scale < 1 or self.stain_scale < 1:
            problems.append("noise lattice spacings must be >= 1")
        if self.noise_std < 0 or self.stain_std < 0:
            problems.append("noise amplitudes must be >= 0")
        if len(self.base_color) != 3 or not all(0 <= c <= 255 for c in self.base_color):
            problems.append("base_color must be an RGB triple in [0, 255]")
        if problems:
            raise SynthError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


def fade(t):
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class ValueNoise:
    lattice: np.ndarray  # (rows, cols) float64, already scaled by the amplitude
    spacing: int

    @classmethod
    def create(cls, size: int, spacing: int, amplitude: float, seed: int) -> "ValueNoise":
        m = size // spacing + 2
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((m, m)) * amplitude, spacing)

    def render(self, x0: int, y0: int, width: int, height: int) -> np.ndarray:
        return _kernels.value_noise_block(self.lattice, self.spacing, x0, y0, width, height)


@dataclass(frozen=True)
class SyntheticSlide:
    label: str
    params: SynthParams
    seed: int
    nodules: np.ndarray  # (n, 3): cx, cy, radius
    center: tuple[int, int]
    fine: ValueNoise
    stain: ValueNoise

    @property
    def size(self) -> int:
        return self.params.wsi_size

    def _nodule_field(self, x0, y0, width, height) -> np.ndarray:
        out = np.zeros((height, width))
        edge = self.params.nodule_edge
        for cx, cy, r in self.nodules:
            reach = r + edge / 2
            bx0, bx1 = max(int(math.floor(cx - reach)), x0), min(int(math.ceil(cx + reach)) + 1,
                                                                x0 + width)
            by0, by1 = max(int(math.floor(cy - reach)), y0), min(int(math.ceil(cy + reach)) + 1,
                                                                y0 + height)
            if bx0 >= bx1 or by0 >= by1:
                continue
            dx = np.arange(bx0, bx1) - cx
            dy = np.arange(by0, by1) - cy
            dist = np.sqrt(dy[:, None] ** 2 + dx[None, :] ** 2)
            if edge > 0:
                t = np.clip((dist - (r - edge / 2)) / edge, 0.0, 1.0)
                prof = 0.5 + 0.5 * np.cos(np.pi * t)
            else:
                prof = (dist <= r).astype(np.float64)
            sub = out[by0 - y0:by1 - y0, bx0 - x0:bx1 - x0]
            np.maximum(sub, prof, out=sub)
        return out

    def _lut(self) -> np.ndarray:
        levels = np.arange(-4096, 4096) / 16.0
        return np.stack([np.clip(np.floor(b + g * levels + 0.5), 0, 255)
                         for b, g in zip(self.params.base_color, CHANNEL_GAIN)],
                        axis=1).astype(np.uint8)

    def render(self, x0: int, y0: int, width: int, height: int) -> Raster:
        """Pixels of the in-bounds window ``[x0, x0 + width) x [y0, y0 + height)``."""
        if x0 < 0 or y0 < 0 or x0 + width > self.size or y0 + height > self.size:
            raise SynthError("render window exceeds the slide")
        lut = self._lut()
        out = np.empty((height, width, 3), dtype=np.uint8)
        contrast = float(self.params.nodule_contrast)
        use_nodules = len(self.nodules) > 0 and contrast > 0
        empty = np.zeros((0, 0))
        for r0 in range(0, height, _BLOCK_ROWS):
            r1 = min(r0 + _BLOCK_ROWS, height)
            nod = self._nodule_field(x0, y0 + r0, width, r1 - r0) if use_nodules else empty
            _kernels.compose_block(out[r0:r1], self.fine.lattice, self.fine.spacing,
                                   self.stain.lattice, self.stain.spacing, nod, contrast,
                                   x0, y0 + r0, lut)
        return Raster(out)

    def render_full(self) -> Raster:
        return self.render(0, 0, self.size, self.size)

    def render_tile(self, center, size: int, pad_value: int = 255, *, tile_id: str = "",
                    patient_id: str = "") -> TileRecord:
        """Same pixels as ``extract_centered(render_full(), ...)`` without rendering the rest."""
        x0, y0 = tile_origin(center, size)
        sx0, sy0 = max(x0, 0), max(y0, 0)
        sx1, sy1 = min(x0 + size, self.size), min(y0 + size, self.size)
        out = np.full((size, size, 3), pad_value, dtype=np.uint8)
        inside = max(sx1 - sx0, 0) * max(sy1 - sy0, 0)
        if inside:
            out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = self.render(
                sx0, sy0, sx1 - sx0, sy1 - sy0).data
        cx, cy = center
        return TileRecord(tile_id, patient_id, self.label, (int(cx), int(cy)), size,
                          1.0 - inside / (size * size), Raster(out))


def make_slide(label: str, p: SynthParams, seed: int) -> SyntheticSlide:
    if label not in CLASSES:
        raise SynthError(f"unknown label {label!r}")
    n = p.wsi_size
    fine = ValueNoise.create(n, p.fine_texture_scale, p.noise_std, stable_hash(seed, "fine"))
    stain = ValueNoise.create(n, p.stain_scale, p.stain_std, stable_hash(seed, "stain"))
    nodules = np.empty((0, 3))
    if label == "DN":
        rng = np.random.default_rng(stable_hash(seed, "nodules"))
        count = rng.poisson(p.nodule_density * n * n / 1e6)
        lo, hi = p.nodule_radius_range
        nodules = np.column_stack([rng.uniform(0, n, count), rng.uniform(0, n, count),
                                   rng.uniform(lo, hi, count)])
    half = min(ANNOTATION_TILE, n) // 2
    lo_c, hi_c = max(n // 4, half), min(3 * n // 4, n - half)
    if hi_c < lo_c:
        lo_c = hi_c = n // 2
    crng = np.random.default_rng(stable_hash(seed, "center"))
    center = (int(crng.integers(lo_c, hi_c + 1)), int(crng.integers(lo_c, hi_c + 1)))
    return SyntheticSlide(label, p, seed, nodules, center, fine, stain)


def generate_patient(label: str, p: SynthParams, seed: int):
    """Full slide raster and its annotation center."""
    slide = make_slide(label, p, seed)
    return slide.render_full(), slide.center


def patient_seed(seed: int, index: int) -> int:
    return stable_hash(seed, "patient", index)


def cohort_layout(n_cmb: int, n_dn: int, seed: int):
    """``(patient_id, label, seed)`` for every synthetic patient, CMB-like first."""
    if n_cmb < 1 or n_dn < 1:
        raise SynthError("need at least one patient per class")
    labels = ["CMB"] * n_cmb + ["DN"] * n_dn
    width = max(3, len(str(len(labels) - 1)))
    return [(f"S{i:0{width}d}", lab, patient_seed(seed, i)) for i, lab in enumerate(labels)]


def _write_patient(args):
    pid, label, pseed, params, out_dir, text = args
    slide = make_slide(label, params, pseed)
    path = Path(out_dir) / f"{pid}.png"
    save_raster(slide.render_full(), path, text=text)
    return PatientRecord(pid, label, (Annotation(str(path.resolve()), slide.center),))


def generate_cohort(n_cmb: int, n_dn: int, p: SynthParams, seed: int, out_dir, *,
                    jobs: int = 1, cohort_name: str = "cohort.csv", text: dict | None = None,
                    preamble: str = "") -> Path:
    """Write one PNG per synthetic patient and the cohort CSV; returns the CSV path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = [(pid, lab, s, p, str(out_dir), text) for pid, lab, s in cohort_layout(n_cmb, n_dn, seed)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            patients = list(ex.map(_write_patient, work))
    else:
        patients = [_write_patient(w) for w in work]
    path = out_dir / cohort_name
    write_cohort(patients, path, preamble)
    return path
