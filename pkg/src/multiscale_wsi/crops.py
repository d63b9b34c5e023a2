"""Training crops, ordered evaluation crop grids and crop augmentation.

Colour jitter works in the hexcone HSV model on the [0, 255] scale: H in degrees [0, 360),
S in [0, 1], V = max(R, G, B). Reference values (R, G, B) -> (H, S, V)::

    (255, 0, 0)     -> (0, 1, 255)        (0, 128, 0)     -> (120, 1, 128)
    (255, 255, 0)   -> (60, 1, 255)       (0, 0, 255)     -> (240, 1, 255)
    (200, 100, 150) -> (330, 0.5, 200)    (90, 90, 90)    -> (0, 0, 90)
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from multiscale_wsi import _kernels
from multiscale_wsi.io_utils import stable_hash
from multiscale_wsi.raster import Raster


class CropError(ValueError):
    pass


def crop_seed(base_seed: int, tile_id: str, crop_index: int) -> int:
    """Per-crop seed; independent of how crops are scheduled across workers."""
    return stable_hash(int(base_seed), str(tile_id), int(crop_index))


@dataclass(frozen=True)
class CropPlan:
    mode: Literal["random", "ordered"]
    positions: tuple[tuple[int, int], ...] = ()
    n: int = 0
    seed: int | None = None
    crop_size: int = 0

    def to_csv_rows(self, tile_id: str):
        return [(tile_id, i, x, y) for i, (x, y) in enumerate(self.positions)]


def _square(res) -> tuple[int, int]:
    if isinstance(res, (tuple, list)):
        h, w = res
        return int(h), int(w)
    return int(res), int(res)


def axis_origins(length: int, crop: int) -> list[int]:
    """Minimal edge-aligned set of crop origins covering ``[0, length)``.

    ``g = ceil(length / crop)`` origins spaced by the real stride ``(length - crop) / (g - 1)``,
    each rounded to the nearest integer (halves up).
    """
    if not 1 <= crop <= length:
        raise CropError(f"crop {crop} does not fit in {length}")
    g = -(-length // crop)
    if g == 1:
        return [0]
    span = length - crop
    return [(2 * k * span + (g - 1)) // (2 * (g - 1)) for k in range(g)]


def ordered_crop_grid(tile_size, res) -> CropPlan:
    """Row-major grid of crop origins ``(x, y)`` that covers every pixel of the tile."""
    th, tw = _square(tile_size)
    h, w = _square(res)
    if h > th or w > tw:
        raise CropError(f"input resolution {w}x{h} exceeds intermediate tile {tw}x{th}")
    xs, ys = axis_origins(tw, w), axis_origins(th, h)
    positions = tuple((x, y) for y in ys for x in xs)
    return CropPlan("ordered", positions, len(positions), None, h)


def random_crop_origin(tile_w: int, tile_h: int, res, seed: int) -> tuple[int, int]:
    h, w = _square(res)
    if h > tile_h or w > tile_w:
        raise CropError(f"input resolution {w}x{h} exceeds tile {tile_w}x{tile_h}")
    rng = np.random.default_rng(seed)
    x = int(rng.integers(0, tile_w - w + 1))
    y = int(rng.integers(0, tile_h - h + 1))
    return x, y


def random_crop(tile, res, seed: int) -> Raster:
    """Uniformly placed crop; ``tile`` may be an IntermediateTile or a Raster."""
    pixels = getattr(tile, "pixels", tile)
    h, w = _square(res)
    x, y = random_crop_origin(pixels.width, pixels.height, (h, w), seed)
    return pixels.crop(x, y, w, h)


def ordered_crops(tile, res) -> list[Raster]:
    pixels = getattr(tile, "pixels", tile)
    h, w = _square(res)
    plan = ordered_crop_grid((pixels.height, pixels.width), (h, w))
    return [pixels.crop(x, y, w, h) for x, y in plan.positions]


def plans_to_csv(plans: dict) -> str:
    """Audit CSV ``tile_id,crop_index,x,y`` for ``{tile_id: CropPlan}``."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["tile_id", "crop_index", "x", "y"])
    for tile_id in sorted(plans):
        wr.writerows(plans[tile_id].to_csv_rows(tile_id))
    return buf.getvalue()


# --- augmentation -------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    brightness_range: tuple[float, float] = (0.8, 1.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    saturation_range: tuple[float, float] = (0.8, 1.2)
    hue_shift_range: tuple[float, float] = (-18.0, 18.0)
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range", "saturation_range", "hue_shift_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} {lo, hi} must satisfy lo <= hi")
            if name != "hue_shift_range" and lo < 0:
                raise ValueError(f"{name} factors must be >= 0")
        for name in ("flip_h_prob", "flip_v_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0), 0.0, 0.0)


@dataclass(frozen=True)
class AugmentDraw:
    flip_h: bool
    flip_v: bool
    brightness: float
    contrast: float
    saturation: float
    hue_shift: float = field(default=0.0)


def draw_augment(p: AugmentParams, seed: int) -> AugmentDraw:
    # all six values are always drawn so the stream layout never depends on the params
    rng = np.random.default_rng(seed)
    u = rng.random(6)

    def lerp(rng_, t):
        lo, hi = rng_
        return lo + (hi - lo) * t

    return AugmentDraw(
        bool(u[0] < p.flip_h_prob), bool(u[1] < p.flip_v_prob),
        lerp(p.brightness_range, u[2]), lerp(p.contrast_range, u[3]),
        lerp(p.saturation_range, u[4]), lerp(p.hue_shift_range, u[5]),
    )


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone model: H in degrees [0, 360), S in [0, 1], V on the input's [0, 255] scale."""
    rgb = np.ascontiguousarray(rgb, dtype=np.float64)
    return _kernels.rgb_to_hsv_array(rgb)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.ascontiguousarray(hsv, dtype=np.float64)
    return _kernels.hsv_to_rgb_array(hsv)


def apply_augment(crop: Raster, d: AugmentDraw) -> Raster:
    """Flip h, flip v, brightness, contrast, saturation, hue; identity steps are skipped exactly.

    Contrast scales around the mean luminance ``0.299 R + 0.587 G + 0.114 B``. Values are
    clamped to [0, 255] after each photometric step and rounded half up at the end.
    """
    data = crop.data
    if d.flip_h:
        data = data[:, ::-1]
    if d.flip_v:
        data = data[::-1, :]
    data = np.ascontiguousarray(data)
    if d.brightness == 1.0 and d.contrast == 1.0 and d.saturation == 1.0 and d.hue_shift == 0.0:
        return Raster(data)
    return Raster(_kernels.photometric(data, float(d.brightness), float(d.contrast),
                                       float(d.saturation), float(d.hue_shift)))


def augment(crop: Raster, p: AugmentParams, seed: int) -> Raster:
    return apply_augment(crop, draw_augment(p, seed))
