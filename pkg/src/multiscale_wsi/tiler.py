"""Concentric multi-scale tiles around annotated centers, and their intermediate-resolution forms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from multiscale_wsi.io_utils import atomic_write_text, read_csv_rows
from multiscale_wsi.raster import Raster, downsample

MANIFEST_HEADER = ("tile_id", "patient_id", "label", "center_x", "center_y", "tile_size",
                   "pad_fraction", "path")
INTERMEDIATE_HEADER = ("tile_id", "intermediate_size", "path")


class TilingError(ValueError):
    pass


def tile_id_for(region_id: str, size: int) -> str:
    """Tiles of one annotated region share ``region_id`` and differ in the ``@size`` suffix."""
    return f"{region_id}@{size}"


def region_of(tile_id: str) -> str:
    return tile_id.rsplit("@", 1)[0]


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    patient_id: str
    label: str
    center: tuple[int, int]
    tile_size: int
    pad_fraction: float
    pixels: Raster = field(repr=False)

    @property
    def origin(self) -> tuple[int, int]:
        return tile_origin(self.center, self.tile_size)


@dataclass(frozen=True)
class IntermediateTile:
    tile_id: str
    intermediate_size: int
    pixels: Raster = field(repr=False)


def tile_origin(center, size: int) -> tuple[int, int]:
    cx, cy = center
    return cx - size // 2, cy - size // 2


def window(source: Raster, x0: int, y0: int, width: int, height: int, pad_value: int = 255):
    """Copy an axis-aligned window out of ``source``; out-of-bounds samples get ``pad_value``.

    Returns the window and the number of in-bounds pixels.
    """
    out = np.full((height, width, 3), pad_value, dtype=np.uint8)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + width, source.width), min(y0 + height, source.height)
    inside = max(sx1 - sx0, 0) * max(sy1 - sy0, 0)
    if inside:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = source.data[sy0:sy1, sx0:sx1]
    return Raster(out), inside


def extract_centered(source: Raster, center, size: int, pad_value: int = 255, *,
                     tile_id: str = "", patient_id: str = "", label: str = "") -> TileRecord:
    """Cut a ``size x size`` tile whose origin is ``center - size // 2`` on both axes."""
    if size < 1:
        raise TilingError(f"tile size must be >= 1, got {size}")
    cx, cy = int(center[0]), int(center[1])
    if not (0 <= cx < source.width and 0 <= cy < source.height):
        raise TilingError(f"center ({cx},{cy}) outside source {source.width}x{source.height}")
    x0, y0 = tile_origin((cx, cy), size)
    pixels, inside = window(source, x0, y0, size, size, pad_value)
    pad = 1.0 - inside / (size * size)
    return TileRecord(tile_id, patient_id, label, (cx, cy), size, pad, pixels)


def build_multiscale_set(source: Raster, center, sizes, pad_value: int = 255, *,
                         region_id: str = "", patient_id: str = "", label: str = ""):
    """One tile per entry of ``sizes`` (ascending), all centered on ``center``."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise TilingError(f"tile sizes must be ascending, got {sizes}")
    return [
        extract_centered(source, center, s, pad_value, tile_id=tile_id_for(region_id, s),
                         patient_id=patient_id, label=label)
        for s in sizes
    ]


def make_intermediate(tile: TileRecord, size: int) -> IntermediateTile:
    if size > tile.tile_size:
        raise TilingError(f"intermediate size {size} exceeds tile size {tile.tile_size}")
    return IntermediateTile(tile.tile_id, size, downsample(tile.pixels, size, size))


@dataclass(frozen=True)
class ManifestRow:
    tile_id: str
    patient_id: str
    label: str
    center_x: int
    center_y: int
    tile_size: int
    pad_fraction: float
    path: str

    @classmethod
    def from_record(cls, rec: TileRecord, path: str) -> "ManifestRow":
        return cls(rec.tile_id, rec.patient_id, rec.label, rec.center[0], rec.center[1],
                   rec.tile_size, rec.pad_fraction, path)


@dataclass
class TileManifest:
    rows: list[ManifestRow]
    root: Path = Path(".")

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.tile_id)
        ids = [r.tile_id for r in self.rows]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise TilingError(f"duplicate tile ids in manifest: {dupes[:5]}")

    def resolve(self, row: ManifestRow) -> Path:
        return (Path(self.root) / row.path).resolve()

    def validate(self) -> None:
        missing = [r.path for r in self.rows if not self.resolve(r).is_file()]
        if missing:
            raise TilingError(f"manifest references missing files: {missing[:5]}")

    def to_csv(self, preamble: str = "") -> str:
        buf = io.StringIO()
        buf.write(preamble)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.rows:
            w.writerow([r.tile_id, r.patient_id, r.label, r.center_x, r.center_y, r.tile_size,
                        repr(float(r.pad_fraction)), r.path])
        return buf.getvalue()

    def write(self, path, preamble: str = "") -> None:
        atomic_write_text(path, self.to_csv(preamble))

    @classmethod
    def read(cls, path) -> "TileManifest":
        path = Path(path)
        rows = [
            ManifestRow(d["tile_id"], d["patient_id"], d["label"], int(d["center_x"]),
                        int(d["center_y"]), int(d["tile_size"]), float(d["pad_fraction"]),
                        d["path"])
            for d in read_csv_rows(path, MANIFEST_HEADER)
        ]
        return cls(rows, path.parent)
