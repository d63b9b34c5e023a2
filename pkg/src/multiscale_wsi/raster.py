"""8-bit RGB rasters, PNG I/O and exact area-filter downsampling."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin, UnidentifiedImageError

from multiscale_wsi import _kernels


class RasterError(Exception):
    """Base class for raster failures."""


class RasterNotFoundError(RasterError, FileNotFoundError):
    pass


class UnsupportedRasterError(RasterError):
    """File decodes but is not 8-bit RGB or convertible to it."""


class CorruptRasterError(RasterError):
    pass


class RasterWriteError(RasterError, OSError):
    pass


@dataclass(frozen=True, eq=False)
class Raster:
    """Immutable 8-bit, 3-channel image stored row-major as ``(height, width, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            raise ValueError(f"raster samples must be uint8, got {data.dtype}")
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"raster must have shape (h, w, 3), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("raster must be at least 1x1")
        if data.flags.writeable:
            # ownership passes to the raster; the read-only view guards against accidents
            data = data.view()
            data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @classmethod
    def constant(cls, width: int, height: int, value=0) -> "Raster":
        data = np.empty((height, width, 3), dtype=np.uint8)
        data[...] = value
        return cls(data)

    def crop(self, x: int, y: int, width: int, height: int) -> "Raster":
        if x < 0 or y < 0 or x + width > self.width or y + height > self.height:
            raise ValueError(
                f"crop {width}x{height}@({x},{y}) exceeds raster {self.width}x{self.height}"
            )
        return Raster(np.ascontiguousarray(self.data[y:y + height, x:x + width]))

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Raster({self.width}x{self.height})"


_CONVERTIBLE_MODES = {"RGB", "L", "P", "1"}


def load_raster(path) -> Raster:
    """Read a PNG as an RGB raster. Grayscale and palette images are expanded to RGB."""
    path = Path(path)
    if not path.is_file():
        raise RasterNotFoundError(f"no such raster file: {path}")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise UnsupportedRasterError(f"{path}: format {im.format} is not PNG")
            if im.mode not in _CONVERTIBLE_MODES:
                raise UnsupportedRasterError(f"{path}: mode {im.mode} is not 8-bit RGB-convertible")
            if im.mode == "P" and "transparency" in im.info:
                raise UnsupportedRasterError(f"{path}: palette with transparency")
            im.load()
            if im.mode != "RGB":
                im = im.convert("L").convert("RGB") if im.mode == "1" else im.convert("RGB")
            data = np.asarray(im, dtype=np.uint8)
    except RasterError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise CorruptRasterError(f"{path}: cannot decode ({exc})") from exc
    return Raster(np.array(data, copy=True))


def save_raster(r: Raster, path, *, text: dict | None = None, compress_level: int = 1) -> None:
    """Write ``r`` losslessly as PNG. The file appears atomically or not at all.

    ``text`` entries are stored as PNG tEXt chunks (used to stamp provenance).
    """
    path = Path(path)
    info = None
    if text:
        info = PngImagePlugin.PngInfo()
        for key in sorted(text):
            info.add_text(str(key), str(text[key]))
    tmp = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".png", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            Image.fromarray(np.asarray(r.data), mode="RGB").save(
                fh, format="PNG", pnginfo=info, compress_level=compress_level
            )
        os.replace(tmp, path)
        tmp = None
    except OSError as exc:
        raise RasterWriteError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)


def _overlaps(src: int, dst: int):
    """Per source pixel: first output index and weight, second output index and weight."""
    j = np.arange(src, dtype=np.int64)
    lo = j * dst
    hi = lo + dst
    i0 = lo // src
    i1 = (hi - 1) // src
    w0 = np.minimum((i0 + 1) * src, hi) - lo
    w1 = np.where(i1 != i0, hi - i1 * src, 0)
    return i0, w0, i1, w1


def area_weights(src: int, dst: int) -> np.ndarray:
    """Integer overlap weights of a ``src -> dst`` box filter as a dense ``(dst, src)`` matrix.

    Source pixel ``j`` covers ``[j*dst, (j+1)*dst)`` and output pixel ``i`` covers
    ``[i*src, (i+1)*src)`` on a common integer axis; the weight is their overlap, so
    every row sums to ``src``.
    """
    if not 1 <= dst <= src:
        raise ValueError(f"need 1 <= dst <= src, got src={src}, dst={dst}")
    i0, w0, i1, w1 = _overlaps(src, dst)
    m = np.zeros((dst, src), dtype=np.int64)
    j = np.arange(src)
    m[i0, j] += w0
    m[i1, j] += w1
    return m


def downsample(r: Raster, target_w: int, target_h: int) -> Raster:
    """Box-filter ``r`` to ``target_w x target_h``.

    Each output sample is the area-weighted mean of its source footprint, rounded half
    up. Weighted sums are exact integers, so the result is platform independent.
    """
    h, w = r.height, r.width
    if not (1 <= target_w <= w and 1 <= target_h <= h):
        raise ValueError(
            f"downsample target {target_w}x{target_h} must be within 1..{w}x{h} (no upsampling)"
        )
    if (target_w, target_h) == (w, h):
        return r
    rows = _kernels.box_rows(r.data, *_overlaps(h, target_h), target_h)
    return Raster(_kernels.box_cols_round(rows, *_overlaps(w, target_w), target_w, h * w))
