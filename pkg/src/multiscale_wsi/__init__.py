"""Multi-scale tile extraction, cropping and evaluation for high-resolution pathology images."""

from multiscale_wsi.raster import Raster, downsample, load_raster, save_raster

__all__ = ["Raster", "downsample", "load_raster", "save_raster"]
__version__ = "0.1.0"
