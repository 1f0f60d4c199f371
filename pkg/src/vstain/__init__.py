"""Cross-site virtual staining / destaining pipeline toolkit."""

from .errors import VStainError
from .ingest import CoreImage, RasterSource, RoiPolygon, StainState

__version__ = "0.1.0"
