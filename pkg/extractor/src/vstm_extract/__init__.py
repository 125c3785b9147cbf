"""Batch image encoding into vstm embedding containers."""

from .extract import ExtractionError, ExtractionManifest, extract

__version__ = "0.1.0"
__all__ = ["ExtractionError", "ExtractionManifest", "extract", "__version__"]
