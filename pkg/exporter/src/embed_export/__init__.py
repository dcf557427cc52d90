"""Offline frozen-encoder exporter for the alignment pipeline's file formats."""

__version__ = "0.1.0"

from .export import ExportConfig, export_features, export_prompts
from .manifest import ManifestRow, read_manifest

__all__ = ["ExportConfig", "ManifestRow", "export_features", "export_prompts", "read_manifest"]
