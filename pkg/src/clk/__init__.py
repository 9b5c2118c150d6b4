"""Centerline extraction for tree-structured tubular masks."""

from clk.volume import Volume3D, connected_components, index_to_mm, read_volume, write_volume

__all__ = ["Volume3D", "connected_components", "index_to_mm", "read_volume", "write_volume"]
__version__ = "0.1.0"
