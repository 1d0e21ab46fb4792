"""Learned lossy compression of point cloud colors with geometry-guided attention."""

from .codec import CodecConfig, model_init
from .entropy import EntropyModel
from .pointcloud import PointCloud, make_patches, merge_patches, read_ply, write_ply

__all__ = [
    "CodecConfig",
    "EntropyModel",
    "PointCloud",
    "make_patches",
    "merge_patches",
    "model_init",
    "read_ply",
    "write_ply",
]
