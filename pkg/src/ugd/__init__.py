"""Reference-free geometric quality scoring of point clouds."""

__version__ = "0.1.0"

from .pointcloud import (
    GeometryError,
    Patch,
    PipelineConfig,
    PointCloud,
    TriangleMesh,
    avg_nn_edge_length,
    estimate_normals,
    extract_patches,
    farthest_point_sampling,
    knn,
    knn_batch,
    sample_mesh,
)
from .io import ParseError, load_point_cloud, save_point_cloud

__all__ = [
    "GeometryError", "Patch", "PipelineConfig", "PointCloud", "TriangleMesh",
    "avg_nn_edge_length", "estimate_normals", "extract_patches", "farthest_point_sampling",
    "knn", "knn_batch", "sample_mesh", "ParseError", "load_point_cloud", "save_point_cloud",
]
