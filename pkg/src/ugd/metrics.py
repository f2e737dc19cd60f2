"""Full-reference geometric metrics: point-to-point, point-to-plane,
plane-to-plane and Chamfer distance.

Correspondences are nearest neighbours in the reference cloud.  PSNR uses the
reference bounding-box diagonal as its peak.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import GeometryError, PointCloud, nearest_neighbor


@dataclass(frozen=True)
class MetricReport:
    per_point_errors: np.ndarray
    mse: float
    rmse: float
    hausdorff: float
    psnr_db: float
    peak: float

    def to_record(self) -> dict:
        return {"mse": self.mse, "rmse": self.rmse, "hausdorff": self.hausdorff,
                "psnr_db": _json_float(self.psnr_db), "peak": self.peak,
                "n": int(len(self.per_point_errors))}


@dataclass(frozen=True)
class SimilarityReport:
    per_point: np.ndarray
    mean: float
    minimum: float

    def to_record(self) -> dict:
        return {"mean": self.mean, "minimum": self.minimum, "n": int(len(self.per_point))}


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def psnr(mse: float, peak: float) -> float:
    if mse == 0:
        return math.inf
    if peak == 0:
        return -math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _report(errors: np.ndarray, peak: float) -> MetricReport:
    """``errors`` are squared distances; Hausdorff is reported as a distance."""
    mse = float(np.mean(errors))
    return MetricReport(
        per_point_errors=errors,
        mse=mse,
        rmse=math.sqrt(mse),
        hausdorff=math.sqrt(float(errors.max())),
        psnr_db=psnr(mse, peak),
        peak=peak,
    )


def _check(*clouds):
    for c in clouds:
        if c is None or len(c) == 0:
            raise GeometryError("metric inputs must be non-empty clouds")


def po2po(eval_cloud: PointCloud, ref: PointCloud) -> MetricReport:
    _check(eval_cloud, ref)
    _, dist = nearest_neighbor(ref, eval_cloud.points)
    return _report(dist * dist, ref.bbox_diagonal)


def po2pl(eval_cloud: PointCloud, ref: PointCloud) -> MetricReport:
    _check(eval_cloud, ref)
    if ref.normals is None:
        raise GeometryError("po2pl needs reference normals")
    idx, _ = nearest_neighbor(ref, eval_cloud.points)
    diff = eval_cloud.points - ref.points[idx]
    proj = np.einsum("ij,ij->i", diff, ref.normals[idx])
    return _report(proj * proj, ref.bbox_diagonal)


def angular_similarity(na: np.ndarray, nb: np.ndarray) -> np.ndarray:
    cos = np.minimum(1.0, np.abs(np.einsum("ij,ij->i", na, nb)))
    return 1.0 - 2.0 * np.arccos(cos) / math.pi


def pl2pl(eval_cloud: PointCloud, ref: PointCloud) -> SimilarityReport:
    _check(eval_cloud, ref)
    if eval_cloud.normals is None or ref.normals is None:
        raise GeometryError("pl2pl needs normals on both clouds")
    idx, _ = nearest_neighbor(ref, eval_cloud.points)
    sim = angular_similarity(eval_cloud.normals, ref.normals[idx])
    return SimilarityReport(per_point=sim, mean=float(np.mean(sim)), minimum=float(sim.min()))


def chamfer(eval_cloud: PointCloud, ref: PointCloud) -> float:
    """Symmetric sum of mean squared nearest-neighbour distances."""
    _check(eval_cloud, ref)
    _, d_er = nearest_neighbor(ref, eval_cloud.points)
    _, d_re = nearest_neighbor(eval_cloud, ref.points)
    return float(np.mean(d_er * d_er) + np.mean(d_re * d_re))
