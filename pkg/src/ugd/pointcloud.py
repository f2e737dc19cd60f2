"""Point cloud data model and the geometric primitives everything else uses:
exact kNN, PCA normals, mean edge length, FPS, patch extraction and
area-weighted mesh sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .rng import derive_rng


class GeometryError(ValueError):
    """Raised when a geometric operation gets inputs it cannot handle."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise GeometryError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _frozen(self.normals)
            if nrm.shape != pts.shape:
                raise GeometryError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}")
            if not np.isfinite(nrm).all():
                raise GeometryError("normals must be finite")
            if np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > 1e-6:
                raise GeometryError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points)

    @cached_property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals)


@dataclass(frozen=True)
class PipelineConfig:
    """Patch and feature settings shared by training, prior fitting and scoring.

    ``radius`` is a fraction of the bounding-box diagonal when
    ``radius_mode == "relative"`` and a length in model units when
    ``radius_mode == "absolute"``.
    """

    m: int = 64
    s: int = 256
    radius: float = 0.1
    radius_mode: str = "relative"
    k_nn: int = 16
    d: int = 64
    h: int = 64
    n_blocks: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.s < 1:
            raise ValueError("m and s must be >= 1")
        if self.k_nn < 3:
            raise ValueError("k_nn must be >= 3")
        if self.d < 2 or self.h < 1 or self.n_blocks < 0:
            raise ValueError("invalid encoder dimensions")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if self.radius_mode not in ("relative", "absolute"):
            raise ValueError(f"unknown radius_mode {self.radius_mode!r}")

    def resolve_radius(self, cloud: PointCloud) -> float:
        if self.radius_mode == "absolute":
            return float(self.radius)
        return float(self.radius * cloud.bbox_diagonal)


@dataclass(frozen=True, eq=False)
class Patch:
    anchor: np.ndarray
    points: np.ndarray
    source_indices: np.ndarray
    radius: float


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        v = _frozen(self.vertices)
        t = np.array(self.triangles, dtype=np.int64, copy=True)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError("vertices must have shape (n, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise GeometryError("triangles must have shape (k, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# --------------------------------------------------------------------------
# nearest neighbours


def _as_cloud(cloud) -> PointCloud:
    return cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)


def knn_batch(cloud: PointCloud, queries: np.ndarray, k: int):
    """Exact k nearest neighbours for each row of ``queries``.

    Returns ``(indices, distances)`` of shape ``(q, k)``, ascending by distance
    with ties resolved towards the lower point index.
    """
    cloud = _as_cloud(cloud)
    n = len(cloud)
    if k < 1:
        raise GeometryError("k must be >= 1")
    if k > n:
        raise GeometryError(f"k={k} exceeds point count {n}")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    pts = cloud.points

    # one extra candidate lets us see whether the k-th distance is tied
    kq = min(n, k + 1)
    _, cand = cloud.tree.query(queries, k=kq)
    cand = cand.reshape(len(queries), kq).astype(np.int64)
    dist = np.sqrt(((pts[cand] - queries[:, None, :]) ** 2).sum(axis=2))
    # sort each row by (distance, index)
    order = np.lexsort((cand, dist), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    out_idx = cand[:, :k].copy()
    out_dist = dist[:, :k].copy()
    if kq == k:
        return out_idx, out_dist
    for row in np.flatnonzero(dist[:, k] <= dist[:, k - 1]):
        q = queries[row]
        _, idx = cloud.tree.query(q, k=min(n, 2 * kq))
        idx = np.atleast_1d(idx).astype(np.int64)
        while True:
            d_row = np.sqrt(((pts[idx] - q) ** 2).sum(axis=1))
            o = np.lexsort((idx, d_row))
            idx, d_row = idx[o], d_row[o]
            if len(idx) == n or d_row[k] > d_row[k - 1]:
                break
            # boundary tie: widen the candidate set until it is resolved
            _, idx = cloud.tree.query(q, k=min(n, 2 * len(idx)))
            idx = np.atleast_1d(idx).astype(np.int64)
        out_idx[row] = idx[:k]
        out_dist[row] = d_row[:k]
    return out_idx, out_dist


def knn(cloud: PointCloud, query, k: int):
    """Exact k nearest neighbours of a single query point."""
    idx, dist = knn_batch(cloud, np.asarray(query, dtype=np.float64)[None, :], k)
    return idx[0], dist[0]


def nearest_neighbor(cloud: PointCloud, queries: np.ndarray):
    """Index and distance of the nearest cloud point for every query (k = 1)."""
    idx, dist = knn_batch(cloud, queries, 1)
    return idx[:, 0], dist[:, 0]


def avg_nn_edge_length(cloud: PointCloud) -> float:
    """Mean distance from each point to its nearest other point."""
    cloud = _as_cloud(cloud)
    n = len(cloud)
    if n < 2:
        raise GeometryError("edge length needs at least 2 points")
    idx, dist = knn_batch(cloud, cloud.points, 2)
    self_first = idx[:, 0] == np.arange(n)
    edge = np.where(self_first, dist[:, 1], dist[:, 0])
    return math.fsum(edge.tolist()) / n


def estimate_normals(cloud: PointCloud, k_nn: int = 16) -> PointCloud:
    """Unoriented PCA normals from each point's k_nn neighbourhood."""
    cloud = _as_cloud(cloud)
    if k_nn < 3:
        raise GeometryError("k_nn must be >= 3")
    if len(cloud) < k_nn:
        raise GeometryError(f"k_nn={k_nn} exceeds point count {len(cloud)}")
    idx, _ = knn_batch(cloud, cloud.points, k_nn)
    nbh = cloud.points[idx]
    centered = nbh - nbh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_nn
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    bad = ~np.isfinite(norms[:, 0]) | (norms[:, 0] < 1e-12)
    normals = np.where(bad[:, None], np.array([0.0, 0.0, 1.0]), normals / np.where(bad[:, None], 1.0, norms))
    return cloud.with_normals(normals)


# --------------------------------------------------------------------------
# sampling


def farthest_point_sampling(cloud: PointCloud, m: int, seed: int = 0) -> np.ndarray:
    cloud = _as_cloud(cloud)
    pts = cloud.points
    n = len(pts)
    if m < 1:
        raise GeometryError("m must be >= 1")
    if m > n:
        raise GeometryError(f"cannot pick {m} anchors from {n} points")
    rng = derive_rng(seed, "fps")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.integers(n)
    min_d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # first maximum = lowest index on ties
        chosen[i] = nxt
        np.minimum(min_d2, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d2)
    return chosen


def extract_patches(cloud: PointCloud, cfg: PipelineConfig, seed: Optional[int] = None,
                    m: Optional[int] = None) -> list[Patch]:
    """Cut ``m`` (default ``cfg.m``) radius-r patches around FPS anchors.

    Each patch holds ``cfg.s`` in-sphere points drawn without replacement; if
    the sphere holds fewer, all of them are kept and the remainder is filled by
    drawing in-sphere points with replacement.
    """
    cloud = _as_cloud(cloud)
    seed = cfg.seed if seed is None else seed
    m = cfg.m if m is None else m
    r = cfg.resolve_radius(cloud)
    if not r > 0:
        raise GeometryError("resolved patch radius must be > 0")
    m = min(m, len(cloud))
    anchors = farthest_point_sampling(cloud, m, seed)
    s = cfg.s
    patches = []
    for i, a in enumerate(anchors):
        anchor = cloud.points[a]
        inside = np.asarray(sorted(cloud.tree.query_ball_point(anchor, r)), dtype=np.int64)
        if inside.size == 0:
            inside = np.array([a], dtype=np.int64)
        rng = derive_rng(seed, "patch", i)
        if inside.size >= s:
            pick = rng.choice(inside, size=s, replace=False)
        else:
            pad = rng.choice(inside, size=s - inside.size, replace=True)
            pick = np.concatenate([inside, pad])
        local = (cloud.points[pick] - anchor) / r
        # query_ball_point may admit points a rounding error outside r
        norms = np.linalg.norm(local, axis=1)
        over = norms > 1.0
        if over.any():
            local[over] /= norms[over, None]
        patches.append(Patch(anchor=anchor.copy(), points=local, source_indices=pick, radius=r))
    return patches


def patches_to_array(patches: list[Patch]) -> np.ndarray:
    return np.stack([p.points for p in patches]).astype(np.float64)


def sample_mesh(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform sampling of ``n`` surface points."""
    if n < 1:
        raise GeometryError("cannot sample an empty point cloud (n must be >= 1)")
    areas = mesh.areas() if len(mesh.triangles) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise GeometryError("mesh has zero total area")
    rng = derive_rng(seed, "mesh")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    t = mesh.triangles[tri]
    a, b, c = mesh.vertices[t[:, 0]], mesh.vertices[t[:, 1]], mesh.vertices[t[:, 2]]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return PointCloud(pts)
