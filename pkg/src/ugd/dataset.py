"""Procedural clean-cloud corpus.

Points are spread uniformly by surface area over analytic surfaces so that
every sample lies on the surface to rounding precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .io import load_point_cloud, save_point_cloud
from .pointcloud import PointCloud, TriangleMesh, sample_mesh
from .rng import derive_rng, derive_seed

SHAPES = ("sphere", "torus", "box", "cylinder", "superellipsoid", "two-plane-dihedral")

DEFAULT_PARAMS = {
    "sphere": {"radius": 1.0},
    "torus": {"major": 2.0, "minor": 0.5},
    "box": {"size": (2.0, 1.0, 1.5)},
    "cylinder": {"radius": 0.6, "height": 2.0},
    "superellipsoid": {"axes": (1.0, 1.0, 1.0), "e1": 0.5, "e2": 0.5},
    "two-plane-dihedral": {"length": 2.0, "width": 2.0, "angle_deg": 120.0},
}


def _sphere(n, rng, radius=1.0):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v


def _torus(n, rng, major=2.0, minor=0.5):
    if not 0 < minor < major:
        raise ValueError("torus needs 0 < minor < major")
    # the area element is proportional to (major + minor*cos(theta))
    theta = np.empty(0)
    while theta.size < n:
        t = rng.uniform(0, 2 * math.pi, 2 * n)
        keep = rng.random(2 * n) * (major + minor) < major + minor * np.cos(t)
        theta = np.concatenate([theta, t[keep]])
    theta = theta[:n]
    phi = rng.uniform(0, 2 * math.pi, n)
    ring = major + minor * np.cos(theta)
    return np.column_stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)])


def _box(n, rng, size=(2.0, 1.0, 1.5)):
    sx, sy, sz = (float(s) for s in size)
    if min(sx, sy, sz) <= 0:
        raise ValueError("box sides must be positive")
    # faces: -x, +x, -y, +y, -z, +z
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    half = np.array([sx, sy, sz]) / 2
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _cylinder(n, rng, radius=0.6, height=2.0):
    if radius <= 0 or height <= 0:
        raise ValueError("cylinder radius and height must be positive")
    areas = np.array([2 * math.pi * radius * height, math.pi * radius**2, math.pi * radius**2])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    phi = rng.uniform(0, 2 * math.pi, n)
    rad = np.where(part == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n),
                 np.where(part == 1, -height / 2, height / 2))
    return np.column_stack([rad * np.cos(phi), rad * np.sin(phi), z])


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def _superellipsoid_param(u, v, axes, e1, e2):
    a, b, c = axes
    cv, sv = np.cos(v), np.sin(v)
    return np.column_stack([a * _spow(cv, e1) * _spow(np.cos(u), e2),
                            b * _spow(cv, e1) * _spow(np.sin(u), e2),
                            c * _spow(sv, e1)])


def superellipsoid_residual(pts, axes=(1.0, 1.0, 1.0), e1=0.5, e2=0.5):
    a, b, c = axes
    x, y, z = pts[:, 0] / a, pts[:, 1] / b, pts[:, 2] / c
    return (np.abs(x) ** (2 / e2) + np.abs(y) ** (2 / e2)) ** (e2 / e1) + np.abs(z) ** (2 / e1) - 1.0


def _superellipsoid(n, rng, axes=(1.0, 1.0, 1.0), e1=0.5, e2=0.5):
    if min(axes) <= 0 or not (0.1 <= e1 <= 2.0 and 0.1 <= e2 <= 2.0):
        raise ValueError("superellipsoid needs positive axes and exponents in [0.1, 2]")
    # importance resampling of uniform (u, v) by the numerical area element
    m = 20 * n
    u = rng.uniform(-math.pi, math.pi, m)
    v = rng.uniform(-math.pi / 2, math.pi / 2, m)
    h = 1e-5
    du = (_superellipsoid_param(u + h, v, axes, e1, e2) - _superellipsoid_param(u - h, v, axes, e1, e2)) / (2 * h)
    dv = (_superellipsoid_param(u, v + h, axes, e1, e2) - _superellipsoid_param(u, v - h, axes, e1, e2)) / (2 * h)
    jac = np.linalg.norm(np.cross(du, dv), axis=1)
    jac = np.minimum(jac, np.quantile(jac, 0.999))
    pick = rng.choice(m, size=n, replace=False, p=jac / jac.sum())
    return _superellipsoid_param(u[pick], v[pick], axes, e1, e2)


def _dihedral(n, rng, length=2.0, width=2.0, angle_deg=120.0):
    if length <= 0 or width <= 0 or not 0 < angle_deg < 180:
        raise ValueError("dihedral needs positive sizes and 0 < angle < 180")
    side = rng.random(n) < 0.5
    t = rng.uniform(0, length, n)
    y = rng.uniform(-width / 2, width / 2, n)
    ang = math.radians(angle_deg)
    # face 0 runs along +x; face 1 leaves the shared edge (the y axis) at ``ang``
    x = np.where(side, t * math.cos(ang), t)
    z = np.where(side, t * math.sin(ang), 0.0)
    return np.column_stack([x, y, z])


_GENERATORS = {
    "sphere": _sphere,
    "torus": _torus,
    "box": _box,
    "cylinder": _cylinder,
    "superellipsoid": _superellipsoid,
    "two-plane-dihedral": _dihedral,
}


def generate_procedural(shape: str, n: int, params: Optional[dict] = None, seed: int = 0) -> PointCloud:
    """``n`` area-uniform samples of an analytic surface in its canonical frame."""
    if shape not in _GENERATORS:
        raise ValueError(f"unknown shape {shape!r}; choose from {SHAPES}")
    if n < 100:
        raise ValueError("procedural clouds need n >= 100")
    kw = dict(DEFAULT_PARAMS[shape])
    kw.update(params or {})
    pts = _GENERATORS[shape](n, derive_rng(seed, "shape", shape), **kw)
    return PointCloud(pts)


def load_obj_mesh(path) -> TriangleMesh:
    """Minimal Wavefront OBJ reader (vertices and faces, fans polygons)."""
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                ids = [int(t.split("/")[0]) for t in tok[1:]]
                ids = [i - 1 if i > 0 else len(verts) + i for i in ids]
                for j in range(1, len(ids) - 1):
                    tris.append([ids[0], ids[j], ids[j + 1]])
    return TriangleMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# corpus


@dataclass
class DatasetEntry:
    id: str
    source: str
    n_points: int
    seed: int
    params: dict = field(default_factory=dict)
    rotation: Optional[list] = None
    file: Optional[str] = None


@dataclass
class DatasetManifest:
    entries: list
    train: list
    test: list
    seed: int = 0

    def to_record(self) -> dict:
        return {"seed": self.seed, "entries": [asdict(e) for e in self.entries],
                "train": list(self.train), "test": list(self.test)}

    @classmethod
    def from_record(cls, rec: dict) -> "DatasetManifest":
        return cls([DatasetEntry(**e) for e in rec["entries"]], list(rec["train"]),
                   list(rec["test"]), rec.get("seed", 0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_record(json.loads(Path(path).read_text()))

    def entry(self, id_: str) -> DatasetEntry:
        for e in self.entries:
            if e.id == id_:
                return e
        raise KeyError(id_)


def _random_params(shape: str, rng: np.random.Generator) -> dict:
    if shape == "sphere":
        return {"radius": float(rng.uniform(0.5, 1.5))}
    if shape == "torus":
        major = float(rng.uniform(1.5, 2.5))
        return {"major": major, "minor": float(rng.uniform(0.25, 0.45) * major)}
    if shape == "box":
        return {"size": [float(x) for x in rng.uniform(0.8, 2.0, 3)]}
    if shape == "cylinder":
        return {"radius": float(rng.uniform(0.4, 1.0)), "height": float(rng.uniform(1.0, 2.5))}
    if shape == "superellipsoid":
        return {"axes": [float(x) for x in rng.uniform(0.7, 1.3, 3)],
                "e1": float(rng.uniform(0.3, 1.2)), "e2": float(rng.uniform(0.3, 1.2))}
    return {"length": float(rng.uniform(1.5, 2.5)), "width": float(rng.uniform(1.5, 2.5)),
            "angle_deg": float(rng.uniform(70.0, 150.0))}


def split_ids(ids: Sequence[str], seed: int, test_fraction: float = 0.2):
    if len(ids) < 5:
        raise ValueError(f"need at least 5 clouds for a train/test split, got {len(ids)}")
    order = derive_rng(seed, "split").permutation(len(ids))
    n_test = max(1, int(round(test_fraction * len(ids))))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


def build_dataset(n_clouds: int = 20, n_points: int = 8192, seed: int = 0,
                  out_dir=None, shapes: Sequence[str] = SHAPES,
                  meshes: Sequence = ()) -> tuple[DatasetManifest, dict]:
    """Generate a deterministic corpus and its 80/20 split.

    Shapes are cycled, each with randomised parameters and a random rotation.
    ``meshes`` are optional OBJ paths whose surfaces are sampled as additional
    entries.  When ``out_dir`` is given, clouds are written as ``<id>.xyz``
    next to ``manifest.json``.
    """
    total = n_clouds + len(meshes)
    if total < 5:
        raise ValueError(f"need at least 5 clouds for a train/test split, got {total}")
    entries, clouds = [], {}
    for i in range(n_clouds):
        shape = shapes[i % len(shapes)]
        cseed = derive_seed(seed, "cloud", i)
        rng = derive_rng(cseed, "params")
        params = _random_params(shape, rng)
        rot = Rotation.random(random_state=np.random.RandomState(derive_seed(cseed, "rot") % 2**32))
        cloud = generate_procedural(shape, n_points, params, cseed)
        cloud = PointCloud(rot.apply(cloud.points))
        eid = f"c{i:03d}_{shape}"
        entries.append(DatasetEntry(eid, f"procedural:{shape}", n_points, cseed, params,
                                    rot.as_quat().tolist()))
        clouds[eid] = cloud
    for j, mpath in enumerate(meshes):
        cseed = derive_seed(seed, "mesh", j)
        cloud = sample_mesh(load_obj_mesh(mpath), n_points, cseed)
        eid = f"m{j:03d}_{Path(mpath).stem}"
        entries.append(DatasetEntry(eid, f"mesh:{mpath}", n_points, cseed))
        clouds[eid] = cloud
    train, test = split_ids([e.id for e in entries], seed)
    manifest = DatasetManifest(entries, train, test, seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for e in entries:
            e.file = f"{e.id}.xyz"
            try:
                save_point_cloud(clouds[e.id], out / e.file)
            except OSError as exc:
                raise OSError(f"failed to write {out / e.file}: {exc}") from exc
        manifest.save(out / "manifest.json")
    return manifest, clouds


def load_dataset(directory) -> tuple[DatasetManifest, dict]:
    directory = Path(directory)
    manifest = DatasetManifest.load(directory / "manifest.json")
    clouds = {e.id: load_point_cloud(directory / (e.file or f"{e.id}.xyz")) for e in manifest.entries}
    return manifest, clouds
