"""Reading and writing point clouds as XYZ or ASCII PLY."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import numpy as np

from .pointcloud import PointCloud


class ParseError(ValueError):
    def __init__(self, path, line: Optional[int], msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.path = str(path)
        self.line = line


def _floats(tokens, path, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(path, lineno, f"cannot parse numbers from {' '.join(tokens)!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(path, lineno, "non-finite value")
    return vals


def _build(path, pts, nrm) -> PointCloud:
    if not pts:
        raise ParseError(path, None, "no points found")
    normals = None
    if nrm:
        normals = np.asarray(nrm, dtype=np.float64)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        if (lengths == 0).any():
            raise ParseError(path, None, "zero-length normal")
        off = np.abs(lengths - 1.0) > 1e-9
        normals = np.where(off, normals / lengths, normals)
    return PointCloud(np.asarray(pts, dtype=np.float64), normals)


def _load_xyz(path: Path) -> PointCloud:
    pts, nrm = [], []
    ncols = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if len(tokens) not in (3, 6):
                raise ParseError(path, lineno, f"expected 3 or 6 columns, got {len(tokens)}")
            if ncols is None:
                ncols = len(tokens)
            elif len(tokens) != ncols:
                raise ParseError(path, lineno, "inconsistent column count")
            vals = _floats(tokens, path, lineno)
            pts.append(vals[:3])
            if ncols == 6:
                nrm.append(vals[3:])
    return _build(path, pts, nrm)


def _load_ply(path: Path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for i, line in enumerate(lines[1:], 2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise ParseError(path, i, "only ascii PLY is supported")
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                n_vertex = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise ParseError(path, i, "list properties are not allowed on vertices")
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = i
            break
    if body_start is None:
        raise ParseError(path, None, "missing end_header")
    if n_vertex is None:
        raise ParseError(path, None, "no vertex element declared")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError(path, None, "vertex element lacks x/y/z") from None
    ncols = [props.index(c) for c in ("nx", "ny", "nz")] if {"nx", "ny", "nz"} <= set(props) else None

    pts, nrm = [], []
    lineno = body_start
    for lineno in range(body_start + 1, len(lines) + 1):
        if len(pts) == n_vertex:
            break
        tokens = lines[lineno - 1].split()
        if not tokens:
            continue
        if len(tokens) < len(props):
            raise ParseError(path, lineno, f"expected {len(props)} values, got {len(tokens)}")
        vals = _floats(tokens[: len(props)], path, lineno)
        pts.append([vals[c] for c in cols])
        if ncols:
            nrm.append([vals[c] for c in ncols])
    if len(pts) != n_vertex:
        raise ParseError(path, len(lines) + 1,
                         f"unexpected end of file: header declares {n_vertex} vertices, found {len(pts)}")
    return _build(path, pts, nrm)


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return "ply-ascii"
    return "xyz"


def load_point_cloud(path, format: Optional[str] = None) -> PointCloud:
    path = Path(path)
    fmt = format or _infer_format(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt == "xyz":
        return _load_xyz(path)
    if fmt in ("ply", "ply-ascii"):
        return _load_ply(path)
    raise ValueError(f"unknown point cloud format {fmt!r}")


def save_point_cloud(cloud: PointCloud, path, format: Optional[str] = None) -> Path:
    """Write ``cloud`` with round-trip-exact (17 significant digit) formatting."""
    path = Path(path)
    fmt = format or _infer_format(path)
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in data) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "xyz":
        path.write_text(body)
    elif fmt in ("ply", "ply-ascii"):
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
                  "property double x", "property double y", "property double z"]
        if cloud.normals is not None:
            header += ["property double nx", "property double ny", "property double nz"]
        header.append("end_header")
        path.write_text("\n".join(header) + "\n" + body)
    else:
        raise ValueError(f"unknown point cloud format {fmt!r}")
    return path
