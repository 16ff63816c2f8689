"""Mesh extraction, surface sampling, L1-Chamfer evaluation and mesh files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from . import autodiff as ad


class MeshFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return np.cross(b - a, c - a)

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def transformed(self, rotation=None, translation=None) -> "TriangleMesh":
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriangleMesh(v, self.triangles.copy())


@dataclass
class ScalarGrid:
    values: np.ndarray           # (nx, ny, nz); values[i, j, k] sits at origin + (i, j, k) * spacing
    origin: np.ndarray
    spacing: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("grid values must be 3-D")

    @property
    def resolution(self) -> tuple:
        return self.values.shape

    def points(self) -> np.ndarray:
        axes = [self.origin[k] + np.arange(n) * self.spacing for k, n in enumerate(self.values.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def grid_points(resolution: int) -> np.ndarray:
    """Lattice points of a resolution^3 grid spanning the closed unit cube."""
    ax = np.linspace(0.0, 1.0, resolution)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def sample_sdf_grid(sdf: Callable[[np.ndarray], np.ndarray], resolution: int = 64,
                    chunk: int = 65536) -> ScalarGrid:
    """Evaluate a point-wise SDF on a resolution^3 lattice over the unit cube."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    pts = grid_points(resolution)
    vals = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        vals[start:start + chunk] = sdf(pts[start:start + chunk])
    return ScalarGrid(vals.reshape((resolution,) * 3), np.zeros(3), 1.0 / (resolution - 1))


def field_sdf_function(sdf_field, deform_field=None, sdf_active_levels=None,
                       deform_active_levels=None):
    """Plain numpy callable for f_sdf(f_deform(x)) of trained fields."""
    from .fields import deform

    dtype = sdf_field.grid.table.dtype

    def fn(pts: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            x = ad.Tensor(pts.astype(dtype))
            x_hat = deform(deform_field, x, deform_active_levels).x_hat
            s, _ = sdf_field(x_hat, sdf_active_levels)
        return s.data.astype(np.float64)

    return fn


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> TriangleMesh:
    """Classic 256-case marching cubes; faces wind so normals face increasing values."""
    v = grid.values
    if not np.all(np.isfinite(v)):
        raise ValueError("grid contains non-finite values")
    if not (v.min() < iso < v.max()):
        return TriangleMesh()
    verts, faces, _, _ = measure.marching_cubes(v, iso, spacing=(grid.spacing,) * 3,
                                                method="lorensen", allow_degenerate=False)
    return TriangleMesh(verts + grid.origin, faces)


def sample_surface(mesh: TriangleMesh, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, shape (n_points, 3)."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n_points, p=areas / total)
    u, v = rng.uniform(size=n_points), rng.uniform(size=n_points)
    flip = u + v > 1.0
    u, v = np.where(flip, 1.0 - u, u), np.where(flip, 1.0 - v, v)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def chamfer_l1(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric mean of Euclidean nearest-neighbour distances (KD-tree)."""
    p, q = _cloud(p), _cloud(q)
    d_pq, _ = cKDTree(q).query(p, k=1)
    d_qp, _ = cKDTree(p).query(q, k=1)
    return 0.5 * (float(np.mean(d_pq)) + float(np.mean(d_qp)))


def chamfer_bruteforce(p: np.ndarray, q: np.ndarray, chunk: int = 1024) -> float:
    """Same quantity as :func:`chamfer_l1` from exhaustive pairwise distances."""
    p, q = _cloud(p), _cloud(q)
    return 0.5 * (_mean_nearest(p, q, chunk) + _mean_nearest(q, p, chunk))


def _mean_nearest(a: np.ndarray, b: np.ndarray, chunk: int) -> float:
    best = np.empty(len(a))
    for start in range(0, len(a), chunk):
        diff = a[start:start + chunk, None, :] - b[None, :, :]
        best[start:start + chunk] = np.sqrt(np.min(np.sum(diff * diff, axis=-1), axis=1))
    return float(np.mean(best))


def _cloud(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("point set is empty")
    return p


def mesh_chamfer(a: TriangleMesh, b: TriangleMesh, n_points: int, rng: np.random.Generator) -> float:
    """Chamfer between area-uniform samples of two meshes.

    Both meshes are sampled with the same random stream, so identical meshes
    score exactly zero and a rigidly shifted copy scores exactly the shift.
    """
    seed = int(rng.integers(2**63))
    pa = sample_surface(a, n_points, np.random.default_rng(seed))
    pb = sample_surface(b, n_points, np.random.default_rng(seed))
    return chamfer_l1(pa, pb)


# ---------------------------------------------------------------- files


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.triangles]
    Path(path).write_text("".join(lines))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(path, lineno, "vertex needs three coordinates")
                try:
                    verts.append([float(t) for t in parts[1:4]])
                except ValueError:
                    raise MeshFormatError(path, lineno, "bad vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise MeshFormatError(path, lineno, "face needs at least three vertices")
                try:
                    idx = [int(t.split("/")[0]) for t in parts[1:]]
                except ValueError:
                    raise MeshFormatError(path, lineno, "bad face index") from None
                for i in idx:
                    if i == 0:
                        raise MeshFormatError(path, lineno, "OBJ indices are 1-based; got 0")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if min(idx) < 0 or max(idx) >= len(verts):
                    raise MeshFormatError(path, lineno, "face index out of range")
                # fan-triangulate polygons
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


_PLY_TYPES = {"char": "b", "int8": "b", "uchar": "B", "uint8": "B", "short": "h", "int16": "h",
              "ushort": "H", "uint16": "H", "int": "i", "int32": "i", "uint": "I", "uint32": "I",
              "float": "f", "float32": "f", "double": "d", "float64": "d"}


def read_ply(path) -> TriangleMesh:
    """PLY reader for binary little-endian and ASCII vertex/face elements."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise MeshFormatError(path, 1, "not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body_start = raw.index(b"\n", end) + 1
    fmt, elements = None, []
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(path, lineno, "property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[2], parts[3]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise MeshFormatError(path, lineno, f"unknown type {parts[1]}")
                elements[-1][2].append((parts[2], parts[1], None))
    if fmt not in ("binary_little_endian", "ascii"):
        raise MeshFormatError(path, 2, f"unsupported PLY format {fmt}")
    verts, faces = [], []
    if fmt == "ascii":
        tokens = raw[body_start:].decode("ascii").split()
        pos = 0

        def take(kind):
            nonlocal pos
            tok = tokens[pos]
            pos += 1
            return float(tok) if _PLY_TYPES[kind] in "fd" else int(tok)
    else:
        pos = body_start

        def take(kind):
            nonlocal pos
            code = "<" + _PLY_TYPES[kind]
            val = struct.unpack_from(code, raw, pos)[0]
            pos += struct.calcsize(code)
            return val
    try:
        for name, count, props in elements:
            for _ in range(count):
                rec = {}
                for pname, ptype, itype in props:
                    if itype is None:
                        rec[pname] = take(ptype)
                    else:
                        n = take(ptype)
                        rec[pname] = [take(itype) for _ in range(n)]
                if name == "vertex":
                    verts.append([rec["x"], rec["y"], rec["z"]])
                elif name == "face":
                    idx = rec.get("vertex_indices", rec.get("vertex_index"))
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
    except (IndexError, struct.error, ValueError):
        raise MeshFormatError(path, len(header) + 1, "truncated or malformed body") from None
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path, mesh: TriangleMesh) -> None:
    head = ("ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(mesh.vertices)}\nproperty float x\nproperty float y\nproperty float z\n"
            f"element face {len(mesh.triangles)}\nproperty list uchar int vertex_indices\nend_header\n")
    body = bytearray(mesh.vertices.astype("<f4").tobytes())
    for tri in mesh.triangles:
        body += struct.pack("<Biii", 3, *map(int, tri))
    Path(path).write_bytes(head.encode() + bytes(body))


def read_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported mesh extension {suffix!r}")
