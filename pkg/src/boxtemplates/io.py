"""Reading and writing point clouds, meshes and box layouts.

Supported inputs: XYZ / XYZL text, PLY (ascii and binary, vertex positions
only) and OBJ (vertices and faces).  Outputs: XYZ, XYZL, OBJ meshes and OBJ
box layouts with one group per box.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError, ParseError
from .geometry import PointCloud, stack_boxes

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: list = field(default_factory=list)  # lists of 0-based vertex indices


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def atomic_write(path, data) -> None:
    """Write text or bytes to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_xyz(path) -> PointCloud:
    """Whitespace-separated ``x y z`` rows, with an optional integer label column."""
    text = _read_bytes(path).decode(errors="replace")
    pts, labels = [], []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) not in (3, 4):
            raise ParseError(f"expected 3 or 4 columns in {path}", line=n)
        try:
            pts.append([float(v) for v in parts[:3]])
            if len(parts) == 4:
                labels.append(int(parts[3]))
        except ValueError:
            raise ParseError(f"bad number in {path}", line=n) from None
    if labels and len(labels) != len(pts):
        raise ParseError(f"label column present on only some rows of {path}")
    return PointCloud(np.array(pts, dtype=float).reshape(-1, 3),
                      np.array(labels) if labels else None)


def _ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(f"{path} is not a PLY file", line=1)
    nl = data.find(b"\n", end)
    body = data[nl + 1:] if nl >= 0 else b""
    fmt, elements = None, []
    for n, raw in enumerate(data[:end].decode(errors="replace").splitlines(), 1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"property before element in {path}", line=n)
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown PLY type {tok[1]!r}", line=n)
                elements[-1][2].append((tok[2], tok[1]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r} in {path}")
    return fmt, elements, body


def read_ply(path) -> PointCloud:
    data = _read_bytes(path)
    fmt, elements, body = _ply_header(data, path)
    if not elements or elements[0][0] != "vertex":
        raise ParseError(f"{path}: the first PLY element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    if not all(k in names for k in "xyz"):
        raise ParseError(f"{path}: vertex element lacks x/y/z", field="vertex")
    if any(p[1] == "list" for p in props):
        raise ParseError(f"{path}: list properties on vertices are not supported")
    cols = [names.index(k) for k in "xyz"]
    if fmt == "ascii":
        rows = body.decode(errors="replace").split("\n")
        rows = [r for r in rows if r.strip()][:count]
        if len(rows) < count:
            raise ParseError(f"{path}: expected {count} vertices, found {len(rows)}")
        try:
            arr = np.array([[float(r.split()[c]) for c in cols] for r in rows], dtype=float)
        except (ValueError, IndexError):
            raise ParseError(f"{path}: malformed vertex row") from None
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(p[0], endian + _PLY_TYPES[p[1]]) for p in props])
        if len(body) < count * dt.itemsize:
            raise ParseError(f"{path}: truncated binary vertex data")
        rec = np.frombuffer(body, dtype=dt, count=count)
        arr = np.stack([rec[k].astype(float) for k in "xyz"], axis=1)
    return PointCloud(arr.reshape(-1, 3))


def read_obj(path) -> Mesh:
    text = _read_bytes(path).decode(errors="replace")
    verts, faces = [], []
    for n, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "v":
                verts.append([float(v) for v in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except ValueError:
            raise ParseError(f"bad OBJ record in {path}", line=n) from None
    v = np.array(verts, dtype=float).reshape(-1, 3)
    for f in faces:
        if min(f) < 0 or max(f) >= len(v):
            raise ParseError(f"{path}: face index out of range")
    return Mesh(v, faces)


def load_geometry(path):
    """A PointCloud, or a Mesh for ``.obj`` files."""
    ext = Path(path).suffix.lower()
    if ext in (".xyz", ".xyzl", ".txt", ".pts"):
        return read_xyz(path)
    if ext == ".ply":
        return read_ply(path)
    if ext == ".obj":
        return read_obj(path)
    raise InputError(f"unsupported geometry format {ext!r} ({path})")


def load_cloud(path) -> PointCloud:
    g = load_geometry(path)
    return PointCloud(g.vertices) if isinstance(g, Mesh) else g


def format_xyz(points, labels: Optional[np.ndarray] = None) -> str:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if labels is None:
        return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist())
    return "".join(f"{x!r} {y!r} {z!r} {int(l)}\n"
                   for (x, y, z), l in zip(pts.tolist(), np.asarray(labels).tolist()))


def write_xyz(path, cloud) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    atomic_write(path, format_xyz(pts))


def write_xyzl(path, cloud: PointCloud) -> None:
    if cloud.labels is None:
        raise InputError("XYZL output needs per-point labels")
    atomic_write(path, format_xyz(cloud.points, cloud.labels))


def format_obj(mesh: Mesh) -> str:
    out = [f"v {x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(mesh.vertices).tolist()]
    out += ["f " + " ".join(str(i + 1) for i in f) + "\n" for f in mesh.faces]
    return "".join(out)


def write_obj(path, mesh: Mesh) -> None:
    atomic_write(path, format_obj(mesh))


# corner k has x from bit 0, y from bit 1, z from bit 2; two triangles per face
_BOX_TRIS = [
    (0, 2, 3), (0, 3, 1),  # -z
    (4, 5, 7), (4, 7, 6),  # +z
    (0, 1, 5), (0, 5, 4),  # -y
    (2, 6, 7), (2, 7, 3),  # +y
    (0, 4, 6), (0, 6, 2),  # -x
    (1, 3, 7), (1, 7, 5),  # +x
]


def boxes_to_obj(boxes, names=None) -> str:
    """Triangulated boxes, 12 outward-facing triangles each, one group per box."""
    c, s = stack_boxes(boxes)
    names = list(names) if names is not None else [f"box_{i}" for i in range(len(c))]
    out = []
    for i in range(len(c)):
        lo, hi = c[i] - 0.5 * s[i], c[i] + 0.5 * s[i]
        out.append(f"g {names[i]}\n")
        for k in range(8):
            v = [float(hi[a] if (k >> a) & 1 else lo[a]) for a in range(3)]
            out.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        base = 8 * i + 1
        out += [f"f {a + base} {b + base} {d + base}\n" for a, b, d in _BOX_TRIS]
    return "".join(out)


def write_boxes_obj(path, boxes, names=None) -> None:
    atomic_write(path, boxes_to_obj(boxes, names))


def mesh_surface_samples(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh faces (polygons fan-triangulated)."""
    tris = [(f[0], f[k], f[k + 1]) for f in mesh.faces for k in range(1, len(f) - 1)]
    v = np.asarray(mesh.vertices, dtype=float)
    if not tris:
        return v.copy()
    T = v[np.array(tris)]
    area = 0.5 * np.linalg.norm(np.cross(T[:, 1] - T[:, 0], T[:, 2] - T[:, 0]), axis=1)
    if area.sum() <= 0:
        return v.copy()
    rng = np.random.default_rng(seed)
    which = rng.choice(len(T), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    t = T[which]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])


def geometry_points(geom, n: int = 4096, seed: int = 0) -> np.ndarray:
    """Points to fit against: the cloud itself, or surface samples plus vertices of a mesh."""
    if isinstance(geom, Mesh):
        return np.concatenate([mesh_surface_samples(geom, n, seed), geom.vertices])
    return geom.points if isinstance(geom, PointCloud) else np.asarray(geom, dtype=float)
