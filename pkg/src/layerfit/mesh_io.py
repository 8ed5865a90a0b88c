"""Mesh file IO: ASCII OBJ and binary little-endian PLY.

PLY stores vertices as doubles so write/read round-trips are exact at
64-bit precision; face layer labels ride along as an integer property
named ``layer`` (0 = body, 1 = cloth). OBJ keeps labels in a ``.layers``
sidecar (one integer per face) because the format has no face properties.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import TriMesh


class ParseError(ValueError):
    """Malformed mesh file; message carries the line or byte offset."""


_PLY_MAGIC = b"ply"


def write_mesh(path: str | Path, mesh: TriMesh) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        _write_obj(path, mesh)
    elif ext == ".ply":
        _write_ply(path, mesh)
    else:
        raise ParseError(f"unsupported mesh extension {ext!r} (want .obj or .ply)")


def read_mesh(path: str | Path) -> TriMesh:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        return _read_obj(path)
    if ext == ".ply":
        return _read_ply(path)
    raise ParseError(f"unsupported mesh extension {ext!r} (want .obj or .ply)")


# -- OBJ -----------------------------------------------------------------


def _write_obj(path: Path, mesh: TriMesh) -> None:
    lines = []
    colors = mesh.vertex_colors
    for i, v in enumerate(mesh.vertices):
        if colors is not None:
            c = colors[i]
            lines.append("v %.17g %.17g %.17g %.17g %.17g %.17g" % (v[0], v[1], v[2], c[0], c[1], c[2]))
        else:
            lines.append("v %.17g %.17g %.17g" % (v[0], v[1], v[2]))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    path.write_text("\n".join(lines) + "\n")
    if mesh.face_labels is not None:
        side = path.with_suffix(path.suffix + ".layers")
        side.write_text("\n".join(str(int(t)) for t in mesh.face_labels) + "\n")


def _read_obj(path: Path) -> TriMesh:
    verts: list[tuple] = []
    colors: list[tuple] = []
    faces: list[tuple] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) not in (4, 7):
                raise ParseError(f"{path}:{lineno}: vertex needs 3 or 6 coordinates")
            try:
                vals = [float(p) for p in parts[1:]]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad float in vertex") from None
            verts.append(tuple(vals[:3]))
            if len(vals) == 6:
                colors.append(tuple(vals[3:]))
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: only triangle faces are supported")
            try:
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad face index") from None
            if any(i < 0 for i in idx):
                raise ParseError(f"{path}:{lineno}: face index must be positive")
            faces.append(tuple(idx))
        # other directives (vn, vt, o, ...) are ignored
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and f.max() >= len(v):
        raise ParseError(f"{path}: face index {int(f.max()) + 1} exceeds vertex count {len(v)}")
    vc = np.asarray(colors, dtype=np.float64) if len(colors) == len(verts) and colors else None
    labels = None
    side = path.with_suffix(path.suffix + ".layers")
    if side.exists():
        labels = np.array([int(t) for t in side.read_text().split()], dtype=np.int8)
        if len(labels) != len(f):
            raise ParseError(f"{side}: {len(labels)} labels for {len(f)} faces")
    return TriMesh(v, f, labels, vc)


# -- PLY -----------------------------------------------------------------

_PLY_SCALARS = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _write_ply(path: Path, mesh: TriMesh) -> None:
    has_colors = mesh.vertex_colors is not None
    has_labels = mesh.face_labels is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if has_colors:
        header += ["property double red", "property double green", "property double blue"]
    header += [f"element face {mesh.n_faces}",
               "property list uchar int vertex_indices"]
    if has_labels:
        header.append("property int layer")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        vdata = mesh.vertices
        if has_colors:
            vdata = np.hstack([vdata, mesh.vertex_colors])
        fh.write(np.ascontiguousarray(vdata, dtype="<f8").tobytes())
        m = mesh.n_faces
        if has_labels:
            ftype = np.dtype([("n", "u1"), ("idx", "<i4", (3,)), ("layer", "<i4")])
        else:
            ftype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        rec = np.empty(m, dtype=ftype)
        rec["n"] = 3
        rec["idx"] = mesh.faces.astype("<i4")
        if has_labels:
            rec["layer"] = mesh.face_labels.astype("<i4")
        fh.write(rec.tobytes())


def _read_ply(path: Path) -> TriMesh:
    data = path.read_bytes()
    if not data.startswith(_PLY_MAGIC):
        raise ParseError(f"{path}: byte 0: not a PLY file")
    end = data.find(b"end_header\n")
    if end < 0:
        raise ParseError(f"{path}: header has no end_header")
    body_at = end + len(b"end_header\n")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if len(header) < 2 or header[1].strip() != "format binary_little_endian 1.0":
        raise ParseError(f"{path}: line 2: only binary_little_endian 1.0 is supported")
    elements = []  # (name, count, [(prop_name, dtype or ('list', cdtype, idtype))])
    for lineno, line in enumerate(header[2:], start=3):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: line {lineno}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", _PLY_SCALARS[parts[2]], _PLY_SCALARS[parts[3]])))
            else:
                if parts[1] not in _PLY_SCALARS:
                    raise ParseError(f"{path}: line {lineno}: unknown type {parts[1]!r}")
                elements[-1][2].append((parts[2], _PLY_SCALARS[parts[1]]))
        else:
            raise ParseError(f"{path}: line {lineno}: unexpected {parts[0]!r}")
    verts = faces = labels = colors = None
    offset = body_at
    for name, count, props in elements:
        if name == "vertex":
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            need = count * dtype.itemsize
            if offset + need > len(data):
                raise ParseError(f"{path}: byte {offset}: vertex data truncated")
            rec = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            offset += need
            try:
                verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            except KeyError:
                raise ParseError(f"{path}: vertex element lacks x/y/z") from None
            if all(k in dtype.names for k in ("red", "green", "blue")):
                colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64)
                if dtype["red"].kind == "u":
                    colors /= 255.0
        elif name == "face":
            # variable-length lists force a sequential walk
            faces_l, labels_l = [], []
            for i in range(count):
                for p, t in props:
                    if isinstance(t, tuple):
                        _, cdt, idt = t
                        csz = np.dtype(cdt).itemsize
                        n = int(np.frombuffer(data, dtype="<" + cdt, count=1, offset=offset)[0])
                        offset += csz
                        isz = np.dtype(idt).itemsize
                        idx = np.frombuffer(data, dtype="<" + idt, count=n, offset=offset)
                        offset += n * isz
                        if p == "vertex_indices" or p == "vertex_index":
                            if n != 3:
                                raise ParseError(f"{path}: byte {offset}: face {i} has {n} vertices (triangles only)")
                            faces_l.append(idx.astype(np.int64))
                    else:
                        val = np.frombuffer(data, dtype="<" + t, count=1, offset=offset)[0]
                        offset += np.dtype(t).itemsize
                        if p == "layer":
                            labels_l.append(int(val))
            faces = np.array(faces_l, dtype=np.int64).reshape(-1, 3)
            labels = np.array(labels_l, dtype=np.int8) if labels_l else None
        else:
            raise ParseError(f"{path}: unsupported element {name!r}")
    if verts is None or faces is None:
        raise ParseError(f"{path}: missing vertex or face element")
    if faces.size and faces.max() >= len(verts):
        raise ParseError(f"{path}: byte {body_at}: face index {int(faces.max())} out of range")
    return TriMesh(verts, faces, labels, colors)
