"""PLY 1.0 export/import with an extra ``ushort label`` vertex property."""
from __future__ import annotations

import os
import sys

import numpy as np

from ..errors import FormatError, ParseError
from ..geometry import LabeledPointCloud

# Display colours for label ids (label % 16). Label 0 is grey.
PALETTE = np.array([
    [128, 128, 128], [230, 25, 75], [60, 180, 75], [255, 225, 25],
    [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240],
    [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
    [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0],
], dtype=np.uint8)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

_VERTEX_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("label", "<u2")])


def label_colors(labels):
    return PALETTE[np.asarray(labels, dtype=np.int64) % len(PALETTE)]


def _unpack(geom):
    """(positions, colors, labels, triangles) from a cloud or mesh-like object."""
    tris = getattr(geom, "triangles", None)
    pos = getattr(geom, "positions", None)
    if pos is None:
        pos = geom.vertices
    colors = getattr(geom, "colors", None)
    labels = np.asarray(geom.labels, dtype=np.uint16).reshape(-1)
    if colors is None:
        colors = label_colors(labels)
    return np.asarray(pos, dtype=np.float64).reshape(-1, 3), np.asarray(colors, np.uint8), labels, tris


def format_labeled_ply(geom, binary=False) -> bytes:
    pos, colors, labels, tris = _unpack(geom)
    n = len(pos)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              "comment labelfuse labeled geometry",
              "comment palette: label id mod 16 -> display colour"]
    header += [f"comment palette {i} {r} {g} {b}" for i, (r, g, b) in enumerate(PALETTE)]
    header += [f"element vertex {n}",
               "property float x", "property float y", "property float z",
               "property uchar red", "property uchar green", "property uchar blue",
               "property ushort label"]
    if tris is not None:
        header += [f"element face {len(tris)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    verts = np.empty(n, dtype=_VERTEX_DTYPE)
    for i, ax in enumerate("xyz"):
        verts[ax] = pos[:, i]
    verts["red"], verts["green"], verts["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    verts["label"] = labels
    faces = None if tris is None else np.asarray(tris, dtype=np.int64).reshape(-1, 3)

    if binary:
        body = verts.tobytes()
        if faces is not None:
            f = np.empty(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
            f["n"] = 3
            f["v"] = faces
            body += f.tobytes()
        return head + body

    rows = []
    xyz = np.stack([verts["x"], verts["y"], verts["z"]], axis=1)
    for p, c, lab in zip(xyz, colors, labels):
        rows.append(f"{_f32(p[0])} {_f32(p[1])} {_f32(p[2])} {c[0]} {c[1]} {c[2]} {lab}")
    if faces is not None:
        rows += [f"3 {a} {b} {c}" for a, b, c in faces]
    return head + ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")


def _f32(x):
    # shortest repr that round-trips through float32
    return np.format_float_positional(np.float32(x), unique=True, trim="-")


def write_labeled_ply(geom, path, binary=False):
    data = format_labeled_ply(geom, binary)
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


class PlyData:
    """Parsed PLY: structured arrays per element plus the raw header comments."""

    def __init__(self, elements, comments, fmt):
        self.elements = elements
        self.comments = comments
        self.format = fmt

    def to_cloud(self):
        v = self.elements.get("vertex")
        if v is None:
            raise FormatError("PLY has no vertex element")
        pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64) if len(v) else np.zeros((0, 3))
        names = v.dtype.names
        colors = None
        if all(c in names for c in ("red", "green", "blue")):
            colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.uint8)
        labels = v["label"].astype(np.uint16) if "label" in names else None
        normals = None
        if all(c in names for c in ("nx", "ny", "nz")):
            normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
        return LabeledPointCloud(pos, labels, colors, normals)

    @property
    def faces(self):
        f = self.elements.get("face")
        return None if f is None else f


def _parse_header(fh, source):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise ParseError("missing 'ply' magic", 1, source)
    elements, comments, fmt = [], [], None
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError("header ended before end_header", lineno, source)
        tok = raw.decode("ascii", errors="replace").split()
        if not tok:
            continue
        key = tok[0]
        if key == "end_header":
            break
        if key in ("comment", "obj_info"):
            comments.append(raw.decode("ascii", errors="replace").strip()[len(key) + 1:])
        elif key == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian") \
                    or tok[2] != "1.0":
                raise ParseError(f"unsupported format line {' '.join(tok[1:])!r}", lineno, source)
            fmt = tok[1]
        elif key == "element":
            if len(tok) != 3:
                raise ParseError("element line needs a name and a count", lineno, source)
            try:
                elements.append([tok[1], int(tok[2]), []])
            except ValueError as exc:
                raise ParseError(str(exc), lineno, source) from exc
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", lineno, source)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError("bad list property", lineno, source)
                elements[-1][2].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise ParseError(f"bad property line {' '.join(tok)!r}", lineno, source)
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None))
        else:
            raise ParseError(f"unknown header keyword {key!r}", lineno, source)
    if fmt is None:
        raise ParseError("header has no format line", lineno, source)
    return fmt, elements, comments, lineno


def read_ply(path) -> PlyData:
    source = os.fspath(path)
    with open(path, "rb") as fh:
        fmt, spec, comments, header_lines = _parse_header(fh, source)
        payload = fh.read()
    out = {}
    if fmt == "ascii":
        lines = payload.decode("ascii").splitlines()
        cursor = 0
        for name, count, props in spec:
            rows = []
            for i in range(count):
                lineno = header_lines + cursor + 1
                if cursor >= len(lines):
                    raise ParseError(f"expected {count} {name} rows, file ended", lineno, source)
                tok = lines[cursor].split()
                cursor += 1
                try:
                    rows.append(_ascii_row(tok, props))
                except (ValueError, IndexError) as exc:
                    raise ParseError(f"bad {name} row: {exc}", lineno, source) from exc
            out[name] = _to_array(rows, props)
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        offset = 0
        for name, count, props in spec:
            if all(p[2] is None for p in props):
                dt = np.dtype([(p[0], order + p[1]) for p in props])
                need = dt.itemsize * count
                if offset + need > len(payload):
                    raise ParseError(f"binary payload too short for element {name}", None, source)
                out[name] = np.frombuffer(payload, dt, count, offset).copy()
                offset += need
            elif len(props) == 1 and count and _fixed_triangles(payload, offset, count, props[0], order):
                pname, ctype, itype = props[0]
                dt = np.dtype([("n", order + ctype), ("v", order + itype, (3,))])
                out[name] = {pname: np.frombuffer(payload, dt, count, offset)["v"].copy()}
                offset += dt.itemsize * count
            else:
                rows = []
                for _ in range(count):
                    row = []
                    for pname, ctype, itype in props:
                        dt = np.dtype(order + ctype)
                        val = np.frombuffer(payload, dt, 1, offset)[0]
                        offset += dt.itemsize
                        if itype is None:
                            row.append(val)
                        else:
                            idt = np.dtype(order + itype)
                            row.append(np.frombuffer(payload, idt, int(val), offset).tolist())
                            offset += idt.itemsize * int(val)
                    rows.append(row)
                out[name] = _to_array(rows, props)
    return PlyData(out, comments, fmt)


def _fixed_triangles(payload, offset, count, prop, order):
    _, ctype, itype = prop
    if itype is None:
        return False
    dt = np.dtype([("n", order + ctype), ("v", order + itype, (3,))])
    if offset + dt.itemsize * count > len(payload):
        return False
    return bool(np.all(np.frombuffer(payload, dt, count, offset)["n"] == 3))


def _ascii_row(tok, props):
    row, i = [], 0
    for _, ctype, itype in props:
        if itype is None:
            row.append(float(tok[i]) if ctype[0] == "f" else int(tok[i]))
            i += 1
        else:
            n = int(tok[i])
            row.append([int(x) for x in tok[i + 1:i + 1 + n]])
            if len(row[-1]) != n:
                raise ValueError("list shorter than its count")
            i += 1 + n
    if i != len(tok):
        raise ValueError(f"{len(tok) - i} trailing values")
    return row


def _to_array(rows, props):
    if all(p[2] is None for p in props):
        dt = np.dtype([(p[0], "<" + p[1]) for p in props])
        return np.array([tuple(r) for r in rows], dtype=dt) if rows else np.zeros(0, dt)
    # list properties: keep a dict of columns, fixed-width lists become 2-D arrays
    cols = {}
    for j, (name, ctype, itype) in enumerate(props):
        vals = [r[j] for r in rows]
        if itype is None:
            cols[name] = np.array(vals, dtype=ctype)
        else:
            lens = {len(v) for v in vals}
            cols[name] = np.array(vals, dtype=itype) if len(lens) <= 1 else vals
    return cols


def read_labeled_ply(path):
    """Read a PLY into a cloud, or into a mesh when it carries faces."""
    from ..tsdf import LabeledMesh

    data = read_ply(path)
    cloud = data.to_cloud()
    faces = data.faces
    if faces is None:
        return cloud
    tris = faces["vertex_indices"]
    if not isinstance(tris, np.ndarray) or (tris.size and tris.shape[1] != 3):
        raise FormatError(f"{path}: only triangle faces are supported")
    return LabeledMesh(cloud.positions, tris.reshape(-1, 3).astype(np.int64),
                       cloud.colors, cloud.labels)
