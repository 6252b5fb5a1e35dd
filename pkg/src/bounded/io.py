"""Point cloud I/O: PLY (ascii / binary_little_endian) and whitespace XYZ.

Labels use the codes 0 = non-edge, 1 = sharp-edge, 2 = boundary. A stored
value of 3 (smooth-edge in some datasets) is folded into non-edge on read.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

NON_EDGE, SHARP_EDGE, BOUNDARY = 0, 1, 2
CLASS_NAMES = ("non-edge", "sharp-edge", "boundary")
SMOOTH_EDGE_CODE = 3

CLASS_COLORS = np.array([[128, 128, 128], [255, 0, 0], [0, 255, 0]], dtype=np.uint8)

LABEL_PROPERTY_NAMES = ("label", "class")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PointCloudFormatError(ValueError):
    """Raised when a point cloud file cannot be parsed.

    ``location`` is a human readable position such as ``"line 7"`` or
    ``"byte 1042"``.
    """

    def __init__(self, message: str, location: str | None = None, path=None):
        self.location = location
        self.path = str(path) if path is not None else None
        where = ""
        if path is not None:
            where += f"{path}"
        if location:
            where += f" ({location})" if where else location
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class PointCloud:
    """Positions (n, 3) float64 plus optional per-point class codes."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = np.ascontiguousarray(pts)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (pts.shape[0],):
                raise ValueError(
                    f"labels must have one entry per point ({pts.shape[0]}), got shape {lab.shape}")
            if lab.size and (lab.min() < 0 or lab.max() > BOUNDARY):
                raise ValueError("labels must be in {0, 1, 2}")
            self.labels = lab.astype(np.uint8)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


def _fold_labels(raw: np.ndarray, path, location_of) -> np.ndarray:
    """Map smooth-edge (3) to non-edge and reject anything else outside {0,1,2}."""
    raw = np.asarray(raw)
    if raw.dtype.kind == "f":
        if not np.all(raw == np.round(raw)):
            bad = int(np.flatnonzero(raw != np.round(raw))[0])
            raise PointCloudFormatError("non-integer label", location_of(bad), path)
    lab = raw.astype(np.int64)
    bad = np.flatnonzero((lab < 0) | (lab > SMOOTH_EDGE_CODE))
    if bad.size:
        i = int(bad[0])
        raise PointCloudFormatError(f"label {lab[i]} outside {{0,1,2,3}}", location_of(i), path)
    lab[lab == SMOOTH_EDGE_CODE] = NON_EDGE
    return lab.astype(np.uint8)


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

@dataclass
class _PlyProperty:
    name: str
    dtype: str
    count_dtype: Optional[str] = None  # set for list properties


@dataclass
class _PlyElement:
    name: str
    count: int
    properties: list


def _parse_ply_header(data: bytes, path):
    if not data.startswith(b"ply"):
        raise PointCloudFormatError("missing 'ply' magic", "line 1", path)
    pos = 0
    line_no = 0
    fmt = None
    elements: list[_PlyElement] = []
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise PointCloudFormatError("header not terminated by end_header", f"line {line_no + 1}", path)
        raw = data[pos:end]
        pos = end + 1
        line_no += 1
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PointCloudFormatError("non-ascii header line", f"line {line_no}", path) from None
        if line_no == 1:
            if line != "ply":
                raise PointCloudFormatError("missing 'ply' magic", "line 1", path)
            continue
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tok = line.split()
        where = f"line {line_no}"
        if tok[0] == "format":
            if len(tok) != 3:
                raise PointCloudFormatError("malformed format line", where, path)
            if tok[1] == "binary_big_endian":
                raise PointCloudFormatError("binary_big_endian PLY is not supported", where, path)
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise PointCloudFormatError(f"unknown PLY format {tok[1]!r}", where, path)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PointCloudFormatError("malformed element line", where, path)
            try:
                count = int(tok[2])
            except ValueError:
                raise PointCloudFormatError(f"bad element count {tok[2]!r}", where, path) from None
            if count < 0:
                raise PointCloudFormatError("negative element count", where, path)
            elements.append(_PlyElement(tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise PointCloudFormatError("property before any element", where, path)
            if len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].properties.append(_PlyProperty(tok[2], _PLY_TYPES[tok[1]]))
            elif len(tok) == 5 and tok[1] == "list" and tok[2] in _PLY_TYPES and tok[3] in _PLY_TYPES:
                elements[-1].properties.append(_PlyProperty(tok[4], _PLY_TYPES[tok[3]], _PLY_TYPES[tok[2]]))
            else:
                raise PointCloudFormatError(f"malformed property line {line!r}", where, path)
        elif tok[0] == "end_header":
            break
        else:
            raise PointCloudFormatError(f"unexpected header keyword {tok[0]!r}", where, path)
    if fmt is None:
        raise PointCloudFormatError("header has no format line", f"line {line_no}", path)
    return fmt, elements, pos, line_no


def _vertex_columns(vertex: _PlyElement, path):
    names = [p.name for p in vertex.properties]
    for axis in "xyz":
        if axis not in names:
            raise PointCloudFormatError(f"vertex element lacks property {axis!r}", "header", path)
    for p in vertex.properties:
        if p.count_dtype is not None:
            raise PointCloudFormatError(f"list property {p.name!r} in vertex element is not supported",
                                        "header", path)
        if p.name in "xyz" and p.dtype[0] != "f":
            raise PointCloudFormatError(f"coordinate {p.name!r} must be float or double", "header", path)
    label_name = None
    for p in vertex.properties:
        if p.name.lower() in LABEL_PROPERTY_NAMES:
            if p.dtype[0] == "f":
                raise PointCloudFormatError(f"label property {p.name!r} must be an integer type",
                                            "header", path)
            label_name = p.name
            break
    return label_name


def read_ply(path) -> PointCloud:
    """Read vertex positions (and a ``label``/``class`` property if present)."""
    path = Path(path)
    data = path.read_bytes()
    fmt, elements, offset, header_lines = _parse_ply_header(data, path)
    vertex_pos = next((i for i, e in enumerate(elements) if e.name == "vertex"), None)
    if vertex_pos is None:
        raise PointCloudFormatError("no vertex element", "header", path)
    vertex = elements[vertex_pos]
    if vertex.count < 1:
        raise PointCloudFormatError("vertex element is empty", "header", path)
    label_name = _vertex_columns(vertex, path)
    if fmt == "ascii":
        return _read_ply_ascii(data, offset, header_lines, elements, vertex_pos, label_name, path)
    return _read_ply_binary(data, offset, elements, vertex_pos, label_name, path)


def _read_ply_ascii(data, offset, header_lines, elements, vertex_pos, label_name, path):
    lines = data[offset:].decode("ascii", errors="replace").split("\n")
    line_no = header_lines
    cursor = 0

    def next_line():
        nonlocal cursor, line_no
        while cursor < len(lines):
            text = lines[cursor].strip()
            cursor += 1
            line_no += 1
            if text:
                return text
        raise PointCloudFormatError("unexpected end of file (truncated body)", f"line {line_no + 1}", path)

    for elem in elements[:vertex_pos]:
        for _ in range(elem.count):
            next_line()

    vertex = elements[vertex_pos]
    ncol = len(vertex.properties)
    values = np.empty((vertex.count, ncol), dtype=np.float64)
    first_line = np.empty(vertex.count, dtype=np.int64)
    for i in range(vertex.count):
        text = next_line()
        first_line[i] = line_no
        tok = text.split()
        if len(tok) != ncol:
            raise PointCloudFormatError(f"expected {ncol} values, found {len(tok)}", f"line {line_no}", path)
        try:
            values[i] = [float(t) for t in tok]
        except ValueError:
            raise PointCloudFormatError(f"non-numeric value in {text!r}", f"line {line_no}", path) from None
    names = [p.name for p in vertex.properties]
    pts = values[:, [names.index("x"), names.index("y"), names.index("z")]]
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(pts), axis=1))[0])
        raise PointCloudFormatError("non-finite coordinate", f"line {first_line[bad]}", path)
    labels = None
    if label_name is not None:
        labels = _fold_labels(values[:, names.index(label_name)], path,
                              lambda i: f"line {first_line[i]}")
    return PointCloud(pts, labels)


def _skip_binary_element(data, pos, elem, path):
    fixed = all(p.count_dtype is None for p in elem.properties)
    if fixed:
        size = sum(np.dtype(p.dtype).itemsize for p in elem.properties) * elem.count
        if pos + size > len(data):
            raise PointCloudFormatError(f"truncated body in element {elem.name!r}", f"byte {len(data)}", path)
        return pos + size
    for _ in range(elem.count):
        for p in elem.properties:
            if p.count_dtype is None:
                pos += np.dtype(p.dtype).itemsize
                continue
            csize = np.dtype(p.count_dtype).itemsize
            if pos + csize > len(data):
                raise PointCloudFormatError("truncated list count", f"byte {pos}", path)
            n = int(np.frombuffer(data, dtype="<" + p.count_dtype, count=1, offset=pos)[0])
            pos += csize + n * np.dtype(p.dtype).itemsize
        if pos > len(data):
            raise PointCloudFormatError(f"truncated body in element {elem.name!r}", f"byte {len(data)}", path)
    return pos


def _read_ply_binary(data, offset, elements, vertex_pos, label_name, path):
    pos = offset
    for elem in elements[:vertex_pos]:
        pos = _skip_binary_element(data, pos, elem, path)
    vertex = elements[vertex_pos]
    dtype = np.dtype([(p.name, "<" + p.dtype) for p in vertex.properties])
    needed = dtype.itemsize * vertex.count
    if pos + needed > len(data):
        raise PointCloudFormatError(
            f"truncated body: vertex data needs {needed} bytes, {len(data) - pos} available",
            f"byte {len(data)}", path)
    rec = np.frombuffer(data, dtype=dtype, count=vertex.count, offset=pos)
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(pts), axis=1))[0])
        raise PointCloudFormatError("non-finite coordinate", f"byte {pos + bad * dtype.itemsize}", path)
    labels = None
    if label_name is not None:
        labels = _fold_labels(rec[label_name], path,
                              lambda i: f"byte {pos + i * dtype.itemsize}")
    return PointCloud(pts, labels)


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _ply_bytes(columns: list[tuple[str, str, np.ndarray]], binary: bool, comments=()) -> bytes:
    n = len(columns[0][2])
    type_names = {"f8": "double", "f4": "float", "u1": "uchar", "i4": "int"}
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    head += [f"comment {c}" for c in comments]
    head.append(f"element vertex {n}")
    head += [f"property {type_names[t]} {name}" for name, t, _ in columns]
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        rec = np.empty(n, dtype=[(name, "<" + t) for name, t, _ in columns])
        for name, _, arr in columns:
            rec[name] = arr
        return header + rec.tobytes()
    parts = []
    for name, t, arr in columns:
        if t.startswith("f"):
            parts.append(np.char.mod("%.17g", arr))
        else:
            parts.append(arr.astype(np.int64).astype(str))
    body = "\n".join(" ".join(row) for row in zip(*parts)) + "\n"
    return header + body.encode("ascii")


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write positions as doubles, plus a uchar ``label`` column when labeled."""
    p = cloud.points
    cols = [("x", "f8", p[:, 0]), ("y", "f8", p[:, 1]), ("z", "f8", p[:, 2])]
    if cloud.labels is not None:
        cols.append(("label", "u1", cloud.labels))
    atomic_write_bytes(path, _ply_bytes(cols, binary))


def write_classified_ply(cloud: PointCloud, predictions, path, binary: bool = True) -> None:
    """Write x, y, z, red, green, blue, label with the class color convention.

    non-edge is grey (128, 128, 128), sharp-edge red, boundary green.
    """
    pred = np.asarray(predictions)
    if pred.shape != (len(cloud),):
        raise ValueError(f"predictions must have length {len(cloud)}, got shape {pred.shape}")
    if pred.size and (pred.min() < 0 or pred.max() > BOUNDARY):
        raise ValueError("predictions must be class codes in {0, 1, 2}")
    pred = pred.astype(np.uint8)
    rgb = CLASS_COLORS[pred]
    p = cloud.points
    cols = [("x", "f8", p[:, 0]), ("y", "f8", p[:, 1]), ("z", "f8", p[:, 2]),
            ("red", "u1", rgb[:, 0]), ("green", "u1", rgb[:, 1]), ("blue", "u1", rgb[:, 2]),
            ("label", "u1", pred)]
    atomic_write_bytes(path, _ply_bytes(cols, binary))


# --------------------------------------------------------------------------
# XYZ
# --------------------------------------------------------------------------

def read_xyz(path) -> PointCloud:
    """Read ``x y z`` or ``x y z label`` lines; blank and ``#`` lines are skipped."""
    path = Path(path)
    rows = []
    line_numbers = []
    ncol = None
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            tok = text.split()
            if len(tok) not in (3, 4):
                raise PointCloudFormatError(f"expected 3 or 4 columns, found {len(tok)}", f"line {line_no}", path)
            if ncol is None:
                ncol = len(tok)
            elif len(tok) != ncol:
                raise PointCloudFormatError(
                    f"inconsistent column count: {len(tok)} here, {ncol} earlier", f"line {line_no}", path)
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise PointCloudFormatError(f"non-numeric token in {text!r}", f"line {line_no}", path) from None
            if not all(np.isfinite(vals[:3])):
                raise PointCloudFormatError("non-finite coordinate", f"line {line_no}", path)
            rows.append(vals)
            line_numbers.append(line_no)
    if not rows:
        raise PointCloudFormatError("no points found", None, path)
    arr = np.asarray(rows, dtype=np.float64)
    labels = None
    if ncol == 4:
        labels = _fold_labels(arr[:, 3], path, lambda i: f"line {line_numbers[i]}")
    return PointCloud(arr[:, :3], labels)


def write_xyz(cloud: PointCloud, path) -> None:
    p = cloud.points
    cols = [np.char.mod("%.17g", p[:, j]) for j in range(3)]
    if cloud.labels is not None:
        cols.append(cloud.labels.astype(str))
    body = "\n".join(" ".join(r) for r in zip(*cols)) + "\n"
    atomic_write_bytes(path, body.encode("ascii"))


def read_cloud(path) -> PointCloud:
    """Dispatch on extension: ``.ply`` or ``.xyz``/``.txt``."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".xyz", ".txt", ".pts"):
        return read_xyz(path)
    raise ValueError(f"unsupported point cloud extension {suffix!r}")
