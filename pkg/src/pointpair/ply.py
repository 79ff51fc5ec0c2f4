"""PLY reader/writer for point clouds.

Supports ASCII and binary little-endian PLY with a single ``vertex`` element.
Coordinates are stored as 32-bit floats under properties ``x``, ``y``, ``z``;
optional per-point features are stored as 32-bit floats under ``f0``..``f{D-1}``.
Writing round-trips through float32, so float64 inputs lose precision.
"""

from __future__ import annotations

import io

import numpy as np

from .errors import FormatError
from .geometry import PointCloud

_FLOAT_NAMES = {"float", "float32"}


def _header_lines(n_points: int, feature_dim: int, binary: bool) -> list[str]:
    fmt = "binary_little_endian" if binary else "ascii"
    lines = [
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {n_points}",
        "property float x",
        "property float y",
        "property float z",
    ]
    for d in range(feature_dim):
        lines.append(f"property float f{d}")
    lines.append("end_header")
    return lines


def write_ply(pc: PointCloud, target, binary: bool = True) -> None:
    """Write `pc` to `target` (a path or a binary file object)."""
    if hasattr(target, "write"):
        _write_ply_stream(pc, target, binary)
    else:
        with open(target, "wb") as fh:
            _write_ply_stream(pc, fh, binary)


def _write_ply_stream(pc: PointCloud, fh, binary: bool) -> None:
    dim = pc.feature_dim or 0
    rows = pc.points.astype(np.float32)
    if dim:
        rows = np.hstack([rows, pc.features.astype(np.float32)])
    header = "\n".join(_header_lines(len(pc), dim, binary)) + "\n"
    fh.write(header.encode("ascii"))
    if binary:
        fh.write(rows.astype("<f4").tobytes())
    else:
        for row in rows:
            fh.write((" ".join(f"{v:.9g}" for v in row) + "\n").encode("ascii"))


def read_ply(source) -> PointCloud:
    """Read a point cloud from `source` (a path or a binary file object).

    Only ``vertex`` elements with float32 properties x, y, z and optional
    f0..f{D-1} are accepted; anything else raises FormatError.
    """
    if hasattr(source, "read"):
        return _read_ply_stream(source)
    with open(source, "rb") as fh:
        return _read_ply_stream(fh)


def _read_line(fh) -> str:
    buf = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            raise FormatError("unexpected end of file inside PLY header")
        if ch == b"\n":
            break
        buf.extend(ch)
    return buf.decode("ascii").strip()


def _read_ply_stream(fh) -> PointCloud:
    if _read_line(fh) != "ply":
        raise FormatError("missing 'ply' magic line")
    binary = None
    n_points = None
    props: list[str] = []
    in_vertex = False
    while True:
        line = _read_line(fh)
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] == "ascii":
                binary = False
            elif parts[1] == "binary_little_endian":
                binary = True
            else:
                raise FormatError(f"unsupported PLY format '{parts[1]}'")
        elif parts[0] == "element":
            if parts[1] == "vertex":
                n_points = int(parts[2])
                in_vertex = True
            else:
                raise FormatError(f"unsupported PLY element '{parts[1]}'")
        elif parts[0] == "property":
            if not in_vertex:
                raise FormatError("property outside vertex element")
            if parts[1] not in _FLOAT_NAMES:
                raise FormatError(f"unsupported property type '{parts[1]}'")
            props.append(parts[2])
    if binary is None or n_points is None:
        raise FormatError("PLY header missing format or vertex element")
    if props[:3] != ["x", "y", "z"]:
        raise FormatError(f"vertex properties must start with x, y, z; got {props[:3]}")
    expected = [f"f{d}" for d in range(len(props) - 3)]
    if props[3:] != expected:
        raise FormatError(f"feature properties must be f0..f{{D-1}}; got {props[3:]}")

    width = len(props)
    if binary:
        raw = fh.read(4 * width * n_points)
        if len(raw) != 4 * width * n_points:
            raise FormatError("truncated PLY payload")
        rows = np.frombuffer(raw, dtype="<f4").reshape(n_points, width)
    else:
        rows = np.empty((n_points, width), dtype=np.float32)
        for i in range(n_points):
            vals = _read_line(fh).split()
            if len(vals) != width:
                raise FormatError(f"vertex row {i} has {len(vals)} values, expected {width}")
            rows[i] = [float(v) for v in vals]
    points = rows[:, :3].astype(np.float64)
    features = rows[:, 3:].astype(np.float64) if width > 3 else None
    return PointCloud(points, features)


def ply_bytes(pc: PointCloud, binary: bool = True) -> bytes:
    buf = io.BytesIO()
    write_ply(pc, buf, binary)
    return buf.getvalue()
