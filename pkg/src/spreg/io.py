"""KITTI velodyne .bin, PLY and KITTI pose file readers/writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .transform import RigidTransform


def read_kitti_bin(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(data[:, :3], data[:, 3])


def write_kitti_bin(path: str | Path, cloud: PointCloud) -> None:
    data = np.zeros((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.points
    if cloud.attributes is not None:
        data[:, 3] = cloud.attributes
    Path(path).write_bytes(data.tobytes())


_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
    "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4",
}


def read_ply_fields(path: str | Path) -> dict[str, np.ndarray]:
    """All vertex properties of an ASCII or binary little-endian PLY."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt, count, props, in_vertex = None, 0, [], False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties on vertices are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii").split("\n")[:count]
        table = np.array([[float(v) for v in ln.split()[: len(props)]] for ln in lines], dtype=np.float64)
        table = table.reshape(count, len(props))
        return {name: table[:, i] for i, (name, _) in enumerate(props)}
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        return {name: arr[name].astype(np.float64) for name, _ in props}
    raise ValueError(f"{path}: unsupported PLY format {fmt!r}")


def read_ply(path: str | Path) -> PointCloud:
    f = read_ply_fields(path)
    pts = np.stack([f["x"], f["y"], f["z"]], axis=1)
    return PointCloud(pts, f.get("intensity"))


def write_ply(path: str | Path, cloud: PointCloud, binary: bool = True, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write x/y/z (+ intensity, + any ``extra`` per-vertex float columns)."""
    cols = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2]}
    if cloud.attributes is not None:
        cols["intensity"] = cloud.attributes
    for name, values in (extra or {}).items():
        cols[name] = np.asarray(values, dtype=np.float64).reshape(-1)
    fmt = "binary_little_endian" if binary else "ascii"
    header = [f"ply", f"format {fmt} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {name}" for name in cols]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        dtype = np.dtype([(name, "<f4") for name in cols])
        arr = np.zeros(len(cloud), dtype=dtype)
        for name, values in cols.items():
            arr[name] = values
        Path(path).write_bytes(head + arr.tobytes())
    else:
        table = np.stack(list(cols.values()), axis=1).astype(np.float32)
        body = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in table)
        Path(path).write_bytes(head + body.encode("ascii"))


def read_cloud(path: str | Path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".bin":
        return read_kitti_bin(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported point cloud file {path}")


def read_poses(path: str | Path) -> list[RigidTransform]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 12:
            raise ValueError(f"{path}:{lineno}: expected 12 numbers, got {len(vals)}")
        poses.append(RigidTransform.from_matrix(np.array(vals).reshape(3, 4), orthonormalize=True))
    return poses


def format_pose(T: RigidTransform) -> str:
    return " ".join(f"{v:.12e}" for v in T.as_matrix()[:3].reshape(-1))


def write_poses(path: str | Path, poses: list[RigidTransform]) -> None:
    Path(path).write_text("".join(format_pose(T) + "\n" for T in poses))
