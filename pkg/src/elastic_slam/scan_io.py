"""Scan and trajectory file I/O.

Supported scan inputs: KITTI velodyne .bin (x, y, z, reflectance as packed
little-endian float32) and PLY (binary little-endian or ASCII) with float
x/y/z and an optional per-point timestamp property. The package's own
interchange format is binary PLY with double precision so write/read round
trips are lossless.

Also here: per-point timestamp recovery from azimuth sweep order, the fixed
vertical beam-angle correction some KITTI-family sensors need, and the
plain-text trajectory formats.
"""

from __future__ import annotations

import struct
import sys
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import EmptyScan, MalformedFile
from .geometry import Pose, TrajectoryFrame
from .scan import Scan

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


# -- KITTI binary -------------------------------------------------------------


def read_kitti_bin(path) -> Scan:
    """Packed float32 quadruples (x, y, z, reflectance); reflectance dropped."""
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise EmptyScan(f"{path} contains no points")
    if len(raw) % 16 != 0:
        raise MalformedFile(
            f"{path}: {len(raw)} bytes is not a whole number of 16-byte records"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return Scan(positions=data[:, :3].astype(float))


def write_kitti_bin(path, scan: Scan, reflectance: Optional[np.ndarray] = None):
    n = len(scan)
    data = np.zeros((n, 4), dtype="<f4")
    data[:, :3] = scan.positions
    if reflectance is not None:
        data[:, 3] = reflectance
    Path(path).write_bytes(data.tobytes())


# -- timestamp recovery and intrinsic correction --------------------------------


def estimate_timestamps_from_azimuth(scan: Scan) -> Scan:
    """Assign alpha in [0, 1] from azimuth sweep progress.

    The sweep starts at the first point's azimuth; progress accumulates
    monotonically (running max) over one revolution, in whichever spin
    direction the data itself indicates. Invariant to a global rotation of
    the scan about z.
    """
    if len(scan) == 0:
        raise EmptyScan("cannot estimate timestamps of an empty scan")
    az = np.degrees(np.arctan2(scan.positions[:, 1], scan.positions[:, 0]))
    rel = np.mod(az - az[0], 360.0)
    # spin direction: median of wrapped consecutive steps
    step = np.mod(np.diff(rel) + 180.0, 360.0) - 180.0
    if step.size and np.median(step) < 0:
        rel = np.mod(-(az - az[0]), 360.0)
    progress = np.maximum.accumulate(rel)
    alphas = np.clip(progress / 360.0, 0.0, 1.0)
    return Scan(
        positions=scan.positions.copy(),
        alphas=alphas,
        raw_timestamps=None if scan.raw_timestamps is None else scan.raw_timestamps.copy(),
        index=scan.index,
        tau_begin=scan.tau_begin,
        tau_end=scan.tau_end,
    )


def apply_intrinsic_vertical_correction(scan: Scan, angle_deg: float = 0.205) -> Scan:
    """Raise every point's elevation angle by a fixed amount, range preserved.

    Compensates the constant vertical beam-angle bias of KITTI-family
    sensors.
    """
    if angle_deg == 0.0:
        return scan
    p = scan.positions
    rng = np.linalg.norm(p, axis=1)
    az = np.arctan2(p[:, 1], p[:, 0])
    with np.errstate(invalid="ignore"):
        el = np.arcsin(np.clip(np.where(rng > 0, p[:, 2] / np.where(rng > 0, rng, 1.0), 0.0), -1.0, 1.0))
    el = el + np.deg2rad(angle_deg)
    cos_el = np.cos(el)
    out = np.stack(
        [rng * cos_el * np.cos(az), rng * cos_el * np.sin(az), rng * np.sin(el)],
        axis=1,
    )
    return Scan(
        positions=out,
        alphas=None if scan.alphas is None else scan.alphas.copy(),
        raw_timestamps=None if scan.raw_timestamps is None else scan.raw_timestamps.copy(),
        index=scan.index,
        tau_begin=scan.tau_begin,
        tau_end=scan.tau_end,
    )


# -- PLY ------------------------------------------------------------------------

_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_NUMPY = {
    "char": "<i1", "int8": "<i1", "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def _parse_ply_header(fh):
    def line():
        raw = fh.readline()
        if not raw:
            raise MalformedFile("unexpected end of PLY header")
        return raw.decode("ascii", errors="replace").strip()

    if line() != "ply":
        raise MalformedFile("missing 'ply' magic")
    fmt = None
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        tok = line().split()
        if not tok:
            continue
        if tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] not in ("binary_little_endian", "ascii"):
                raise MalformedFile(f"unsupported PLY format {tok[1]!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex is not None:
                raise MalformedFile("elements after vertex are not supported")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise MalformedFile("list properties are not supported")
            if tok[1] not in _PLY_SIZES:
                raise MalformedFile(f"unknown PLY property type {tok[1]!r}")
            props.append((tok[2], tok[1]))
        elif tok[0] == "end_header":
            break
    if fmt is None or n_vertex is None:
        raise MalformedFile("PLY header missing format or vertex element")
    return fmt, n_vertex, props


def read_ply(path) -> Scan:
    """Binary little-endian or ASCII PLY with x, y, z and optional timestamp."""
    with open(path, "rb") as fh:
        fmt, n, props = _parse_ply_header(fh)
        names = [p[0] for p in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise MalformedFile(f"PLY misses required property {axis!r}")
        if n == 0:
            raise EmptyScan(f"{path} contains no points")
        if fmt == "binary_little_endian":
            dtype = np.dtype([(nm, _PLY_NUMPY[tp]) for nm, tp in props])
            raw = fh.read(dtype.itemsize * n)
            if len(raw) < dtype.itemsize * n:
                raise MalformedFile(f"{path}: truncated PLY payload")
            table = np.frombuffer(raw, dtype=dtype, count=n)
        else:
            rows = []
            for _ in range(n):
                text = fh.readline()
                if not text:
                    raise MalformedFile(f"{path}: truncated ASCII PLY payload")
                parts = text.split()
                if len(parts) != len(props):
                    raise MalformedFile(f"{path}: bad ASCII PLY row")
                rows.append([float(v) for v in parts])
            arr = np.asarray(rows)
            table = {nm: arr[:, i] for i, (nm, _) in enumerate(props)}
    pos = np.stack(
        [np.asarray(table["x"], dtype=float),
         np.asarray(table["y"], dtype=float),
         np.asarray(table["z"], dtype=float)],
        axis=1,
    )
    alphas = None
    raw_ts = None
    if "timestamp" in names:
        ts = np.asarray(table["timestamp"], dtype=float)
        if ts.size and (ts.min() < 0.0 or ts.max() > 1.0):
            raw_ts = ts
            span = ts.max() - ts.min()
            alphas = (ts - ts.min()) / span if span > 0 else np.zeros_like(ts)
        else:
            alphas = ts
    return Scan(positions=pos, alphas=alphas, raw_timestamps=raw_ts)


def write_ply(path, scan: Scan, binary: bool = True):
    """Double-precision PLY; alphas stored as a 'timestamp' property."""
    n = len(scan)
    has_ts = scan.alphas is not None
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += ["property double x", "property double y", "property double z"]
    if has_ts:
        header.append("property double timestamp")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        cols = 4 if has_ts else 3
        data = np.empty((n, cols))
        data[:, :3] = scan.positions
        if has_ts:
            data[:, 3] = scan.alphas
        if binary:
            fh.write(data.astype("<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join(f"{v:.17g}" for v in row) + "\n").encode("ascii"))


# -- trajectory files ------------------------------------------------------------

_TRAJ_HEADER = "# scan_index tx_b ty_b tz_b qw_b qx_b qy_b qz_b tx_e ty_e tz_e qw_e qx_e qy_e qz_e"


def write_trajectory(path, frames: Sequence[TrajectoryFrame]):
    """One line per scan: index, begin translation+quaternion, end ditto."""
    lines = [_TRAJ_HEADER]
    for f in frames:
        vals = np.concatenate([f.begin.t, f.begin.q, f.end.t, f.end.q])
        lines.append(str(f.scan_index) + " " + " ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[TrajectoryFrame]:
    frames = []
    for text in Path(path).read_text().splitlines():
        text = text.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 15:
            raise MalformedFile(f"{path}: expected 15 columns, got {len(parts)}")
        vals = np.asarray([float(v) for v in parts[1:]])
        frames.append(
            TrajectoryFrame(
                begin=Pose(vals[3:7], vals[0:3]),
                end=Pose(vals[10:14], vals[7:10]),
                scan_index=int(parts[0]),
            )
        )
    return frames


def write_kitti_poses(path, poses: Sequence[Pose]):
    """KITTI convention: 12 numbers per line, row-major 3x4 [R | t]."""
    lines = []
    for p in poses:
        m = np.hstack([p.rotation, p.t[:, None]])
        lines.append(" ".join(f"{v:.17g}" for v in m.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_kitti_poses(path) -> list[Pose]:
    poses = []
    for text in Path(path).read_text().splitlines():
        if not text.strip():
            continue
        vals = np.asarray([float(v) for v in text.split()])
        if vals.size != 12:
            raise MalformedFile(f"{path}: expected 12 numbers per line")
        m = vals.reshape(3, 4)
        poses.append(Pose.from_rt(m[:, :3], m[:, 3]))
    return poses


def write_xy_csv(path, poses: Sequence[Pose]):
    """x,y path dump for external plotting."""
    lines = ["x,y"]
    for p in poses:
        lines.append(f"{p.t[0]:.17g},{p.t[1]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- config and directory sources --------------------------------------------------


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def scan_source(
    directory,
    estimate_alphas: bool = True,
    vertical_correction_deg: float = 0.0,
) -> Iterator[Scan]:
    """Yield scans from a directory of .ply or .bin files, sorted by name.

    PLY timestamps are kept when present; otherwise (and always for .bin)
    alphas are recovered from azimuth order when estimate_alphas is on.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    files = sorted(
        [p for p in directory.iterdir() if p.suffix in (".ply", ".bin")]
    )
    if not files:
        raise FileNotFoundError(f"{directory} contains no .ply or .bin scans")
    for i, path in enumerate(files):
        scan = read_ply(path) if path.suffix == ".ply" else read_kitti_bin(path)
        if vertical_correction_deg:
            scan = apply_intrinsic_vertical_correction(scan, vertical_correction_deg)
        if scan.alphas is None and estimate_alphas:
            scan = estimate_timestamps_from_azimuth(scan)
        yield Scan(
            positions=scan.positions,
            alphas=scan.alphas,
            raw_timestamps=scan.raw_timestamps,
            index=i,
        )
