"""Point-cloud containers, binary/ASCII file formats and preprocessing."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

CLOUD_MAGIC = b"LIFC"
FLOW_MAGIC = b"LIFF"
FORMAT_VERSION = 1

HAS_GT_FLOW = 1 << 0
HAS_CLASS = 1 << 1
HAS_FG = 1 << 2
HAS_LABELS = 1 << 0


class CloudFormatError(ValueError):
    """Base class for malformed cloud or flow files."""


class MagicMismatchError(CloudFormatError):
    pass


class VersionMismatchError(CloudFormatError):
    pass


class TruncatedPayloadError(CloudFormatError):
    pass


class AttributeLengthError(ValueError):
    """Per-point attribute does not match the point count."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class TimedPointCloud:
    """A frame of 3D points (meters) with optional per-point annotations.

    ``gt_flow`` is the displacement of each point to the next frame, ``class_id``
    a small integer label, ``is_foreground`` a boolean flag. Arrays are
    read-only after construction.
    """

    points: np.ndarray
    frame_index: int = 0
    gt_flow: Optional[np.ndarray] = None
    class_id: Optional[np.ndarray] = None
    is_foreground: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.gt_flow is not None:
            flow = np.asarray(self.gt_flow, dtype=np.float64).reshape(-1, 3)
            if len(flow) != n:
                raise AttributeLengthError(f"gt_flow has {len(flow)} rows, expected {n}")
            if not np.all(np.isfinite(flow)):
                raise ValueError("gt_flow must be finite")
            object.__setattr__(self, "gt_flow", _frozen(flow))
        if self.class_id is not None:
            cls = np.asarray(self.class_id, dtype=np.int64).reshape(-1)
            if len(cls) != n:
                raise AttributeLengthError(f"class_id has {len(cls)} entries, expected {n}")
            object.__setattr__(self, "class_id", _frozen(cls))
        if self.is_foreground is not None:
            fg = np.asarray(self.is_foreground, dtype=bool).reshape(-1)
            if len(fg) != n:
                raise AttributeLengthError(f"is_foreground has {len(fg)} entries, expected {n}")
            object.__setattr__(self, "is_foreground", _frozen(fg))
        object.__setattr__(self, "frame_index", int(self.frame_index))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def flag_mask(self) -> int:
        mask = 0
        if self.gt_flow is not None:
            mask |= HAS_GT_FLOW
        if self.class_id is not None:
            mask |= HAS_CLASS
        if self.is_foreground is not None:
            mask |= HAS_FG
        return mask

    def subset(self, idx) -> "TimedPointCloud":
        """Cloud restricted to ``idx`` (index array or boolean mask)."""
        def pick(a):
            return None if a is None else a[idx]

        return TimedPointCloud(
            points=self.points[idx],
            frame_index=self.frame_index,
            gt_flow=pick(self.gt_flow),
            class_id=pick(self.class_id),
            is_foreground=pick(self.is_foreground),
        )

    def with_points(self, points) -> "TimedPointCloud":
        return TimedPointCloud(
            points=points,
            frame_index=self.frame_index,
            gt_flow=self.gt_flow,
            class_id=self.class_id,
            is_foreground=self.is_foreground,
        )


def _read_exact(buf: memoryview, offset: int, nbytes: int, what: str) -> Tuple[memoryview, int]:
    if offset + nbytes > len(buf):
        raise TruncatedPayloadError(
            f"truncated payload while reading {what}: need {nbytes} bytes at offset {offset}, "
            f"file has {len(buf)}"
        )
    return buf[offset:offset + nbytes], offset + nbytes


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def save_cloud(path, cloud: TimedPointCloud) -> None:
    """Write ``cloud`` in the little-endian ``.lifc`` format (float32 payload)."""
    n = len(cloud)
    if not 0 <= cloud.frame_index < 2 ** 32:
        raise ValueError("frame_index does not fit the u32 header field")
    if cloud.class_id is not None and n and (cloud.class_id.min() < 0 or cloud.class_id.max() > 0xFFFF):
        raise ValueError("class ids must fit in u16")
    parts = [
        CLOUD_MAGIC,
        struct.pack("<IIII", FORMAT_VERSION, n, cloud.frame_index, cloud.flag_mask),
        cloud.points.astype("<f4").tobytes(),
    ]
    if cloud.gt_flow is not None:
        parts.append(cloud.gt_flow.astype("<f4").tobytes())
    if cloud.class_id is not None:
        parts.append(cloud.class_id.astype("<u2").tobytes())
    if cloud.is_foreground is not None:
        parts.append(cloud.is_foreground.astype("u1").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _parse_lifc(data: bytes) -> TimedPointCloud:
    buf = memoryview(data)
    magic, off = _read_exact(buf, 0, 4, "magic")
    if bytes(magic) != CLOUD_MAGIC:
        raise MagicMismatchError(f"bad magic {bytes(magic)!r}, expected {CLOUD_MAGIC!r}")
    header, off = _read_exact(buf, off, 16, "header")
    version, n, frame_index, mask = struct.unpack("<IIII", header)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    raw, off = _read_exact(buf, off, 12 * n, "positions")
    points = np.frombuffer(raw, dtype="<f4").reshape(n, 3).astype(np.float64)
    gt_flow = class_id = fg = None
    if mask & HAS_GT_FLOW:
        raw, off = _read_exact(buf, off, 12 * n, "gt flow")
        gt_flow = np.frombuffer(raw, dtype="<f4").reshape(n, 3).astype(np.float64)
    if mask & HAS_CLASS:
        raw, off = _read_exact(buf, off, 2 * n, "class ids")
        class_id = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    if mask & HAS_FG:
        raw, off = _read_exact(buf, off, n, "foreground flags")
        fg = np.frombuffer(raw, dtype="u1").astype(bool)
    if off != len(buf):
        raise AttributeLengthError(f"{len(buf) - off} trailing bytes after payload")
    return TimedPointCloud(points, frame_index, gt_flow, class_id, fg)


def _parse_ascii(text: str) -> TimedPointCloud:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise CloudFormatError(f"line {lineno}: expected 3 values, got {len(fields)}")
        try:
            rows.append([float(v) for v in fields])
        except ValueError as exc:
            raise CloudFormatError(f"line {lineno}: {exc}") from exc
    return TimedPointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def load_cloud(path, format: str = "binary") -> TimedPointCloud:
    """Read a cloud stored as ``binary`` (``.lifc``) or ``ascii-xyz``."""
    data = _read_bytes(path)
    if format == "binary":
        return _parse_lifc(data)
    if format in ("ascii", "ascii-xyz"):
        return _parse_ascii(data.decode("ascii"))
    raise ValueError(f"unknown cloud format {format!r}")


def save_flow(path, flow, labels=None) -> None:
    """Write a flow field (and optional cluster labels) in the ``.liff`` format."""
    vec = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    n = len(vec)
    mask = 0
    if labels is not None:
        lab = np.asarray(getattr(labels, "labels", labels)).reshape(-1)
        if len(lab) != n:
            raise AttributeLengthError(f"{len(lab)} labels for {n} flow vectors")
        if np.any(lab < 0):
            raise ValueError("cluster labels must be non-negative")
        mask |= HAS_LABELS
    parts = [FLOW_MAGIC, struct.pack("<III", FORMAT_VERSION, n, mask), vec.astype("<f4").tobytes()]
    if labels is not None:
        parts.append(lab.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_flow(path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Read a ``.liff`` file, returning ``(vectors, labels_or_None)``."""
    buf = memoryview(_read_bytes(path))
    magic, off = _read_exact(buf, 0, 4, "magic")
    if bytes(magic) != FLOW_MAGIC:
        raise MagicMismatchError(f"bad magic {bytes(magic)!r}, expected {FLOW_MAGIC!r}")
    header, off = _read_exact(buf, off, 12, "header")
    version, n, mask = struct.unpack("<III", header)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    raw, off = _read_exact(buf, off, 12 * n, "vectors")
    vec = np.frombuffer(raw, dtype="<f4").reshape(n, 3).astype(np.float64)
    labels = None
    if mask & HAS_LABELS:
        raw, off = _read_exact(buf, off, 4 * n, "labels")
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    if off != len(buf):
        raise AttributeLengthError(f"{len(buf) - off} trailing bytes after payload")
    return vec, labels


def preprocess(cloud: TimedPointCloud, ground_height: float = 0.3, max_range: float = 35.0):
    """Drop ground points (``z <= ground_height``) and points beyond ``max_range``.

    The range is measured in the horizontal plane from the sensor origin.
    Returns the filtered cloud and the original indices of the kept points.
    """
    if not (np.isfinite(ground_height) and np.isfinite(max_range)) or max_range <= 0:
        raise ValueError("ground_height must be finite and max_range finite and positive")
    pts = cloud.points
    planar = np.hypot(pts[:, 0], pts[:, 1])
    keep = np.flatnonzero((pts[:, 2] > ground_height) & (planar <= max_range))
    return cloud.subset(keep), keep


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rotation plus translation, acting as ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("transform must be finite")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(trans))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from an axis-angle vector (radians) and a translation."""
        from scipy.spatial.transform import Rotation

        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(), translation)

    def apply(self, points) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        r = self.rotation
        # atan2 keeps full precision near 0 and pi, where arccos of the trace does not
        s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
        return float(np.arctan2(s, (np.trace(r) - 1.0) / 2.0))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m
