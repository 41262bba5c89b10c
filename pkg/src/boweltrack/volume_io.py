"""Dense 3D scalar volumes and 3D polylines with physical coordinates.

File formats (shared by every pipeline stage):

* Volume: four ASCII header lines (``dims:``, ``spacing:``, ``origin:``,
  ``dtype:``), one blank line, then the raw little-endian voxel block in
  x-fastest order.
* Polyline: one ``x y z`` triple per line, decimal text, millimetres.

The single coordinate convention used everywhere: the physical position of
voxel index ``i`` along an axis is ``origin + (i + 0.5) * spacing``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvariantError

DTYPE_TAGS = {
    "f32": np.dtype("<f4"),
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "u32": np.dtype("<u4"),
}
_TAG_BY_KIND = {np.dtype(d.str.lstrip("<|")).name: tag for tag, d in DTYPE_TAGS.items()}


@dataclass
class Volume:
    """A dense 3D scalar grid with physical spacing and origin (mm).

    ``data`` is indexed ``data[x, y, z]``; serialization flattens it
    x-fastest regardless of the in-memory layout.
    """

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.data.ndim != 3:
            raise InvariantError(f"volume data must be 3D, got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise InvariantError(f"volume dims must be positive, got {self.data.shape}")
        if not np.all(np.isfinite(self.spacing)) or np.any(self.spacing <= 0):
            raise InvariantError(f"spacing must be positive and finite, got {self.spacing}")
        if not np.all(np.isfinite(self.origin)):
            raise InvariantError(f"origin must be finite, got {self.origin}")
        if self.data.dtype.kind == "f" and not np.all(np.isfinite(self.data)):
            raise InvariantError("volume data contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_centers(self, axis: int) -> np.ndarray:
        """Physical coordinates of voxel centers along one axis."""
        n = self.data.shape[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.spacing[axis]

    def index_to_physical(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return self.origin + (idx + 0.5) * self.spacing

    def physical_to_index(self, pos: np.ndarray) -> np.ndarray:
        """Continuous voxel index of a physical position (mm)."""
        pos = np.asarray(pos, dtype=np.float64)
        return (pos - self.origin) / self.spacing - 0.5

    def nearest_voxel(self, pos: np.ndarray) -> tuple[int, int, int]:
        """Index of the voxel whose cell contains ``pos``; raises if outside."""
        idx = np.floor((np.asarray(pos, np.float64) - self.origin) / self.spacing)
        if np.any(idx < 0) or np.any(idx >= self.dims):
            raise InvariantError(f"position {pos} is outside the volume grid")
        return tuple(int(v) for v in idx)

    def like(self, data: np.ndarray) -> "Volume":
        """New Volume sharing this one's spacing and origin."""
        return Volume(data, self.spacing.copy(), self.origin.copy())


@dataclass
class Polyline:
    """Ordered 3D point sequence in physical mm coordinates."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvariantError(f"polyline points must be (n, 3), got {self.points.shape}")
        if self.points.shape[0] < 2:
            raise InvariantError("polyline needs at least 2 points")
        if not np.all(np.isfinite(self.points)):
            raise InvariantError("polyline contains non-finite coordinates")
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(seg == 0):
            raise InvariantError("polyline has coincident consecutive points")

    def __len__(self) -> int:
        return self.points.shape[0]

    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    def cumulative_arc(self) -> np.ndarray:
        """Arc-length position of every point, starting at 0."""
        return np.concatenate([[0.0], np.cumsum(self.segment_lengths())])

    def arc_length(self) -> float:
        return float(self.segment_lengths().sum())


def _parse_header_line(line: bytes, key: str, count: int, conv) -> tuple:
    text = line.decode("ascii", errors="replace").strip()
    prefix = key + ":"
    if not text.startswith(prefix):
        raise FormatError(f"malformed header: expected '{key}:' line, got {text!r}")
    tokens = text[len(prefix):].split()
    if len(tokens) != count:
        raise FormatError(f"malformed header: '{key}' needs {count} values, got {len(tokens)}")
    try:
        return tuple(conv(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"malformed header: bad '{key}' value ({exc})") from exc


def load_volume(path) -> Volume:
    """Read a Volume from the header+raw format. See module docstring."""
    with open(path, "rb") as fh:
        dims = _parse_header_line(fh.readline(), "dims", 3, int)
        spacing = _parse_header_line(fh.readline(), "spacing", 3, float)
        origin = _parse_header_line(fh.readline(), "origin", 3, float)
        (tag,) = _parse_header_line(fh.readline(), "dtype", 1, str)
        blank = fh.readline()
        if blank.strip() != b"":
            raise FormatError("malformed header: missing blank separator line")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"malformed header: unknown dtype tag {tag!r}")
        if min(dims) < 1:
            raise FormatError(f"malformed header: non-positive dims {dims}")
        dtype = DTYPE_TAGS[tag]
        expected = int(np.prod(dims)) * dtype.itemsize
        raw = fh.read()
    if len(raw) != expected:
        raise FormatError(
            f"data length mismatch: expected {expected} bytes "
            f"({int(np.prod(dims))} values of {tag}), file holds {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))
    data = data.reshape(dims, order="F")
    return Volume(data, np.array(spacing), np.array(origin))


def save_volume(vol: Volume, path) -> None:
    """Write a Volume so that load_volume returns an identical one."""
    kind = vol.data.dtype.name
    if kind not in _TAG_BY_KIND:
        raise FormatError(
            f"unsupported volume dtype {vol.data.dtype}; supported: {sorted(_TAG_BY_KIND)}"
        )
    tag = _TAG_BY_KIND[kind]
    header = (
        "dims: {} {} {}\n".format(*vol.dims)
        + "spacing: {:.17g} {:.17g} {:.17g}\n".format(*vol.spacing)
        + "origin: {:.17g} {:.17g} {:.17g}\n".format(*vol.origin)
        + f"dtype: {tag}\n\n"
    )
    payload = np.ascontiguousarray(vol.data.astype(DTYPE_TAGS[tag])).tobytes(order="F")
    _atomic_write_bytes(path, header.encode("ascii") + payload)


def load_polyline(path) -> Polyline:
    """Read a Polyline from decimal 'x y z' lines."""
    points = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            tokens = text.split()
            if len(tokens) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(tokens)}")
            try:
                points.append([float(t) for t in tokens])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric token ({exc})") from exc
    if len(points) < 2:
        raise FormatError(f"{path}: polyline needs at least 2 points, found {len(points)}")
    return Polyline(np.array(points))


def save_polyline(line: Polyline, path) -> None:
    # %.17g round-trips float64 exactly, so reloading gives the same curve.
    text = "".join("%.17g %.17g %.17g\n" % tuple(p) for p in line.points)
    _atomic_write_bytes(path, text.encode("ascii"))


def _atomic_write_bytes(path, blob: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def resample_isotropic(vol: Volume, target_spacing: float, method: str = "linear") -> Volume:
    """Resample a volume onto an isotropic grid of the given spacing.

    Trilinear interpolation for intensities; ``method="nearest"`` for label
    and mask volumes where averaging is meaningless. Samples outside the
    input extent clamp to the border voxel, so constants are preserved and
    output values never leave the input range.
    """
    if not np.isfinite(target_spacing) or target_spacing <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if method not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation method {method!r}")
    t = float(target_spacing)
    if np.all(vol.spacing == t):
        return Volume(vol.data.copy(), vol.spacing.copy(), vol.origin.copy())

    in_dims = np.array(vol.dims)
    out_dims = np.ceil(in_dims * vol.spacing / t).astype(int)
    # Continuous input index of each output voxel center, per axis.
    axes = [
        ((np.arange(out_dims[a]) + 0.5) * t) / vol.spacing[a] - 0.5
        for a in range(3)
    ]
    if method == "nearest":
        idx = [np.clip(np.rint(g).astype(int), 0, in_dims[a] - 1) for a, g in enumerate(axes)]
        data = vol.data[np.ix_(*idx)]
        return Volume(data.copy(), np.full(3, t), vol.origin.copy())

    lo, w = [], []
    for a, g in enumerate(axes):
        if in_dims[a] == 1:
            lo.append(np.zeros(out_dims[a], dtype=int))
            w.append(np.zeros(out_dims[a]))
        else:
            i0 = np.clip(np.floor(g).astype(int), 0, in_dims[a] - 2)
            lo.append(i0)
            w.append(np.clip(g - i0, 0.0, 1.0))
    src = vol.data.astype(np.float64)
    hi = [np.minimum(lo[a] + 1, in_dims[a] - 1) for a in range(3)]

    def gather(ix, iy, iz):
        return src[np.ix_(ix, iy, iz)]

    wx = w[0][:, None, None]
    wy = w[1][None, :, None]
    wz = w[2][None, None, :]
    # Sequential lerp in the x0 + w*(x1 - x0) form: exact on constants.
    c00 = gather(lo[0], lo[1], lo[2])
    c00 += wz * (gather(lo[0], lo[1], hi[2]) - c00)
    c01 = gather(lo[0], hi[1], lo[2])
    c01 += wz * (gather(lo[0], hi[1], hi[2]) - c01)
    c10 = gather(hi[0], lo[1], lo[2])
    c10 += wz * (gather(hi[0], lo[1], hi[2]) - c10)
    c11 = gather(hi[0], hi[1], lo[2])
    c11 += wz * (gather(hi[0], hi[1], hi[2]) - c11)
    c0 = c00 + wy * (c01 - c00)
    c1 = c10 + wy * (c11 - c10)
    out = c0 + wx * (c1 - c0)
    np.clip(out, src.min(), src.max(), out=out)
    if vol.data.dtype.kind == "f":
        out = out.astype(vol.data.dtype)
    return Volume(out, np.full(3, t), vol.origin.copy())
