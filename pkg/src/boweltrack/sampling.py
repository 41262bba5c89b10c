"""Must-pass node sampling: exact EDT of the bowel interior, then peaks.

The distance transform is the separable squared-distance algorithm: the first
axis pass reduces the binary mask to per-line nearest-zero distances by two
linear scans, and each remaining axis applies the exact parabolic
lower-envelope min-convolution.  The volume border counts as background (the
mask is implicitly zero-padded by one layer), so distances never exceed the
distance to the bounding box.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np
from scipy import ndimage

from .errors import InfeasibleError, InvariantError
from .supervoxel import LabelVolume
from .volume_io import Volume


def _lower_envelope_pass(rows: np.ndarray, w2: float) -> np.ndarray:
    """d[r, p] = min_q rows[r, q] + w2 * (p - q)^2, exactly, per row."""
    n_rows, n = rows.shape
    out = np.empty_like(rows)
    inf = float("inf")
    for r in range(n_rows):
        f = rows[r].tolist()
        v = [0] * n
        z = [-inf, inf] + [0.0] * (n - 1)
        k = 0
        for q in range(1, n):
            fq = f[q] + w2 * q * q
            vk = v[k]
            s = (fq - (f[vk] + w2 * vk * vk)) / (2.0 * w2 * (q - vk))
            while s <= z[k]:
                k -= 1
                vk = v[k]
                s = (fq - (f[vk] + w2 * vk * vk)) / (2.0 * w2 * (q - vk))
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = inf
        k = 0
        d = [0.0] * n
        for p in range(n):
            while z[k + 1] < p:
                k += 1
            vk = v[k]
            d[p] = w2 * (p - vk) * (p - vk) + f[vk]
        out[r] = d
    return out


def _nearest_zero_scan(mask_lines: np.ndarray) -> np.ndarray:
    """Per-line voxel distance to the nearest 0 along the last axis; lines are
    flanked by implicit zeros (one-layer padding)."""
    n_rows, n = mask_lines.shape
    dist = np.empty((n_rows, n), dtype=np.float64)
    run = np.full(n_rows, 1.0)
    for p in range(n):
        run = np.where(mask_lines[:, p], run, 0.0)
        dist[:, p] = run
        run += 1.0
    run = np.full(n_rows, 1.0)
    for p in range(n - 1, -1, -1):
        run = np.where(mask_lines[:, p], run, 0.0)
        dist[:, p] = np.minimum(dist[:, p], run)
        run += 1.0
    return dist


def distance_transform(interior: Volume) -> Volume:
    """Exact Euclidean distance (mm) to the nearest background voxel center,
    with everything outside the volume treated as background."""
    mask = interior.data
    values = np.unique(mask)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"interior mask must be binary, found values {values[:5]}")
    mask = mask.astype(bool)
    if not mask.any():
        return interior.like(np.zeros(interior.dims, dtype=np.float64))

    sp = np.asarray(interior.spacing, dtype=np.float64)

    # Axis 0: voxel distance to nearest zero (padding included), squared, in mm^2.
    moved = np.moveaxis(mask, 0, -1)
    lines = moved.reshape(-1, mask.shape[0])
    d = _nearest_zero_scan(lines) * sp[0]
    sq = (d * d).reshape(moved.shape)
    sq = np.moveaxis(sq, -1, 0)

    # Axes 1 and 2: parabolic envelope over finite squared distances.  The
    # implicit zero-padding contributes a parabola rooted one voxel outside
    # each end, folded in by extending the line with a zero at both ends.
    for axis in (1, 2):
        moved = np.moveaxis(sq, axis, -1)
        flat = moved.reshape(-1, sq.shape[axis])
        padded = np.zeros((flat.shape[0], flat.shape[1] + 2), dtype=np.float64)
        padded[:, 1:-1] = flat
        result = _lower_envelope_pass(padded, float(sp[axis] ** 2))[:, 1:-1]
        sq = np.moveaxis(result.reshape(moved.shape), -1, axis)

    out = np.sqrt(sq)
    out[~mask] = 0.0
    return interior.like(out)


@dataclasses.dataclass
class MustPassSet:
    """Peaks of the interior distance map, mapped to masked-graph node ids."""

    node_ids: np.ndarray       # distinct masked-Rag node indices
    positions: np.ndarray      # (k, 3) peak voxel centers, mm
    values: np.ndarray         # peak distance values, mm
    pruned_count: int = 0      # peaks dropped because their supervoxel was masked out

    def __post_init__(self):
        if len(self.node_ids) == 0:
            raise InvariantError("must-pass set is empty")
        if len(np.unique(self.node_ids)) != len(self.node_ids):
            raise InvariantError("duplicate must-pass node id")
        if self.positions.shape != (len(self.node_ids), 3):
            raise InvariantError("positions shape mismatch")

    def __len__(self):
        return len(self.node_ids)


def sample_must_pass(
    dist: Volume,
    labels: LabelVolume,
    node_map: dict,
    theta_v: float,
    theta_d: float,
) -> MustPassSet:
    """Greedy peak extraction: candidates are ball-radius-theta_d local maxima
    with value >= theta_v, accepted in descending value order (lexicographic
    voxel ties) while keeping every pair >= theta_d apart."""
    if not (theta_v > 0) or not (theta_d > 0):
        raise ValueError(f"theta_v and theta_d must be positive, got {theta_v}, {theta_d}")
    if dist.dims != labels.dims:
        raise ValueError(f"distance map dims {dist.dims} != labels dims {labels.dims}")

    sp = np.asarray(dist.spacing)
    radii = np.maximum(1, np.floor(theta_d / sp).astype(int))
    grids = np.meshgrid(*[np.arange(-r, r + 1) for r in radii], indexing="ij")
    ball = sum((g * s) ** 2 for g, s in zip(grids, sp)) <= theta_d**2

    data = dist.data
    local_max = data >= ndimage.maximum_filter(data, footprint=ball, mode="constant")
    candidates = np.argwhere(local_max & (data >= theta_v))
    if len(candidates) == 0:
        raise InfeasibleError(
            f"no distance peaks >= theta_v={theta_v} mm found; "
            "lower theta_v or check the interior mask"
        )
    values = data[tuple(candidates.T)]
    order = np.lexsort((candidates[:, 2], candidates[:, 1], candidates[:, 0], -values))
    candidates = candidates[order]
    values = values[order]

    accepted_pos = []
    accepted_vox = []
    theta_d_sq = theta_d**2
    for vox, val in zip(candidates, values):
        pos = (vox + 0.5) * sp + np.asarray(dist.origin)
        if accepted_pos:
            gaps = np.asarray(accepted_pos) - pos
            if (np.einsum("ij,ij->i", gaps, gaps) < theta_d_sq).any():
                continue
        accepted_pos.append(pos)
        accepted_vox.append(vox)

    node_ids, out_pos, out_val = [], [], []
    seen = set()
    pruned = 0
    for vox, pos in zip(accepted_vox, accepted_pos):
        sv = int(labels.data[tuple(vox)])
        node = node_map.get(sv)
        if node is None:
            pruned += 1
            continue
        if node in seen:
            continue
        seen.add(node)
        node_ids.append(node)
        out_pos.append(pos)
        out_val.append(float(data[tuple(vox)]))
    if pruned:
        warnings.warn(
            f"{pruned} distance peak(s) fell in masked-out supervoxels and were dropped",
            stacklevel=2,
        )
    if not node_ids:
        raise InfeasibleError(
            "every distance peak fell in a masked-out supervoxel; "
            "the segmentation and wall map likely disagree"
        )
    return MustPassSet(
        node_ids=np.asarray(node_ids, dtype=np.int64),
        positions=np.asarray(out_pos),
        values=np.asarray(out_val),
        pruned_count=pruned,
    )


def node_map_of(masked_rag) -> dict:
    """Supervoxel id -> masked node index, from a masked Rag."""
    return {int(sv): k for k, sv in enumerate(masked_rag.node_ids)}
