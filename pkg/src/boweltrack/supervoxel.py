"""Adaptive SLIC supervoxels over a scalar feature volume.

Clusters minimise D = d_feature + (m_i / step) * d_spatial with a per-cluster
adaptive compactness m_i: initialised from the `compactness` argument and
raised each iteration to the cluster's maximum observed feature distance, so
feature-flat clusters stay compact while boundary-hugging ones loosen.
Distances are physical (mm) which keeps the target volume spacing-independent.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import FormatError, InvariantError
from .volume_io import Volume, load_volume, save_volume

SLIC_ITERATIONS = 10
# Assignment windows extend this many grid steps from the cluster center;
# 1.5 covers every voxel even when axis extents round the seed grid down.
WINDOW_FACTOR = 1.5

# Half of the 26-neighbourhood: lexicographically positive offsets.
_HALF_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
]

_OFFSETS_26 = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    dtype=np.int64,
)


@dataclasses.dataclass
class LabelVolume:
    """Dense supervoxel labeling: every voxel holds a label in 0..N-1."""

    data: np.ndarray
    spacing: tuple
    origin: tuple
    label_count: int

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if self.data.ndim != 3:
            raise InvariantError(f"labels must be 3D, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise InvariantError(f"labels must be integer, got {self.data.dtype}")
        if self.label_count <= 0:
            raise InvariantError("label_count must be positive")
        counts = np.bincount(self.data.ravel(), minlength=self.label_count)
        if len(counts) > self.label_count:
            raise InvariantError(
                f"label {int(self.data.max())} outside 0..{self.label_count - 1}"
            )
        if np.any(counts == 0):
            missing = int(np.flatnonzero(counts == 0)[0])
            raise InvariantError(f"label {missing} has no voxels; labels must be contiguous")
        if self.data.min() < 0:
            raise InvariantError("negative label")

    @property
    def dims(self):
        return self.data.shape

    def member_counts(self) -> np.ndarray:
        return np.bincount(self.data.ravel(), minlength=self.label_count)


def save_label_volume(lv: LabelVolume, path) -> None:
    """Write labels via the raw volume format, u16 when N fits, else u32."""
    out_dtype = np.uint16 if lv.label_count <= 65536 else np.uint32
    save_volume(Volume(lv.data.astype(out_dtype), lv.spacing, lv.origin), path)


def load_label_volume(path) -> LabelVolume:
    vol = load_volume(path)
    if not np.issubdtype(vol.data.dtype, np.integer):
        raise FormatError(f"{path}: label volume must hold integers, got {vol.data.dtype}")
    data = vol.data.astype(np.int32)
    try:
        return LabelVolume(data, vol.spacing, vol.origin, int(data.max()) + 1)
    except InvariantError as exc:
        raise FormatError(f"{path}: invalid label volume: {exc}") from exc


def _seed_grid(feature: Volume, step: float):
    """Regular seed grid (mm centers), perturbed to the 3^3 lowest-gradient
    voxel; returns (voxel indices (k,3), spatial centers (k,3) mm)."""
    dims = np.asarray(feature.dims)
    sp = np.asarray(feature.spacing)
    extent = dims * sp
    if np.any(extent < step):
        bad = int(np.argmin(extent - step))
        raise ValueError(
            f"axis {bad} extent {extent[bad]:.1f}mm is smaller than one grid step "
            f"{step:.1f}mm; reduce target_volume or supply a larger volume"
        )
    counts = [max(1, int(round(extent[a] / step))) for a in range(3)]
    axes = [(np.arange(n) + 0.5) * (extent[a] / n) for a, n in enumerate(counts)]

    grads = np.gradient(feature.data.astype(np.float64), *sp)
    grad_mag = grads[0] ** 2 + grads[1] ** 2 + grads[2] ** 2

    seeds = []
    for cx in axes[0]:
        for cy in axes[1]:
            for cz in axes[2]:
                idx = np.minimum((np.array([cx, cy, cz]) / sp).astype(int), dims - 1)
                lo = np.maximum(idx - 1, 0)
                hi = np.minimum(idx + 2, dims)
                block = grad_mag[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
                off = np.unravel_index(int(np.argmin(block)), block.shape)
                seeds.append(lo + np.asarray(off))
    seeds = np.asarray(seeds, dtype=np.int64)
    centers = (seeds + 0.5) * sp
    return seeds, centers


def _same_label_components(labels: np.ndarray):
    """26-connected components of the labeling (two voxels join a component
    iff adjacent and equally labeled).  Returns (comp map, comp count)."""
    n_vox = labels.size
    lin = np.arange(n_vox, dtype=np.int64).reshape(labels.shape)
    rows, cols = [], []
    for off in _HALF_OFFSETS:
        src = tuple(
            slice(max(0, -o), n - max(0, o)) for o, n in zip(off, labels.shape)
        )
        dst = tuple(
            slice(max(0, o), n - max(0, -o)) for o, n in zip(off, labels.shape)
        )
        same = labels[src] == labels[dst]
        rows.append(lin[src][same].ravel())
        cols.append(lin[dst][same].ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = sparse.coo_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n_vox, n_vox)
    )
    n_comp, comp = connected_components(graph, directed=False)
    return comp.reshape(labels.shape), n_comp


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each label's largest 26-connected component; every other fragment
    joins the largest 26-adjacent already-kept region (ties to lower label)."""
    comp, n_comp = _same_label_components(labels)
    flat_comp = comp.ravel()
    comp_size = np.bincount(flat_comp, minlength=n_comp)
    comp_label = np.zeros(n_comp, dtype=np.int64)
    comp_label[flat_comp] = labels.ravel()

    # Main component per label: largest, ties to the lowest component id.
    order = np.lexsort((np.arange(n_comp), -comp_size, comp_label))
    sorted_labels = comp_label[order]
    first = np.ones(n_comp, dtype=bool)
    first[1:] = sorted_labels[1:] != sorted_labels[:-1]
    is_main = np.zeros(n_comp, dtype=bool)
    is_main[order[first]] = True

    final = np.where(is_main[comp], labels, -1).astype(np.int64)
    n_labels = int(labels.max()) + 1
    flat_final = final.ravel()
    label_sizes = np.bincount(flat_final[flat_final >= 0], minlength=n_labels)

    voxel_order = np.argsort(flat_comp, kind="stable")
    starts = np.searchsorted(flat_comp[voxel_order], np.arange(n_comp + 1))
    fragments = []
    for c in np.flatnonzero(~is_main):
        lin_idx = voxel_order[starts[c] : starts[c + 1]]
        fragments.append(np.stack(np.unravel_index(lin_idx, labels.shape), axis=1))

    # Orphans attach to the largest adjacent assigned cluster (ties to the
    # lower label id); loop until all are placed.  Progress is guaranteed
    # because every fragment chain ends at some label's kept main component.
    # Sizes are frozen at the pre-merge main-component sizes: re-measuring
    # after each merge lets early winners soak up every later fragment and
    # chains distant fragments into one sprawling label.
    pending = fragments
    dims = np.asarray(labels.shape)
    while pending:
        deferred = []
        progressed = False
        for coords in pending:
            shifted = coords[:, None, :] + _OFFSETS_26[None, :, :]
            ok = np.all((shifted >= 0) & (shifted < dims), axis=2)
            pts = shifted[ok]
            vals = final[pts[:, 0], pts[:, 1], pts[:, 2]]
            vals = vals[vals >= 0]
            if vals.size == 0:
                deferred.append(coords)
                continue
            cand = np.unique(vals)
            best = int(cand[np.lexsort((cand, -label_sizes[cand]))[0]])
            final[coords[:, 0], coords[:, 1], coords[:, 2]] = best
            progressed = True
        if not progressed and deferred:
            raise InvariantError("connectivity enforcement failed to converge")
        pending = deferred
    return final


def slic_supervoxels(feature: Volume, target_volume: float, compactness: float) -> LabelVolume:
    """Partition a feature volume into compact supervoxels of roughly
    target_volume mm^3 each.  Deterministic: ties go to the lower label id."""
    if not (target_volume > 0) or target_volume < 8.0 * feature.voxel_volume():
        raise ValueError(
            f"target_volume {target_volume} must be at least 8 voxels "
            f"({8.0 * feature.voxel_volume():.1f} mm^3)"
        )
    if not (compactness > 0):
        raise ValueError(f"compactness must be positive, got {compactness}")

    step = target_volume ** (1.0 / 3.0)
    dims = feature.dims
    sp = np.asarray(feature.spacing)
    feat = feature.data.astype(np.float64)
    axis_pos = [(np.arange(dims[a]) + 0.5) * sp[a] for a in range(3)]

    seeds, centers = _seed_grid(feature, step)
    n_clusters = len(seeds)
    cluster_feat = feat[seeds[:, 0], seeds[:, 1], seeds[:, 2]].copy()
    cluster_m = np.full(n_clusters, float(compactness))

    window = WINDOW_FACTOR * step
    best_label = np.empty(dims, dtype=np.int64)
    best_dist = np.empty(dims, dtype=np.float64)
    win_dfeat = np.empty(dims, dtype=np.float64)

    for _ in range(SLIC_ITERATIONS):
        best_label.fill(-1)
        best_dist.fill(np.inf)
        win_dfeat.fill(0.0)
        for i in range(n_clusters):
            c = centers[i]
            lo = [int(np.searchsorted(axis_pos[a], c[a] - window)) for a in range(3)]
            hi = [int(np.searchsorted(axis_pos[a], c[a] + window, side="right")) for a in range(3)]
            if any(lo[a] >= hi[a] for a in range(3)):
                continue
            region = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
            df = np.abs(feat[region] - cluster_feat[i])
            dx2 = (axis_pos[0][region[0]] - c[0]) ** 2
            dy2 = (axis_pos[1][region[1]] - c[1]) ** 2
            dz2 = (axis_pos[2][region[2]] - c[2]) ** 2
            ds = np.sqrt(dx2[:, None, None] + dy2[None, :, None] + dz2[None, None, :])
            dist = df + (cluster_m[i] / step) * ds
            better = dist < best_dist[region]
            if better.any():
                best_dist[region][better] = dist[better]
                best_label[region][better] = i
                win_dfeat[region][better] = df[better]

        stray = best_label < 0
        if stray.any():
            coords = np.argwhere(stray)
            pos = (coords + 0.5) * sp
            fval = feat[stray]
            for lo_i in range(0, len(coords), 4096):
                sl = slice(lo_i, lo_i + 4096)
                ds = np.linalg.norm(pos[sl, None, :] - centers[None, :, :], axis=2)
                df = np.abs(fval[sl, None] - cluster_feat[None, :])
                dist = df + (cluster_m[None, :] / step) * ds
                winner = np.argmin(dist, axis=1)
                rows = np.arange(dist.shape[0])
                best_label[tuple(coords[sl].T)] = winner
                win_dfeat[tuple(coords[sl].T)] = df[rows, winner]

        flat = best_label.ravel()
        counts = np.bincount(flat, minlength=n_clusters).astype(np.float64)
        occupied = counts > 0
        sums = np.empty((3, n_clusters))
        for a in range(3):
            coord = np.broadcast_to(
                axis_pos[a][
                    (slice(None), None, None) if a == 0 else
                    (None, slice(None), None) if a == 1 else
                    (None, None, slice(None))
                ],
                dims,
            ).ravel()
            sums[a] = np.bincount(flat, weights=coord, minlength=n_clusters)
        fsums = np.bincount(flat, weights=feat.ravel(), minlength=n_clusters)
        centers[occupied] = (sums[:, occupied] / counts[occupied]).T
        cluster_feat[occupied] = fsums[occupied] / counts[occupied]
        max_df = np.zeros(n_clusters)
        np.maximum.at(max_df, flat, win_dfeat.ravel())
        cluster_m[occupied] = np.maximum(float(compactness), max_df[occupied])

    final = _enforce_connectivity(best_label)
    old = np.unique(final)
    remap = np.zeros(old.max() + 1, dtype=np.int64)
    remap[old] = np.arange(len(old))
    relabeled = remap[final]
    return LabelVolume(
        relabeled.astype(np.int32), feature.spacing, feature.origin, int(len(old))
    )
