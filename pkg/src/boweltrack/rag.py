"""Region adjacency graph over supervoxels with wall-crossing edge costs.

Nodes are supervoxels (centroid + voxel count); an edge exists iff two
supervoxels share at least one voxel face (6-connectivity), and its cost is
the mean wall-map value over that shared boundary, each face valued by the
average of its two incident voxels.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import FormatError, InfeasibleError, InvariantError
from .supervoxel import LabelVolume
from .volume_io import Volume, _atomic_write_bytes


@dataclasses.dataclass
class Rag:
    """Symmetric weighted graph; edges stored once with edge_i < edge_j."""

    node_ids: np.ndarray      # original supervoxel id per node index
    centroids: np.ndarray     # (n, 3) physical mm
    counts: np.ndarray        # voxels per node
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_cost: np.ndarray
    edge_faces: np.ndarray
    _adj: tuple | None = dataclasses.field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.node_ids)
        if self.centroids.shape != (n, 3) or len(self.counts) != n:
            raise InvariantError("node arrays disagree on node count")
        if np.any(self.edge_i == self.edge_j):
            raise InvariantError("self-edge")
        if np.any(self.edge_i > self.edge_j):
            raise InvariantError("edges must be stored with i < j")
        if len(self.edge_i) and (self.edge_i.min() < 0 or self.edge_j.max() >= n):
            raise InvariantError("edge endpoint outside node range")
        if np.any(~np.isfinite(self.edge_cost)) or np.any(self.edge_cost < 0):
            raise InvariantError("edge costs must be finite and non-negative")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_i)

    def adjacency(self):
        """CSR-style (indptr, neighbor, cost) over both edge directions."""
        if self._adj is None:
            src = np.concatenate([self.edge_i, self.edge_j])
            dst = np.concatenate([self.edge_j, self.edge_i])
            cost = np.concatenate([self.edge_cost, self.edge_cost])
            order = np.lexsort((dst, src))
            src, dst, cost = src[order], dst[order], cost[order]
            indptr = np.searchsorted(src, np.arange(self.n_nodes + 1))
            self._adj = (indptr, dst, cost)
        return self._adj

    def neighbors(self, node: int):
        indptr, dst, cost = self.adjacency()
        sl = slice(indptr[node], indptr[node + 1])
        return dst[sl], cost[sl]

    def edge_lookup(self) -> dict:
        return {
            (int(i), int(j)): (float(c), int(f))
            for i, j, c, f in zip(self.edge_i, self.edge_j, self.edge_cost, self.edge_faces)
        }


def build_rag(labels: LabelVolume, wall_map: Volume) -> Rag:
    """Accumulate boundary faces between 6-adjacent differently-labeled voxels."""
    if labels.dims != wall_map.dims:
        raise ValueError(f"labels dims {labels.dims} != wall map dims {wall_map.dims}")
    if not np.allclose(labels.spacing, wall_map.spacing):
        raise ValueError(
            f"labels spacing {labels.spacing} != wall map spacing {tuple(wall_map.spacing)}"
        )

    lab = labels.data
    wall = wall_map.data.astype(np.float64)
    n = labels.label_count

    keys = []
    vals = []
    for axis in range(3):
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        src[axis] = slice(None, -1)
        dst[axis] = slice(1, None)
        a = lab[tuple(src)]
        b = lab[tuple(dst)]
        diff = a != b
        if not diff.any():
            continue
        lo = np.minimum(a[diff], b[diff]).astype(np.int64)
        hi = np.maximum(a[diff], b[diff]).astype(np.int64)
        face_val = 0.5 * (wall[tuple(src)][diff] + wall[tuple(dst)][diff])
        keys.append(lo * n + hi)
        vals.append(face_val)

    if keys:
        keys = np.concatenate(keys)
        vals = np.concatenate(vals)
        uniq, inverse = np.unique(keys, return_inverse=True)
        faces = np.bincount(inverse, minlength=len(uniq))
        sums = np.bincount(inverse, weights=vals, minlength=len(uniq))
        edge_i = (uniq // n).astype(np.int64)
        edge_j = (uniq % n).astype(np.int64)
        edge_cost = sums / faces
        edge_faces = faces.astype(np.int64)
    else:
        edge_i = np.zeros(0, dtype=np.int64)
        edge_j = np.zeros(0, dtype=np.int64)
        edge_cost = np.zeros(0, dtype=np.float64)
        edge_faces = np.zeros(0, dtype=np.int64)

    flat = lab.ravel()
    counts = np.bincount(flat, minlength=n).astype(np.int64)
    sp = np.asarray(labels.spacing)
    orig = np.asarray(labels.origin)
    centroids = np.empty((n, 3))
    for axis in range(3):
        pos = orig[axis] + (np.arange(labels.dims[axis]) + 0.5) * sp[axis]
        shape = [1, 1, 1]
        shape[axis] = labels.dims[axis]
        coord = np.broadcast_to(pos.reshape(shape), labels.dims).ravel()
        centroids[:, axis] = np.bincount(flat, weights=coord, minlength=n) / counts

    return Rag(
        node_ids=np.arange(n, dtype=np.int64),
        centroids=centroids,
        counts=counts,
        edge_i=edge_i,
        edge_j=edge_j,
        edge_cost=edge_cost,
        edge_faces=edge_faces,
    )


def mask_nodes(
    rag: Rag, segmentation: Volume, labels: LabelVolume, min_inside_fraction: float = 0.5
) -> Rag:
    """Drop nodes mostly outside the mask; surviving nodes are re-indexed and
    keep their original supervoxel ids in node_ids."""
    if segmentation.dims != labels.dims:
        raise ValueError(
            f"segmentation dims {segmentation.dims} != labels dims {labels.dims}"
        )
    seg = segmentation.data
    values = np.unique(seg)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"segmentation must be binary, found values {values[:5]}")
    if not (0.0 < min_inside_fraction <= 1.0):
        raise ValueError(f"min_inside_fraction must be in (0, 1], got {min_inside_fraction}")

    flat = labels.data.ravel()
    inside = np.bincount(flat, weights=(seg != 0).ravel().astype(np.float64),
                         minlength=labels.label_count)
    total = np.bincount(flat, minlength=labels.label_count).astype(np.float64)
    fraction = inside / total

    keep_label = fraction >= min_inside_fraction
    keep_node = keep_label[rag.node_ids]
    if not keep_node.any():
        raise InfeasibleError(
            "no graph nodes survive masking; segmentation and labels likely disagree"
        )

    remap = np.full(rag.n_nodes, -1, dtype=np.int64)
    remap[np.flatnonzero(keep_node)] = np.arange(int(keep_node.sum()))
    keep_edge = keep_node[rag.edge_i] & keep_node[rag.edge_j]
    return Rag(
        node_ids=rag.node_ids[keep_node].copy(),
        centroids=rag.centroids[keep_node].copy(),
        counts=rag.counts[keep_node].copy(),
        edge_i=remap[rag.edge_i[keep_edge]],
        edge_j=remap[rag.edge_j[keep_edge]],
        edge_cost=rag.edge_cost[keep_edge].copy(),
        edge_faces=rag.edge_faces[keep_edge].copy(),
    )


def save_rag(rag: Rag, path) -> None:
    lines = []
    for idx in range(rag.n_nodes):
        c = rag.centroids[idx]
        lines.append(
            f"node {rag.node_ids[idx]} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g} {rag.counts[idx]}"
        )
    for i, j, cost, faces in zip(rag.edge_i, rag.edge_j, rag.edge_cost, rag.edge_faces):
        lines.append(f"edge {rag.node_ids[i]} {rag.node_ids[j]} {cost:.17g} {faces}")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def load_rag(path) -> Rag:
    node_ids, centroids, counts = [], [], []
    raw_edges = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "node" and len(tokens) == 6:
                node_ids.append(int(tokens[1]))
                centroids.append([float(t) for t in tokens[2:5]])
                counts.append(int(tokens[5]))
            elif tokens[0] == "edge" and len(tokens) == 5:
                raw_edges.append(
                    (int(tokens[1]), int(tokens[2]), float(tokens[3]), int(tokens[4]))
                )
            else:
                raise FormatError(f"{path}:{lineno}: unrecognized line {line.strip()!r}")
    if not node_ids:
        raise FormatError(f"{path}: no node lines")
    index_of = {nid: k for k, nid in enumerate(node_ids)}
    if len(index_of) != len(node_ids):
        raise FormatError(f"{path}: duplicate node id")
    try:
        edge_i = np.array([index_of[e[0]] for e in raw_edges], dtype=np.int64)
        edge_j = np.array([index_of[e[1]] for e in raw_edges], dtype=np.int64)
    except KeyError as exc:
        raise FormatError(f"{path}: edge references unknown node {exc}") from exc
    lo = np.minimum(edge_i, edge_j)
    hi = np.maximum(edge_i, edge_j)
    try:
        return Rag(
            node_ids=np.asarray(node_ids, dtype=np.int64),
            centroids=np.asarray(centroids, dtype=np.float64).reshape(-1, 3),
            counts=np.asarray(counts, dtype=np.int64),
            edge_i=lo,
            edge_j=hi,
            edge_cost=np.array([e[2] for e in raw_edges], dtype=np.float64),
            edge_faces=np.array([e[3] for e in raw_edges], dtype=np.int64),
        )
    except InvariantError as exc:
        raise FormatError(f"{path}: invalid graph: {exc}") from exc
