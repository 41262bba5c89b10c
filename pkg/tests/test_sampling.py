"""Distance transform against brute force; peak sampling rules."""

import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial import cKDTree

from boweltrack.errors import InfeasibleError, InvariantError
from boweltrack.phantom import SEG_LUMEN, PhantomSpec, generate_phantom
from boweltrack.sampling import MustPassSet, distance_transform, sample_must_pass
from boweltrack.supervoxel import LabelVolume
from boweltrack.volume_io import Volume


def brute_force_sq_dist(mask: np.ndarray, spacing) -> np.ndarray:
    """All-pairs squared distance to the nearest background voxel, with the
    volume border padded by one background layer."""
    sp = np.asarray(spacing, dtype=float)
    padded = np.pad(mask, 1)
    background = (np.argwhere(padded == 0) - 1) * sp
    out = np.zeros(mask.shape)
    for idx in np.argwhere(mask):
        delta = background - idx * sp
        out[tuple(idx)] = np.einsum("ij,ij->i", delta, delta).min()
    return out


def cone(center, height, coords):
    return np.maximum(0.0, height - np.linalg.norm(coords - center, axis=-1))


def unit_grid(dims, spacing=1.0):
    """Physical voxel-center coordinates, shape dims + (3,)."""
    axes = [(np.arange(n) + 0.5) * spacing for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def voxelwise_labels(dims, spacing):
    lab = np.arange(int(np.prod(dims)), dtype=np.int32).reshape(dims)
    lv = LabelVolume(lab, spacing, (0.0, 0.0, 0.0), lab.size)
    return lv, {i: i for i in range(lab.size)}


class TestDistanceTransform:
    def test_single_interior_voxel_anisotropic(self):
        mask = np.zeros((7, 7, 7), dtype=np.uint8)
        mask[3, 3, 3] = 1
        d = distance_transform(Volume(mask, (2.0, 3.0, 4.0), (0, 0, 0)))
        assert d.data[3, 3, 3] == pytest.approx(2.0)
        off = d.data.copy()
        off[3, 3, 3] = 0
        assert np.all(off == 0)

    def test_all_interior_cube_center_reaches_padding(self):
        d = distance_transform(
            Volume(np.ones((5, 5, 5), dtype=np.uint8), (2.0, 2.0, 2.0), (0, 0, 0))
        )
        assert d.data[2, 2, 2] == pytest.approx(6.0)
        assert d.data[0, 0, 0] == pytest.approx(2.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force_exactly(self, seed):
        rng = np.random.default_rng(seed)
        mask = (rng.random((12, 12, 12)) < 0.7).astype(np.uint8)
        mine = distance_transform(Volume(mask, (1.0, 1.0, 1.0), (0, 0, 0))).data ** 2
        ref = brute_force_sq_dist(mask, (1.0, 1.0, 1.0))
        assert np.array_equal(np.round(mine).astype(int), ref.astype(int))
        assert np.allclose(mine, ref, atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scipy_on_anisotropic_masks(self, seed):
        rng = np.random.default_rng(100 + seed)
        mask = (rng.random((10, 9, 8)) < 0.75).astype(np.uint8)
        sp = (1.5, 2.0, 0.7)
        mine = distance_transform(Volume(mask, sp, (0, 0, 0))).data
        ref = ndimage.distance_transform_edt(np.pad(mask, 1), sampling=sp)
        ref = ref[1:-1, 1:-1, 1:-1]
        ref[mask == 0] = 0
        assert np.allclose(mine, ref, atol=1e-9)

    def test_all_zero_mask_gives_zeros(self):
        d = distance_transform(
            Volume(np.zeros((6, 6, 6), dtype=np.uint8), (1.0, 1.0, 1.0), (0, 0, 0))
        )
        assert np.all(d.data == 0)

    def test_nonbinary_mask_rejected(self):
        bad = Volume(np.full((4, 4, 4), 3, dtype=np.uint8), (1, 1, 1), (0, 0, 0))
        with pytest.raises(ValueError, match="binary"):
            distance_transform(bad)


class TestPeakSampling:
    def test_single_bump_single_peak(self):
        dims = (15, 11, 11)
        coords = unit_grid(dims)
        center = np.array([7.5, 5.5, 5.5])
        data = cone(center, 5.0, coords)
        dist = Volume(data.astype(np.float64), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        lv, node_map = voxelwise_labels(dims, (1.0, 1.0, 1.0))
        mp = sample_must_pass(dist, lv, node_map, 3.0, 6.0)
        assert len(mp) == 1
        assert np.allclose(mp.positions[0], center)
        assert mp.values[0] == pytest.approx(5.0)

    def test_twin_bumps_suppressed_to_lexicographically_smaller(self):
        dims = (20, 9, 9)
        coords = unit_grid(dims)
        c_low = np.array([6.5, 4.5, 4.5])
        c_high = np.array([10.5, 4.5, 4.5])
        data = np.maximum(cone(c_low, 5.0, coords), cone(c_high, 5.0, coords))
        dist = Volume(data, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        lv, node_map = voxelwise_labels(dims, (1.0, 1.0, 1.0))
        mp = sample_must_pass(dist, lv, node_map, 3.0, 6.0)
        assert len(mp) == 1
        assert np.allclose(mp.positions[0], c_low)

    def test_straight_tube_peaks_hug_centerline(self):
        spec = PhantomSpec(
            dims=(64, 22, 22), inner_radius=6.0, bends=0, touch_pairs=0, seed=3
        )
        _, seg, path = generate_phantom(spec)
        interior = Volume((seg.data == SEG_LUMEN).astype(np.uint8), seg.spacing, seg.origin)
        dist = distance_transform(interior)
        lv, node_map = voxelwise_labels(seg.dims, seg.spacing)
        mp = sample_must_pass(dist, lv, node_map, 3.0, 6.0)
        assert len(mp) >= 5
        gap_to_gt, _ = cKDTree(path.points).query(mp.positions)
        assert gap_to_gt.max() <= np.sqrt(2) * max(spec.spacing) + 1e-9
        xs = np.sort(mp.positions[:, 0])
        assert np.all(np.diff(xs) >= 6.0 - 1e-9)
        assert np.all(np.diff(xs) <= 12.0 + 1e-9)

    def test_no_peaks_is_explicit_error(self):
        dims = (8, 8, 8)
        dist = Volume(np.full(dims, 0.5), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        lv, node_map = voxelwise_labels(dims, (1.0, 1.0, 1.0))
        with pytest.raises(InfeasibleError, match="theta_v"):
            sample_must_pass(dist, lv, node_map, 3.0, 6.0)

    def test_pruned_supervoxel_warns_and_drops(self):
        dims = (20, 9, 9)
        coords = unit_grid(dims)
        data = np.maximum(
            cone(np.array([4.5, 4.5, 4.5]), 5.0, coords),
            cone(np.array([14.5, 4.5, 4.5]), 4.0, coords),
        )
        dist = Volume(data, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        lab = (coords[..., 0] > 9.0).astype(np.int32)
        lv = LabelVolume(lab, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 2)
        with pytest.warns(UserWarning, match="masked-out"):
            mp = sample_must_pass(dist, lv, {1: 0}, 3.0, 6.0)
        assert mp.pruned_count == 1
        assert len(mp) == 1
        assert mp.positions[0][0] == pytest.approx(14.5)

    def test_all_peaks_pruned_is_explicit_error(self):
        dims = (15, 11, 11)
        coords = unit_grid(dims)
        data = cone(np.array([7.5, 5.5, 5.5]), 5.0, coords)
        dist = Volume(data, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        lab = np.zeros(dims, dtype=np.int32)
        lv = LabelVolume(lab, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1)
        with pytest.warns(UserWarning):
            with pytest.raises(InfeasibleError, match="masked-out"):
                sample_must_pass(dist, lv, {}, 3.0, 6.0)

    def test_same_supervoxel_peaks_collapse_keeping_highest(self):
        dims = (24, 9, 9)
        coords = unit_grid(dims)
        data = np.maximum(
            cone(np.array([6.5, 4.5, 4.5]), 4.0, coords),
            cone(np.array([16.5, 4.5, 4.5]), 5.0, coords),
        )
        dist = Volume(data, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        lab = np.zeros(dims, dtype=np.int32)
        lv = LabelVolume(lab, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1)
        mp = sample_must_pass(dist, lv, {0: 0}, 3.0, 6.0)
        assert len(mp) == 1
        assert mp.values[0] == pytest.approx(5.0)
        assert mp.positions[0][0] == pytest.approx(16.5)


class TestPeakInvariants:
    @pytest.mark.parametrize("seed", range(20))
    def test_separation_value_floor_determinism(self, seed):
        rng = np.random.default_rng(seed)
        mask = (rng.random((18, 18, 18)) < 0.8).astype(np.uint8)
        dist = distance_transform(Volume(mask, (1.5, 1.5, 1.5), (0, 0, 0)))
        lv, node_map = voxelwise_labels((18, 18, 18), (1.5, 1.5, 1.5))
        theta_v, theta_d = 1.6, 4.5
        mp = sample_must_pass(dist, lv, node_map, theta_v, theta_d)
        assert np.all(mp.values >= theta_v)
        if len(mp) > 1:
            gaps = mp.positions[:, None, :] - mp.positions[None, :, :]
            sq = np.einsum("ijk,ijk->ij", gaps, gaps)
            sq[np.diag_indices(len(mp))] = np.inf
            assert np.sqrt(sq.min()) >= theta_d - 1e-9
        again = sample_must_pass(dist, lv, node_map, theta_v, theta_d)
        assert np.array_equal(mp.node_ids, again.node_ids)
        assert np.array_equal(mp.positions, again.positions)

    def test_invalid_thetas_rejected(self):
        dims = (8, 8, 8)
        dist = Volume(np.ones(dims), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        lv, node_map = voxelwise_labels(dims, (1.0, 1.0, 1.0))
        with pytest.raises(ValueError, match="positive"):
            sample_must_pass(dist, lv, node_map, 0.0, 6.0)
        with pytest.raises(ValueError, match="positive"):
            sample_must_pass(dist, lv, node_map, 3.0, -1.0)

    def test_must_pass_set_rejects_duplicates(self):
        with pytest.raises(InvariantError, match="duplicate"):
            MustPassSet(
                node_ids=np.array([3, 3]),
                positions=np.zeros((2, 3)),
                values=np.ones(2),
            )

    def test_must_pass_set_rejects_empty(self):
        with pytest.raises(InvariantError, match="empty"):
            MustPassSet(
                node_ids=np.zeros(0, dtype=int),
                positions=np.zeros((0, 3)),
                values=np.zeros(0),
            )
