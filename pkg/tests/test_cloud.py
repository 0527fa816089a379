import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spreg.cloud import PointCloud, SpatialIndex, apply_transform, icp_refine, knn, morton_key, voxel_downsample
from spreg.errors import ParameterError, StateError
from spreg.transform import RigidTransform, rotation_error_deg


def morton_oracle(kx, ky, kz):
    code = 0
    for bit in range(21):
        code |= ((kx >> bit) & 1) << (3 * bit)
        code |= ((ky >> bit) & 1) << (3 * bit + 1)
        code |= ((kz >> bit) & 1) << (3 * bit + 2)
    return code


def voxel_oracle(points, size):
    groups = {}
    for p in points:
        key = tuple(int(v) for v in np.floor(p / size))
        groups.setdefault(key, []).append(p)
    return {k: np.mean(v, axis=0) for k, v in groups.items()}


def test_pointcloud_validation():
    with pytest.raises(ParameterError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ParameterError):
        PointCloud(np.zeros((3, 3)), np.zeros(2))
    pc = PointCloud(np.arange(6.0).reshape(2, 3), np.array([1.0, 2.0]))
    assert len(pc.subset([1])) == 1 and pc.subset([1]).attributes[0] == 2.0


def test_morton_matches_bit_interleave_oracle(rng):
    keys = rng.integers(-1000, 1000, size=(50, 3))
    codes = morton_key(keys)
    for k, c in zip(keys, codes):
        off = k + (1 << 20)
        assert int(c) == morton_oracle(*off)


def test_voxel_downsample_matches_oracle(rng):
    pts = rng.uniform(-3, 3, size=(400, 3))
    out = voxel_downsample(PointCloud(pts), 0.7)
    ref = voxel_oracle(pts, 0.7)
    assert len(out) == len(ref)
    for p in out.points:
        key = tuple(int(v) for v in np.floor(p / 0.7))
        assert np.allclose(p, ref[key], atol=1e-12)


def test_voxel_output_is_morton_ordered(rng):
    out = voxel_downsample(PointCloud(rng.uniform(-5, 5, size=(300, 3))), 1.0)
    codes = morton_key(np.floor(out.points / 1.0).astype(np.int64))
    assert np.all(np.diff(codes.astype(np.float64)) >= 0)


def test_voxel_attributes_averaged():
    pc = PointCloud(np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0, 0]]), np.array([1.0, 3.0, 7.0]))
    out = voxel_downsample(pc, 1.0)
    assert sorted(out.attributes.tolist()) == [2.0, 7.0]


@pytest.mark.parametrize("size", [0.0, -1.0])
def test_voxel_size_must_be_positive(size):
    with pytest.raises(ParameterError):
        voxel_downsample(PointCloud(np.zeros((2, 3))), size)


def brute_knn(points, q, k):
    d = np.linalg.norm(points - q, axis=1)
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order, d[order]


@given(arrays(np.float64, (40, 3), elements=st.floats(-10, 10)), st.integers(1, 45), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_knn_equals_brute_force(points, k, seed):
    index = SpatialIndex(points)
    q = np.random.default_rng(seed).uniform(-10, 10, 3)
    idx, dist = index.knn(q, k)
    ref_idx, ref_d = brute_knn(points, q, k)
    assert np.array_equal(idx, ref_idx)
    assert np.allclose(dist, ref_d, atol=0)


def test_knn_ties_prefer_lower_index():
    grid = np.array([[x, y, 0.0] for x in range(-2, 3) for y in range(-2, 3)], dtype=float)
    index = SpatialIndex(grid)
    idx, dist = index.knn([0.0, 0.0, 0.0], 5)
    assert dist[0] == 0.0
    assert list(idx[1:]) == sorted(idx[1:])
    pairs = knn(index, [0.0, 0.0, 0.0], 2)
    assert pairs[0] == (12, 0.0)


def test_duplicate_points_resolve_to_lower_index():
    pts = np.zeros((6, 3))
    idx, _ = SpatialIndex(pts).knn([0, 0, 0], 3)
    assert list(idx) == [0, 1, 2]


def test_empty_index_is_state_error():
    with pytest.raises(StateError):
        SpatialIndex(np.zeros((0, 3))).knn([0, 0, 0], 1)


def test_radius_neighbors_match_brute(rng):
    pts = rng.uniform(-2, 2, size=(200, 3))
    q = np.array([0.1, -0.2, 0.3])
    got = SpatialIndex(pts).radius_neighbors(q, 1.0)
    d = np.linalg.norm(pts - q, axis=1)
    ref = np.flatnonzero(d <= 1.0)
    ref = ref[np.lexsort((ref, d[ref]))]
    assert np.array_equal(got, ref)


def test_icp_recovers_small_perturbation(rng):
    pts = np.concatenate([
        rng.uniform([-5, -5, 0], [5, 5, 0.01], size=(800, 3)),
        rng.uniform([-5, -5, 0], [-4.9, 5, 3], size=(300, 3)),
        rng.uniform([-5, 4.9, 0], [5, 5, 3], size=(300, 3)),
    ])
    target = PointCloud(pts)
    true = RigidTransform.from_euler(0.01, -0.02, 0.05, [0.2, -0.1, 0.05])
    source = apply_transform(target, true.inverse())
    res = icp_refine(source, target, RigidTransform.identity(), max_iters=60, max_corr_dist=1.0)
    assert rotation_error_deg(res.transform.rotation, true.rotation) < 0.05
    assert np.linalg.norm(res.transform.translation - true.translation) < 0.01
    assert all(b <= a for a, b in zip(res.residuals, res.residuals[1:]))


def test_icp_without_correspondences_reports_no_progress():
    a = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
    b = PointCloud(a.points + 100.0)
    res = icp_refine(a, b, RigidTransform.identity(), max_corr_dist=1.0)
    assert res.no_progress and res.iterations == 0
    assert np.allclose(res.transform.as_matrix(), np.eye(4))
