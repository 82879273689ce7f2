import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_grid, random_pose
from occrefine.errors import MissingDataError
from occrefine.fusion import (
    FusionStats,
    SemanticPointCloud,
    VoteAccumulator,
    WindowFusion,
    devoxelize,
    fuse_window,
    transform_cloud,
    vote,
    voxelize_into,
)
from occrefine.geometry import Pose
from occrefine.synth import oracle_vote
from occrefine.voxel import GridSpec, VoxelGrid
from occrefine.weights import WeightProfile

SPEC = GridSpec((4, 4, 4), (0.0, 0.0, 0.0), (0.2, 0.2, 0.2))
seeds = st.integers(0, 2**32 - 1)


def one_voxel(idx, c, spec=SPEC):
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[idx] = c
    return VoxelGrid(spec, labels)


def test_devoxelize_examples():
    assert len(devoxelize(VoxelGrid.empty(SPEC))) == 0
    cloud = devoxelize(one_voxel((1, 0, 1), 3))
    np.testing.assert_allclose(cloud.xyz, [[0.3, 0.1, 0.3]], atol=1e-15)
    assert cloud.classes.tolist() == [3] and cloud.weights.tolist() == [1.0]


def test_devoxelize_rejects_invalid():
    labels = np.zeros(SPEC.dims, dtype=np.uint8)
    labels[0, 0, 0] = 255
    with pytest.raises(ValueError):
        devoxelize(VoxelGrid(SPEC, labels))


@given(seeds)
def test_devoxelize_cardinality(seed):
    g = random_grid(np.random.default_rng(seed), SPEC)
    assert len(devoxelize(g)) == int((g.labels > 0).sum())


def test_cloud_invariants():
    with pytest.raises(ValueError):
        SemanticPointCloud([[0, 0, 0]], [0], [1.0])
    with pytest.raises(ValueError):
        SemanticPointCloud([[0, 0, 0]], [1], [-1.0])


def test_transform_cloud_examples():
    cloud = SemanticPointCloud([[1.0, 0, 0], [0.5, 0.2, -0.1]], [2, 3], [1.0, 0.5])
    same = transform_cloud(cloud, Pose.identity())
    assert same.xyz.tobytes() == cloud.xyz.tobytes()
    up = transform_cloud(cloud, Pose.translation((0, 0, 1)))
    np.testing.assert_array_equal(up.xyz[:, 2], cloud.xyz[:, 2] + 1.0)
    turned = transform_cloud(cloud, Pose.rot_z(math.pi / 2))
    np.testing.assert_allclose(turned.xyz[0], [0, 1, 0], atol=1e-12)
    assert turned.classes.tolist() == [2, 3] and turned.weights.tolist() == [1.0, 0.5]


def test_voxelize_examples():
    acc = VoteAccumulator(SPEC)
    voxelize_into(acc, SemanticPointCloud([[0.1, 0.1, 0.1]], [4], [1.0]))
    assert acc.sums.reshape(-1, 19)[0, 3] == 1.0
    before = acc.sums.copy()
    voxelize_into(acc, SemanticPointCloud([[0.801, 0.1, 0.1]], [4], [1.0]))
    np.testing.assert_array_equal(acc.sums, before)
    assert acc.dropped == 1
    for _ in range(2):
        voxelize_into(acc, SemanticPointCloud([[0.3, 0.3, 0.3]], [3], [1.0]))
    assert acc.sums.reshape(4, 4, 4, 19)[1, 1, 1, 2] == 2.0


def test_voxelize_rejects_non_finite():
    with pytest.raises(ValueError):
        voxelize_into(VoteAccumulator(SPEC), SemanticPointCloud([[np.nan, 0, 0]], [1], [1.0]))


def dense_acc(rows):
    sums = np.zeros((SPEC.num_voxels, 19))
    for voxel, row in rows.items():
        for c, w in row.items():
            sums[voxel, c - 1] = w
    return VoteAccumulator.from_dense(SPEC, sums)


def test_vote_examples():
    g = vote(dense_acc({0: {3: 2.0, 5: 1.0}, 1: {3: 1.0, 5: 10.0}, 2: {7: 1.0, 4: 1.0}}))
    assert g.flat[:4].tolist() == [3, 5, 4, 0]


def test_vote_nan_is_internal_error():
    sums = np.zeros((SPEC.num_voxels, 19))
    sums[0, 0] = np.nan
    with pytest.raises(RuntimeError):
        vote(VoteAccumulator.from_dense(SPEC, sums))


@given(seeds, st.integers(1, 19), st.floats(0.0, 5.0))
def test_vote_monotone(seed, c, extra):
    rng = np.random.default_rng(seed)
    sums = np.where(rng.random((SPEC.num_voxels, 19)) < 0.2, rng.random((SPEC.num_voxels, 19)), 0.0)
    before = vote(VoteAccumulator.from_dense(SPEC, sums)).flat
    sums[before == c, c - 1] += extra
    after = vote(VoteAccumulator.from_dense(SPEC, sums)).flat
    assert np.all(after[before == c] == c)


@given(seeds)
def test_round_trip_identity(seed):
    g = random_grid(np.random.default_rng(seed), SPEC, occupancy=0.5)
    acc = voxelize_into(VoteAccumulator(SPEC), devoxelize(g), "uniform", Pose.identity())
    assert vote(acc) == g


def test_self_fusion_and_unanimity(rng):
    g = random_grid(rng, SPEC)
    assert fuse_window([(g, Pose.identity())], 0, n=0) == g
    assert fuse_window([(g, Pose.identity()), (g, Pose.identity())], 0, n=3) == g


def test_missing_pose_named():
    g = random_grid(np.random.default_rng(0), SPEC, frame_id=7)
    frames = [(g, Pose.identity()), (g.with_labels(g.labels), None)]
    with pytest.raises(MissingDataError, match="index 1"):
        fuse_window(frames, 0, n=1)
    with pytest.raises(MissingDataError):
        fuse_window([(g, None)], 0, n=0)


def test_window_truncated_at_ends(rng):
    frames = [(random_grid(rng, SPEC), Pose.identity()) for _ in range(5)]
    st_ = FusionStats()
    fuse_window(frames, 1, n=3, stats=st_)
    assert st_.window == (0, 4) and st_.frames_used == 5


@given(seeds)
def test_frame_order_independence(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec((5, 4, 3), (-0.5, -0.4, -0.3), (0.2, 0.2, 0.2))
    frames = [(random_grid(rng, spec), random_pose(rng, 0.2, 0.2)) for _ in range(4)]
    perm = rng.permutation(4)
    target = 0
    a = fuse_window(frames, target, n=5, profile="camera")
    shuffled = [frames[i] for i in perm]
    b = fuse_window(shuffled, int(np.flatnonzero(perm == target)[0]), n=5, profile="camera")
    assert a == b


@given(seeds, st.sampled_from(["uniform", "camera", "lidar"]))
def test_matches_oracle(seed, mode):
    rng = np.random.default_rng(seed)
    spec = GridSpec(tuple(rng.integers(2, 7, size=3)), tuple(rng.uniform(-1, 0, size=3)), (0.2, 0.25, 0.3))
    nf = int(rng.integers(1, 5))
    grids = [random_grid(rng, spec) for _ in range(nf)]
    poses = [random_pose(rng, 0.3, 0.3) for _ in range(nf)]
    profile = WeightProfile(mode=mode, max_range=2.0)
    t = int(rng.integers(nf))
    assert fuse_window(list(zip(grids, poses)), t, 10, profile) == oracle_vote(grids, poses, t, profile)


@given(seeds)
def test_worker_count_is_invisible(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec((9, 5, 4), (-0.9, -0.5, -0.4), (0.2, 0.2, 0.2))
    frames = [(random_grid(rng, spec), random_pose(rng, 0.2, 0.4)) for _ in range(5)]
    ref = fuse_window(frames, 2, 3, "lidar", n_jobs=1)
    for jobs in (2, 3, 8):
        assert fuse_window(frames, 2, 3, "lidar", n_jobs=jobs).labels.tobytes() == ref.labels.tobytes()


def test_float32_accumulation_option(rng):
    frames = [(random_grid(rng, SPEC), Pose.identity()) for _ in range(3)]
    a = fuse_window(frames, 0, 2, "uniform", dtype=np.float32)
    assert a == fuse_window(frames, 0, 2, "uniform")


def test_sensor_weights_taken_in_source_frame():
    # a far voxel of frame 0 lands next to frame 1's sensor; its weight stays the far one
    spec = GridSpec((200, 3, 3), (0.0, -0.3, -0.3), (0.2, 0.2, 0.2))
    far, near = np.zeros(spec.dims, np.uint8), np.zeros(spec.dims, np.uint8)
    far[195, 1, 1] = 9
    near[45, 1, 1] = 13
    shifted = Pose.translation((30.0, 0, 0))
    frames = [(VoxelGrid(spec, far), Pose.identity()), (VoxelGrid(spec, near), shifted)]
    # weighed in the target frame both votes would tie and class 9 would win
    out = fuse_window(frames, 1, 1, "lidar")
    assert out.labels[45, 1, 1] == 13


def test_window_fusion_estimator(rng):
    grids = [random_grid(rng, SPEC, frame_id=i) for i in range(4)]
    poses = [Pose.identity()] * 4
    est = WindowFusion(n_radius=1, profile="uniform", n_jobs=2)
    assert est.get_params()["n_radius"] == 1
    out = est.fit(grids, poses=poses).transform(grids)
    assert len(out) == 4 and len(est.stats_) == 4
    assert out[1] == fuse_window(list(zip(grids, poses)), 1, 1, "uniform")
    with pytest.raises(ValueError):
        WindowFusion().fit(grids)
    with pytest.raises(ValueError):
        est.transform(grids[:2])
