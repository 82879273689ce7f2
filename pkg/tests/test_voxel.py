import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occrefine.voxel import (
    DYNAMIC_CLASSES,
    SEMANTIC_KITTI_CLASSES,
    STATIC_CLASSES,
    GridSpec,
    VoxelGrid,
    class_id,
    index_to_linear,
    linear_to_index,
    points_to_indices,
    voxel_center,
    voxel_centers,
)

KITTI = GridSpec.semantic_kitti()


def test_default_spec():
    assert KITTI.dims == (256, 256, 32)
    assert KITTI.origin == (0.0, -25.6, -2.0)
    assert KITTI.voxel_size == (0.2, 0.2, 0.2)
    assert KITTI.num_voxels == 2_097_152


def test_class_taxonomy():
    assert len(SEMANTIC_KITTI_CLASSES) == 19
    assert class_id("car") == 1 and class_id("traffic-sign") == 19
    assert len(STATIC_CLASSES) == 11
    assert {SEMANTIC_KITTI_CLASSES[c - 1] for c in DYNAMIC_CLASSES} == {
        "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "bicyclist", "motorcyclist"}
    with pytest.raises(KeyError):
        class_id("sky")


@pytest.mark.parametrize("idx, expected", [((0, 0, 0), 0), ((0, 0, 1), 1), ((1, 0, 0), 8192)])
def test_index_to_linear_examples(idx, expected):
    assert index_to_linear(idx, KITTI) == expected


@pytest.mark.parametrize("idx, center", [
    ((0, 0, 0), (0.1, -25.5, -1.9)),
    ((255, 255, 31), (51.1, 25.5, 4.3)),
    ((128, 128, 16), (25.7, 0.1, 1.3)),
])
def test_voxel_center_examples(idx, center):
    np.testing.assert_allclose(voxel_center(idx, KITTI), center, atol=1e-12)


@pytest.mark.parametrize("bad", [(256, 0, 0), (0, -1, 0), (0, 0, 32)])
def test_out_of_range_index(bad):
    with pytest.raises(IndexError):
        index_to_linear(bad, KITTI)
    with pytest.raises(IndexError):
        voxel_center(bad, KITTI)


def test_linear_bijection_exhaustive():
    spec = GridSpec((3, 4, 5))
    offsets = [index_to_linear(linear_to_index(k, spec), spec) for k in range(spec.num_voxels)]
    assert offsets == list(range(spec.num_voxels))
    with pytest.raises(IndexError):
        linear_to_index(spec.num_voxels, spec)


dims = st.tuples(*(st.integers(1, 9),) * 3)


@given(dims, st.tuples(*(st.floats(-50, 50),) * 3), st.tuples(*(st.floats(0.05, 2.0),) * 3))
def test_center_quantizes_back_to_index(d, origin, size):
    spec = GridSpec(d, origin, size)
    centers = voxel_centers(spec).reshape(-1, 3)
    idx, inside = points_to_indices(centers, spec)
    assert inside.all()
    np.testing.assert_array_equal(idx, np.indices(d).reshape(3, -1).T)


def test_half_open_cells():
    spec = GridSpec((2, 2, 2), (0, 0, 0), (1, 1, 1))
    idx, inside = points_to_indices(np.array([[1.0, 0.0, 0.0], [2.0, 0.5, 0.5], [-1e-3, 0.5, 0.5]]), spec)
    assert inside.tolist() == [True, False, False]
    assert idx[0].tolist() == [1, 0, 0]


def test_invalid_specs():
    with pytest.raises(ValueError):
        GridSpec((0, 1, 1))
    with pytest.raises(ValueError):
        GridSpec((1, 1, 1), voxel_size=(0.2, 0.0, 0.2))


def test_grid_validation_and_immutability(small_spec):
    labels = np.zeros(small_spec.dims, dtype=np.uint8)
    labels[0, 0, 0] = 255
    g = VoxelGrid(small_spec, labels)
    assert g.has_invalid
    with pytest.raises(ValueError):
        g.labels[0, 0, 0] = 1
    labels[0, 0, 0] = 20
    with pytest.raises(ValueError):
        VoxelGrid(small_spec, labels)
    with pytest.raises(ValueError):
        VoxelGrid(small_spec, np.zeros(7))


def test_grid_owns_its_buffer(small_spec):
    labels = np.zeros(small_spec.dims, dtype=np.uint8)
    g = VoxelGrid(small_spec, labels)
    labels[1, 1, 1] = 3
    assert g.labels[1, 1, 1] == 0
    assert g.flat.shape == (small_spec.num_voxels,)


def test_kitti360_class_count():
    spec = GridSpec((2, 2, 2))
    labels = np.full((2, 2, 2), 18, dtype=np.uint8)
    assert VoxelGrid(spec, labels, num_classes=18).num_classes == 18
    with pytest.raises(ValueError):
        VoxelGrid(spec, labels + 1, num_classes=18)
