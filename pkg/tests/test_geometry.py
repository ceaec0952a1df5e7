import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

import oracles as O
from conftest import box, random_box
from orgsynth.geometry import (
    DegenerateCloud,
    EmptyCloud,
    GeometryError,
    OrientedBoundingBox,
    PointCloud,
    Pose,
    SpatialIndex,
    TooFewPoints,
    apply_pose,
    apply_pose_obb,
    boxes_intersect,
    compute_obb,
    delta_z,
    half_space_fraction,
    intersection_volume,
    intersection_volume_clipped,
    knn,
    left_direction,
    min_distance,
    overlap_xy,
    ransac_plane,
)


def unit_cube(x=0.5, y=0.5, z=0.5, yaw=0.0):
    return box([x, y, z], [1, 1, 1], yaw)


# -- compute_obb ----------------------------------------------------------------


def test_obb_of_unit_cube_corners():
    pts = O.SIGNS * 0.5 + 0.5
    obb = compute_obb(pts)
    assert np.allclose(obb.center, 0.5, atol=1e-12)
    assert np.allclose(obb.half_extents, 0.5, atol=1e-12)


def test_obb_recovers_rotation():
    # a cube's covariance is isotropic, so a 3 x 2 x 1 cuboid stands in for it
    t = math.radians(30)
    ref = box([1, 2, 0.5], [3, 2, 1], t)
    obb = compute_obb(O.corners(ref))
    for k in range(3):
        ang = math.degrees(math.acos(min(1.0, abs(obb.axes[k] @ ref.axes[k]))))
        assert ang < 1.0
    assert np.allclose(np.sort(obb.half_extents), np.sort(ref.half_extents), atol=1e-6)


def test_obb_long_axis_of_uniform_box():
    to_truth = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pts = rng.uniform([-1, -0.5, -0.5], [1, 0.5, 0.5], size=(1000, 3))
        obb = compute_obb(pts)
        vals, vecs = np.linalg.eig(np.cov(pts.T))  # independent dense solver
        long_axis = vecs[:, np.argmax(vals.real)].real
        assert math.degrees(math.acos(min(1.0, abs(obb.axes[0] @ long_axis)))) < 2.0
        to_truth.append(math.degrees(math.acos(min(1.0, abs(obb.axes[0][0])))))
    # 1000 samples leave about a degree of PCA noise against the true axis
    assert np.median(to_truth) < 2.0


def test_obb_contains_cloud_and_frame_conventions():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(500, 3)) * [2.0, 0.7, 0.3]
    obb = compute_obb(pts)
    assert np.all(obb.contains(pts, tol=1e-9))
    assert np.allclose(obb.axes @ obb.axes.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(obb.axes) > 0
    assert abs(obb.front[2]) < 1e-12 and abs(np.linalg.norm(obb.front) - 1) < 1e-12
    assert obb.up_normal[2] > 0


def test_obb_errors_and_flat_clouds():
    with pytest.raises(EmptyCloud):
        compute_obb(np.zeros((0, 3)))
    with pytest.raises(DegenerateCloud):
        compute_obb(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2.0]]))
    flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
    obb = compute_obb(flat)
    assert np.min(obb.half_extents) == pytest.approx(0.01)
    with pytest.raises(GeometryError):
        OrientedBoundingBox([0, 0, 0], [0, 1, 1], np.eye(3), [1, 0, 0], [0, 0, 1])


def test_obb_arrays_are_frozen():
    b = unit_cube()
    with pytest.raises(ValueError):
        b.center[0] = 3.0


# -- overlap_xy -------------------------------------------------------------------


def test_overlap_identical_and_offset():
    a = unit_cube()
    assert overlap_xy(a, a) == pytest.approx(1.0)
    assert overlap_xy(a, unit_cube(x=1.0)) == pytest.approx(0.5)
    assert overlap_xy(a, unit_cube(x=5.0)) == 0.0


def test_overlap_against_raster_oracle():
    rng = np.random.default_rng(11)
    for _ in range(5):
        a = random_box(rng, 0.4, size=(0.3, 1.5))
        b = random_box(rng, 0.4, size=(0.3, 1.5))
        assert abs(overlap_xy(a, b) - O.raster_overlap_xy(a, b)) <= 1e-3


def test_overlap_uses_smaller_footprint():
    big = box([0, 0, 0], [4, 4, 1])
    small = box([0.5, 0.5, 3], [1, 1, 1], 0.3)
    assert overlap_xy(big, small) == pytest.approx(1.0)
    assert overlap_xy(small, big) == pytest.approx(1.0)


# -- delta_z ----------------------------------------------------------------------


def test_delta_z_examples():
    assert delta_z(unit_cube(z=1.5), unit_cube()) == pytest.approx(0.0, abs=1e-12)
    a = box([0, 0, 1.7], [1, 1, 1])   # base at 1.2
    b = box([0, 0, 0.5], [1, 1, 1])   # top at 1.0
    assert delta_z(a, b) == pytest.approx(0.2)


def test_delta_z_matches_corner_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a, b = random_box(rng, 1.0), random_box(rng, 1.0)
        assert delta_z(a, b) == pytest.approx(O.delta_z(a, b), abs=1e-12)


# -- intersection_volume ------------------------------------------------------------


def test_intersection_trivial_cases():
    assert intersection_volume(unit_cube(), unit_cube(x=3)) == 0.0
    assert intersection_volume(unit_cube(), unit_cube()) == pytest.approx(1.0)
    assert intersection_volume(unit_cube(), unit_cube(x=1.0)) == pytest.approx(0.5)


def test_intersection_rotated_against_monte_carlo():
    rng = np.random.default_rng(12)
    done = 0
    while done < 5:
        a, b = random_box(rng, 0.3, (0.3, 1.2)), random_box(rng, 0.3, (0.3, 1.2))
        v = intersection_volume(a, b)
        if v < 1e-3:
            continue
        assert v == pytest.approx(O.mc_intersection_volume(a, b, seed=done), rel=0.02)
        done += 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_intersection_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng, 0.6), random_box(rng, 0.6)
    v = intersection_volume(a, b)
    assert v == pytest.approx(intersection_volume(b, a), abs=1e-9)
    assert v == pytest.approx(intersection_volume_clipped(a, b), abs=1e-9)
    assert 0.0 <= v <= min(a.volume, b.volume) + 1e-9
    if v > 1e-9:
        assert boxes_intersect(a, b)
    if not boxes_intersect(a, b):
        assert v == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_separating_axis_against_sampling(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng, 0.8), random_box(rng, 0.8)
    if boxes_intersect(a, b):
        return  # a miss by sampling proves nothing
    pts = O.corners(a)
    assert not np.any(O.inside(b, pts)) and not np.any(O.inside(a, O.corners(b)))
    assert O.box_distance(a, b) > 0


# -- min_distance --------------------------------------------------------------------


def test_min_distance_trivial():
    assert min_distance(unit_cube(), unit_cube(x=1.5)) == pytest.approx(0.0, abs=1e-12)
    assert min_distance(unit_cube(), unit_cube(x=2.5)) == pytest.approx(1.0)


def test_min_distance_against_surface_samples():
    rng = np.random.default_rng(21)
    from orgsynth.decompose import sample_box_surface

    for k in range(3):
        a, b = random_box(rng, 1.5), random_box(rng, 1.5)
        if boxes_intersect(a, b):
            continue
        pa = sample_box_surface(a, 10_000, seed=k).points
        pb = sample_box_surface(b, 10_000, seed=k + 100).points
        dense = cKDTree(pb).query(pa)[0].min()
        got = min_distance(a, b)
        assert got <= dense + 1e-12
        assert abs(got - dense) <= 1e-2  # sampling gap bound at 1e4 points per box
        assert got == pytest.approx(O.box_distance(a, b), abs=1e-6)


# -- half_space_fraction ---------------------------------------------------------------


def test_half_space_trivial():
    b = box([0, 0, 0.5], [1, 1, 1])      # front +x, left +y
    assert np.allclose(left_direction(b), [0, 1, 0])
    a_left = box([0, 3, 0.5], [1, 1, 1], 0.4)
    assert half_space_fraction(a_left, b, "left") == 1.0
    assert half_space_fraction(a_left, b, "right") == 0.0
    centred = box([2, 0, 0.5], [1, 0.6, 1], 0.0)
    assert half_space_fraction(centred, b, "left") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        half_space_fraction(a_left, b, "up")


def test_half_space_rotated_against_monte_carlo():
    rng = np.random.default_rng(8)
    for k in range(20):
        a, b = random_box(rng, 0.5), random_box(rng, 0.5)
        for side in ("left", "right"):
            assert abs(half_space_fraction(a, b, side) - O.mc_half_space_fraction(a, b, side, seed=k)) <= 0.02


# -- ransac_plane -----------------------------------------------------------------------


def test_ransac_exact_plane():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-1, 1, (100, 2)), np.zeros(100)]
    m = ransac_plane(pts, 50, 1e-6, 0)
    assert np.allclose(m.normal, [0, 0, 1]) and abs(m.offset) < 1e-12 and m.inlier_count == 100


def test_ransac_with_outliers_and_two_planes():
    rng = np.random.default_rng(1)
    plane = np.c_[rng.uniform(-1, 1, (900, 2)), rng.normal(0, 0.002, 900)]
    out = rng.uniform(-1, 1, (100, 3))
    m = ransac_plane(np.r_[plane, out], 200, 0.01, 1)
    rec = np.abs(m.distance(plane)) <= 0.01
    assert rec.mean() >= 0.99
    hi = np.c_[rng.uniform(-1, 1, (700, 2)), np.full(700, 1.0)]
    lo = np.c_[rng.uniform(-1, 1, (300, 2)), np.zeros(300)]
    m2 = ransac_plane(np.r_[lo, hi], 200, 0.01, 2)
    assert m2.offset == pytest.approx(1.0) and m2.inlier_count == 700
    with pytest.raises(TooFewPoints):
        ransac_plane(np.zeros((2, 3)), 10, 0.01, 0)


# -- knn ------------------------------------------------------------------------------------


def test_knn_examples():
    idx = SpatialIndex([[1.0, 2.0, 3.0]], ids=[42])
    assert knn(idx, [1.0, 2.0, 4.5], 1) == [(42, 1.5)]
    lattice = SpatialIndex(np.c_[np.arange(10.0), np.zeros(10), np.zeros(10)])
    assert sorted(i for i, _ in knn(lattice, [5.0, 0, 0], 3)) == [4, 5, 6]
    with pytest.raises(EmptyCloud):
        SpatialIndex(np.zeros((0, 3)))


def test_knn_matches_brute_force():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-5, 5, (1000, 3))
    idx = SpatialIndex(pts)
    for q in rng.uniform(-5, 5, (20, 3)):
        got = knn(idx, q, 10)
        ref = O.brute_knn(pts, q, 10)
        assert {i for i, _ in got} == {i for i, _ in ref}
        assert np.allclose([d for _, d in got], [d for _, d in ref])


# -- apply_pose ------------------------------------------------------------------------------


def _cloud(obb, n=50, seed=0):
    rng = np.random.default_rng(seed)
    local = rng.uniform(-1, 1, (n, 3)) * obb.half_extents
    pts = obb.center + local @ obb.axes
    return PointCloud(pts, None, np.tile([0.0, 0.0, 1.0], (n, 1)))


def test_identity_pose():
    obb = box([1, 2, 0.3], [1, 0.5, 0.6], 0.7)
    cloud = _cloud(obb)
    moved, mobb = apply_pose(cloud, obb, Pose(*obb.center, 0.0, 0.0))
    assert np.allclose(moved.points, cloud.points, atol=1e-9)
    assert mobb.allclose(obb, atol=1e-9)


def test_half_turn_on_cube():
    obb = box([0, 0, 0.5], [1, 1, 1])
    _, mobb = apply_pose(_cloud(obb), obb, Pose(0, 0, 0.5, math.pi, 0.0))
    assert np.allclose(np.sort(np.abs(O.corners(mobb)), axis=0), np.sort(np.abs(O.corners(obb)), axis=0))
    assert np.allclose(mobb.front, -obb.front)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2), st.floats(-3.1, 3.1), st.floats(-0.5, 0.5))
def test_pose_round_trip(x, y, z, theta, phi):
    obb = box([0.3, -0.2, 0.4], [1.2, 0.5, 0.8], 0.3)
    cloud = _cloud(obb)
    moved, mobb = apply_pose(cloud, obb, Pose(x, y, z, theta, phi))
    back, bobb = apply_pose(moved, mobb, Pose(*obb.center, -theta, -phi))
    assert np.allclose(back.points, cloud.points, atol=1e-6)
    assert np.allclose(back.normals, cloud.normals, atol=1e-6)
    assert bobb.allclose(obb, atol=1e-6)
    assert np.allclose(mobb.axes @ mobb.axes.T, np.eye(3), atol=1e-9)


def test_pose_obb_matches_cloud_motion():
    obb = box([0, 0, 0.5], [1, 0.4, 1], 0.2)
    cloud = _cloud(obb)
    moved, mobb = apply_pose(cloud, obb, Pose(3, 1, 0.7, 1.0, 0.15))
    assert np.all(mobb.contains(moved.points, tol=1e-9))
    assert mobb.allclose(apply_pose_obb(obb, Pose(3, 1, 0.7, 1.0, 0.15)))
