import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxelgeo.camera import (CameraIntrinsics, CameraPose, CameraView, check_rigid,
                             in_frustum, pixel_to_feature_index, project, project_points,
                             unproject)
from voxelgeo.errors import MalformedMatrixError, NonRigidPoseError, ShapeError


@pytest.fixture
def view():
    intr = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    return CameraView(intr, CameraPose(np.eye(4)), np.zeros((1, 100, 100)))


def rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


class TestProject:
    def test_principal_point(self, view):
        assert project((0, 0, 2), view) == (50.0, 50.0, 2.0)

    def test_offset_point(self, view):
        assert project((0.5, 0, 2), view) == pytest.approx((75.0, 50.0, 2.0), abs=1e-12)

    def test_behind(self, view):
        assert project((0, 0, -1), view) is None
        assert project((0, 0, 0), view) is None

    def test_vectorized_matches_scalar(self, view):
        pts = np.random.default_rng(0).normal(size=(20, 3)) + (0, 0, 3)
        u, v, lam = project_points(pts, view)
        for i, p in enumerate(pts):
            assert project(p, view) == pytest.approx((u[i], v[i], lam[i]))


class TestFrustum:
    def test_principal_axis(self, view):
        assert in_frustum((0, 0, 2), view)

    def test_behind(self, view):
        assert not in_frustum((0, 0, -2), view)

    def test_right_of_image(self, view):
        # u = 103 = width + 3
        assert not in_frustum((0.53 * 2, 0, 2), view)

    def test_edges_half_open(self, view):
        assert in_frustum((-0.5 * 2, -0.5 * 2, 2), view)  # u = v = 0
        assert not in_frustum((0.5 * 2, 0, 2), view)  # u = width


class TestFeatureIndex:
    def test_stride_one(self):
        assert pixel_to_feature_index(10.4, 20.6, 1, (48, 64)) == (21, 10)

    def test_stride_four(self):
        assert pixel_to_feature_index(10.4, 20.6, 4, (12, 16)) == (5, 3)

    def test_right_edge_clamped(self, view):
        assert pixel_to_feature_index(100.0, 10.0, view) == (10, 99)
        assert pixel_to_feature_index(99.9, 0.0, 4, (25, 25)) == (0, 24)

    def test_arrays(self):
        r, c = pixel_to_feature_index(np.array([0.0, 3.9]), np.array([1.4, 1.6]), 2, (5, 5))
        np.testing.assert_array_equal(r, [1, 1])
        np.testing.assert_array_equal(c, [0, 2])


class TestPoseAndIntrinsics:
    def test_reflection_rejected(self):
        T = np.diag([1.0, 1.0, -1.0, 1.0])
        with pytest.raises(NonRigidPoseError, match="det"):
            CameraPose(T)

    def test_non_orthonormal(self):
        T = np.eye(4)
        T[0, 0] = 1.01
        with pytest.raises(NonRigidPoseError):
            check_rigid(T)

    def test_bad_shape(self):
        with pytest.raises(MalformedMatrixError):
            check_rigid(np.eye(3))

    def test_intrinsics_validation(self):
        with pytest.raises(MalformedMatrixError):
            CameraIntrinsics(-1.0, 1.0, 1.0, 1.0, 4, 4)
        with pytest.raises(MalformedMatrixError):
            CameraIntrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)

    def test_from_matrix(self):
        K = [[30.0, 0, 16], [0, 31.0, 12], [0, 0, 1]]
        intr = CameraIntrinsics.from_matrix(K, 32, 24)
        np.testing.assert_array_equal(intr.K, K)
        with pytest.raises(MalformedMatrixError):
            CameraIntrinsics.from_matrix([[30.0, 1, 16], [0, 31.0, 12], [0, 0, 1]], 32, 24)

    def test_feature_stride_must_divide(self):
        intr = CameraIntrinsics(10.0, 10.0, 8.0, 6.0, 16, 12)
        assert CameraView(intr, CameraPose(np.eye(4)), np.zeros((2, 3, 4))).stride == 4
        with pytest.raises(ShapeError):
            CameraView(intr, CameraPose(np.eye(4)), np.zeros((2, 5, 5)))

    def test_look_at_centers_target(self):
        pose = CameraPose.look_at((3.0, 1.0, 2.0), (0.0, 0.0, 0.5))
        intr = CameraIntrinsics(40.0, 40.0, 32.0, 24.0, 64, 48)
        v = CameraView(intr, pose, np.zeros((1, 48, 64)))
        u, vv, lam = project((0.0, 0.0, 0.5), v)
        assert (u, vv) == pytest.approx((32.0, 24.0), abs=1e-9)
        np.testing.assert_allclose(pose.center, (3, 1, 2), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_unproject_round_trip(seed):
    rng = np.random.default_rng(seed)
    T = np.eye(4)
    T[:3, :3] = rotation(rng)
    T[:3, 3] = rng.normal(size=3)
    intr = CameraIntrinsics(30.0, 35.0, 16.0, 12.0, 32, 24)
    v = CameraView(intr, CameraPose(T), np.zeros((1, 24, 32)))
    u0, v0, lam0 = rng.uniform(0, 32), rng.uniform(0, 24), rng.uniform(0.1, 10)
    assert project(unproject(u0, v0, lam0, v), v) == pytest.approx((u0, v0, lam0), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    T = np.eye(4)
    T[:3, :3] = rotation(rng)
    T[:3, 3] = rng.normal(size=3)
    G = np.eye(4)
    G[:3, :3] = rotation(rng)
    G[:3, 3] = rng.normal(size=3)
    intr = CameraIntrinsics(30.0, 35.0, 16.0, 12.0, 32, 24)
    a = CameraView(intr, CameraPose(T), np.zeros((1, 24, 32)))
    b = CameraView(intr, CameraPose(T @ np.linalg.inv(G)), np.zeros((1, 24, 32)))
    pts = rng.normal(size=(10, 3))
    moved = pts @ G[:3, :3].T + G[:3, 3]
    for p, q in zip(project_points(pts, a), project_points(moved, b)):
        np.testing.assert_allclose(p, q, rtol=1e-9, atol=1e-9)
