"""Camera projection and reprojection-error tests.

All analytic Jacobians are checked against central finite differences;
projection values against slow scalar re-implementations of each
distortion model.
"""

import numpy as np
import pytest

from viwin.camera import (
    CameraModel,
    CameraRig,
    MIN_DEPTH,
    pixel_weight,
    reprojection_error,
    reprojection_error_batch,
    reprojection_error_many,
    triangulate,
)
from viwin.geometry import Pose, pose_box_plus, quat_exp

from test_geometry import random_pose


def make_camera(distortion="none", coeffs=None):
    if coeffs is None:
        coeffs = np.zeros(4)
    return CameraModel(
        fu=460.0, fv=455.0, cu=367.0, cv=248.0, width=752, height=480,
        distortion=distortion, coeffs=coeffs,
    )


RADTAN = np.array([-0.29, 0.075, 2.0e-4, 1.8e-5])
EQUI = np.array([-0.012, 0.016, -0.021, 0.009])

ALL_MODELS = [
    ("none", np.zeros(4)),
    ("radtan", RADTAN),
    ("equidistant", EQUI),
]


def slow_distort(model, coeffs, x, y):
    """Scalar reference implementation of the distortion maps."""
    if model == "none":
        return x, y
    if model == "radtan":
        k1, k2, p1, p2 = coeffs
        r2 = x * x + y * y
        rad = 1.0 + k1 * r2 + k2 * r2 ** 2
        xd = x * rad + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        yd = y * rad + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        return xd, yd
    k1, k2, k3, k4 = coeffs
    r = np.hypot(x, y)
    if r < 1e-12:
        return x, y
    th = np.arctan(r)
    th_d = th * (1 + k1 * th ** 2 + k2 * th ** 4 + k3 * th ** 6 + k4 * th ** 8)
    return th_d / r * x, th_d / r * y


def sample_points(rng, n):
    """Camera-frame points across the usable field of view."""
    x = rng.uniform(-0.55, 0.55, n)
    y = rng.uniform(-0.45, 0.45, n)
    z = rng.uniform(0.3, 20.0, n)
    return np.stack([x * z, y * z, z], axis=-1)


class TestProjection:
    def test_principal_point(self):
        cam = make_camera()
        cam = CameraModel(fu=400.0, fv=400.0, cu=320.0, cv=240.0, width=640, height=480)
        uv, _ = cam.project(np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(uv, [320.0, 240.0], atol=1e-12)

    def test_behind_camera_returns_none(self):
        cam = make_camera()
        assert cam.project(np.array([0.1, 0.1, -1.0])) is None
        assert cam.project(np.array([0.0, 0.0, MIN_DEPTH])) is None
        assert cam.project(np.array([0.0, 0.0, MIN_DEPTH + 1e-6])) is not None

    @pytest.mark.parametrize("model,coeffs", ALL_MODELS)
    def test_matches_scalar_reference(self, model, coeffs):
        cam = make_camera(model, coeffs)
        rng = np.random.default_rng(7)
        pts = sample_points(rng, 200)
        uv, _, valid = cam.project_many(pts)
        assert valid.all()
        for p, (u, v) in zip(pts, uv):
            xd, yd = slow_distort(model, coeffs, p[0] / p[2], p[1] / p[2])
            np.testing.assert_allclose(u, cam.fu * xd + cam.cu, rtol=1e-12)
            np.testing.assert_allclose(v, cam.fv * yd + cam.cv, rtol=1e-12)

    @pytest.mark.parametrize("model,coeffs", ALL_MODELS)
    def test_point_jacobian_finite_difference(self, model, coeffs):
        cam = make_camera(model, coeffs)
        rng = np.random.default_rng(11)
        pts = sample_points(rng, 100)
        eps = 1e-6
        for p in pts:
            uv, J = cam.project(p)
            J_fd = np.empty((2, 3))
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = eps
                up, _ = cam.project(p + dp)
                um, _ = cam.project(p - dp)
                J_fd[:, k] = (up - um) / (2 * eps)
            np.testing.assert_allclose(J, J_fd, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("model,coeffs", ALL_MODELS)
    def test_backproject_roundtrip(self, model, coeffs):
        cam = make_camera(model, coeffs)
        rng = np.random.default_rng(3)
        pts = sample_points(rng, 100)
        uv, _, valid = cam.project_many(pts)
        assert valid.all()
        for p, z in zip(pts, uv):
            ray = cam.backproject(z)
            np.testing.assert_allclose(ray * p[2], p, rtol=1e-8, atol=1e-9)

    def test_in_image(self):
        cam = make_camera()
        inside = cam.in_image(np.array([[0.0, 0.0], [751.9, 479.9], [-0.1, 5.0], [10.0, 480.0]]))
        assert list(inside) == [True, True, False, False]


def default_rig():
    cam0 = make_camera("radtan", RADTAN)
    cam1 = make_camera("equidistant", EQUI)
    T_SC0 = Pose(np.array([0.02, 0.055, 0.0]), quat_exp(np.array([0.01, -0.02, 0.03])))
    T_SC1 = Pose(np.array([0.02, -0.055, 0.0]), quat_exp(np.array([-0.02, 0.01, -0.01])))
    return CameraRig([cam0, cam1], [T_SC0, T_SC1])


class TestReprojectionError:
    def test_zero_at_true_projection(self):
        rig = default_rig()
        rng = np.random.default_rng(5)
        for _ in range(20):
            T_WS = random_pose(rng)
            for ci in range(2):
                T_WC = T_WS @ rig.extrinsics[ci]
                p_C = sample_points(rng, 1)[0]
                l_W = T_WC.transform(p_C)
                uv, _ = rig.cameras[ci].project(p_C)
                out = reprojection_error(rig, ci, T_WS, l_W, uv)
                assert out is not None
                np.testing.assert_allclose(out[0], 0.0, atol=1e-9)

    def test_behind_camera_rejected(self):
        rig = default_rig()
        T_WS = Pose.identity()
        l_W = rig.extrinsics[0].transform(np.array([0.0, 0.0, -2.0]))
        assert reprojection_error(rig, 0, T_WS, l_W, np.zeros(2)) is None

    def test_pose_jacobian_finite_difference(self):
        rig = default_rig()
        rng = np.random.default_rng(13)
        eps = 1e-7
        for _ in range(50):
            T_WS = random_pose(rng)
            ci = int(rng.integers(2))
            p_C = sample_points(rng, 1)[0]
            l_W = (T_WS @ rig.extrinsics[ci]).transform(p_C)
            z = rng.uniform(0, 500, 2)
            e0, J_pose, _ = reprojection_error(rig, ci, T_WS, l_W, z)
            J_fd = np.empty((2, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = eps
                ep = reprojection_error(rig, ci, pose_box_plus(T_WS, d), l_W, z)[0]
                em = reprojection_error(rig, ci, pose_box_plus(T_WS, -d), l_W, z)[0]
                J_fd[:, k] = (ep - em) / (2 * eps)
            np.testing.assert_allclose(J_pose, J_fd, rtol=1e-5, atol=1e-4)

    def test_landmark_jacobian_finite_difference(self):
        rig = default_rig()
        rng = np.random.default_rng(17)
        eps = 1e-7
        for _ in range(50):
            T_WS = random_pose(rng)
            ci = int(rng.integers(2))
            p_C = sample_points(rng, 1)[0]
            l_W = (T_WS @ rig.extrinsics[ci]).transform(p_C)
            z = rng.uniform(0, 500, 2)
            _, _, J_l = reprojection_error(rig, ci, T_WS, l_W, z)
            J_fd = np.empty((2, 3))
            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                ep = reprojection_error(rig, ci, T_WS, l_W + d, z)[0]
                em = reprojection_error(rig, ci, T_WS, l_W - d, z)[0]
                J_fd[:, k] = (ep - em) / (2 * eps)
            np.testing.assert_allclose(J_l, J_fd, rtol=1e-5, atol=1e-4)

    def test_rigid_world_motion_leaves_error_unchanged(self):
        """Moving world frame and landmark together must not change e."""
        rig = default_rig()
        rng = np.random.default_rng(19)
        for _ in range(20):
            T_WS = random_pose(rng)
            ci = int(rng.integers(2))
            p_C = sample_points(rng, 1)[0]
            l_W = (T_WS @ rig.extrinsics[ci]).transform(p_C)
            z = rng.uniform(0, 500, 2)
            e0 = reprojection_error(rig, ci, T_WS, l_W, z)[0]
            T = random_pose(rng)
            e1 = reprojection_error(rig, ci, T @ T_WS, T.transform(l_W), z)[0]
            np.testing.assert_allclose(e0, e1, atol=1e-9)

    def test_batch_matches_single(self):
        rig = default_rig()
        rng = np.random.default_rng(23)
        T_WS = random_pose(rng)
        ci = 1
        pts_C = sample_points(rng, 40)
        T_WC = T_WS @ rig.extrinsics[ci]
        ls_W = np.array([T_WC.transform(p) for p in pts_C])
        zs = rng.uniform(0, 500, (40, 2))
        err, J_pose, J_l, valid = reprojection_error_many(rig, ci, T_WS, ls_W, zs)
        assert valid.all()
        for i in range(40):
            e1, Jp1, Jl1 = reprojection_error(rig, ci, T_WS, ls_W[i], zs[i])
            np.testing.assert_allclose(err[i], e1, atol=1e-12)
            np.testing.assert_allclose(J_pose[i], Jp1, atol=1e-12)
            np.testing.assert_allclose(J_l[i], Jl1, atol=1e-12)

    def test_multi_frame_batch_matches_per_frame(self):
        # the mixed-frame batch must agree with per-frame evaluation,
        # including rows that land behind the camera
        rig = default_rig()
        rng = np.random.default_rng(31)
        frames = [random_pose(rng) for _ in range(4)]
        R_WS = np.array([p.q.rotation_matrix() for p in frames])
        r_WS = np.array([p.r for p in frames])
        rows = rng.integers(0, 4, 60)
        ls_W = np.array([
            frames[f].transform(p)
            for f, p in zip(rows, sample_points(rng, 60))
        ])
        ls_W[::7] -= 40.0  # push some behind every camera
        zs = rng.uniform(0, 500, (60, 2))
        for ci in range(2):
            err, J_pose, J_l, valid = reprojection_error_batch(
                rig, ci, R_WS, r_WS, rows, ls_W, zs)
            err_r, valid_r = reprojection_error_batch(
                rig, ci, R_WS, r_WS, rows, ls_W, zs, want_jacobians=False)
            np.testing.assert_allclose(err_r, err, atol=1e-12)
            assert (valid_r == valid).all()
            for f in range(4):
                sel = rows == f
                e1, Jp1, Jl1, v1 = reprojection_error_many(
                    rig, ci, frames[f], ls_W[sel], zs[sel])
                assert (valid[sel] == v1).all()
                np.testing.assert_allclose(err[sel], e1, atol=1e-10)
                np.testing.assert_allclose(J_pose[sel], Jp1, atol=1e-10)
                np.testing.assert_allclose(J_l[sel], Jl1, atol=1e-10)

    def test_homogeneous_landmark_accepted(self):
        rig = default_rig()
        T_WS = Pose.identity()
        l_W = np.array([0.3, -0.2, 4.0])
        uv, _ = rig.cameras[0].project(
            (rig.extrinsics[0].inverse()).transform(l_W)
        )
        e_h = reprojection_error(rig, 0, T_WS, np.array([0.6, -0.4, 8.0, 2.0]), uv)
        np.testing.assert_allclose(e_h[0], 0.0, atol=1e-9)

    def test_pixel_weight(self):
        np.testing.assert_allclose(pixel_weight(2.0), np.eye(2) * 0.25)


class TestTriangulate:
    def test_recovers_point_two_views(self):
        rig = default_rig()
        rng = np.random.default_rng(29)
        for _ in range(30):
            T_WS = random_pose(rng)
            l_W = T_WS.transform(np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 8)]))
            views = []
            for ci in range(2):
                T_WC = T_WS @ rig.extrinsics[ci]
                p_C = T_WC.inverse().transform(l_W)
                if p_C[2] <= MIN_DEPTH:
                    continue
                uv, _ = rig.cameras[ci].project(p_C)
                views.append((ci, T_WS, uv))
            if len(views) < 2:
                continue
            X = triangulate(rig, views)
            assert X is not None
            np.testing.assert_allclose(X, l_W, atol=1e-6)

    def test_degenerate_single_ray(self):
        rig = default_rig()
        T_WS = Pose.identity()
        uv, _ = rig.cameras[0].project(np.array([0.1, 0.2, 3.0]))
        # the same view twice has no parallax
        assert triangulate(rig, [(0, T_WS, uv), (0, T_WS, uv)]) is None
