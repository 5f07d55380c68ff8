"""Multi-camera rig: pinhole projection with optional distortion and
reprojection errors with analytic Jacobians.

Projection chain for a point ``p = (X, Y, Z)`` in camera coordinates::

    (x, y) = (X/Z, Y/Z)  ->  distort  ->  u = fu*xd + cu, v = fv*yd + cv

Points with ``Z <= min_depth`` do not project.  All Jacobians are with
respect to the left-multiplicative pose perturbation of :mod:`.geometry`;
landmarks perturb in their three Euclidean world components (homogeneous
scale held at 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, skew

MIN_DEPTH = 1e-2

DISTORTION_NONE = "none"
DISTORTION_RADTAN = "radtan"
DISTORTION_EQUIDISTANT = "equidistant"


@dataclass
class CameraModel:
    """Pinhole intrinsics plus an optional distortion model.

    ``distortion`` selects the model; ``coeffs`` is ``(k1, k2, p1, p2)``
    for radial-tangential and ``(k1, k2, k3, k4)`` for equidistant.
    """

    fu: float
    fv: float
    cu: float
    cv: float
    width: int
    height: int
    distortion: str = DISTORTION_NONE
    coeffs: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.distortion not in (DISTORTION_NONE, DISTORTION_RADTAN, DISTORTION_EQUIDISTANT):
            raise ValueError(f"unknown distortion model: {self.distortion}")

    # -- distortion -------------------------------------------------------

    def _distort(self, x: np.ndarray, y: np.ndarray):
        """Distorted normalized coords plus the 2x2 distortion Jacobian
        entries (dxd_dx, dxd_dy, dyd_dx, dyd_dy), vectorized."""
        if self.distortion == DISTORTION_NONE:
            one = np.ones_like(x)
            zero = np.zeros_like(x)
            return x, y, one, zero, zero, one
        if self.distortion == DISTORTION_RADTAN:
            k1, k2, p1, p2 = self.coeffs
            r2 = x * x + y * y
            radial = 1.0 + k1 * r2 + k2 * r2 * r2
            xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
            yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
            dr = k1 + 2.0 * k2 * r2  # d(radial)/d(r2) stacked with chain rule
            dxd_dx = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
            dxd_dy = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
            dyd_dx = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
            dyd_dy = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
            return xd, yd, dxd_dx, dxd_dy, dyd_dx, dyd_dy
        # equidistant
        k1, k2, k3, k4 = self.coeffs
        r = np.sqrt(x * x + y * y)
        r_safe = np.where(r < 1e-12, 1.0, r)
        theta = np.arctan(r)
        t2 = theta * theta
        theta_d = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
        dtheta_d = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
        s = np.where(r < 1e-12, 1.0, theta_d / r_safe)
        dtheta_dr = 1.0 / (1.0 + r * r)
        ds_dr = np.where(r < 1e-12, 0.0, (dtheta_d * dtheta_dr * r_safe - theta_d) / (r_safe * r_safe))
        xd = s * x
        yd = s * y
        dxd_dx = s + x * x / r_safe * ds_dr
        dxd_dy = x * y / r_safe * ds_dr
        dyd_dx = dxd_dy
        dyd_dy = s + y * y / r_safe * ds_dr
        return xd, yd, dxd_dx, dxd_dy, dyd_dx, dyd_dy

    # -- projection -------------------------------------------------------

    def project_many(self, points: np.ndarray):
        """Project an (N, 3) array of camera-frame points.

        Returns ``(uv (N,2), jac (N,2,3), valid (N,))``; rows with
        ``valid == False`` hold unspecified values.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        X, Y, Z = points[:, 0], points[:, 1], points[:, 2]
        valid = Z > MIN_DEPTH
        Zs = np.where(valid, Z, 1.0)
        x = X / Zs
        y = Y / Zs
        xd, yd, dxx, dxy, dyx, dyy = self._distort(x, y)
        uv = np.stack([self.fu * xd + self.cu, self.fv * yd + self.cv], axis=-1)
        # d(x,y)/d(X,Y,Z) composed with the distortion and pixel maps
        inv_z = 1.0 / Zs
        jac = np.empty((points.shape[0], 2, 3))
        jac[:, 0, 0] = self.fu * dxx * inv_z
        jac[:, 0, 1] = self.fu * dxy * inv_z
        jac[:, 0, 2] = -self.fu * (dxx * x + dxy * y) * inv_z
        jac[:, 1, 0] = self.fv * dyx * inv_z
        jac[:, 1, 1] = self.fv * dyy * inv_z
        jac[:, 1, 2] = -self.fv * (dyx * x + dyy * y) * inv_z
        return uv, jac, valid

    def project_points(self, points: np.ndarray):
        """Pixels and validity only — no Jacobian.  Cheaper than
        :meth:`project_many` in residual-only evaluations."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        X, Y, Z = points[:, 0], points[:, 1], points[:, 2]
        valid = Z > MIN_DEPTH
        Zs = np.where(valid, Z, 1.0)
        xd, yd, _, _, _, _ = self._distort(X / Zs, Y / Zs)
        uv = np.stack([self.fu * xd + self.cu, self.fv * yd + self.cv], axis=-1)
        return uv, valid

    def project(self, p_C: np.ndarray):
        """Single-point projection: ``(uv, jac 2x3)`` or ``None`` when the
        point lies at or behind the minimum depth."""
        uv, jac, valid = self.project_many(np.asarray(p_C, dtype=float)[None, :])
        if not valid[0]:
            return None
        return uv[0], jac[0]

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= 0.0)
            & (uv[:, 0] < self.width)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] < self.height)
        )

    def backproject(self, uv: np.ndarray) -> np.ndarray:
        """Unit-depth ray for a pixel; iterative undistortion for the
        distorted models."""
        u, v = np.asarray(uv, dtype=float)
        xd = (u - self.cu) / self.fu
        yd = (v - self.cv) / self.fv
        x, y = xd, yd
        if self.distortion != DISTORTION_NONE:
            for _ in range(10):
                cx, cy, dxx, dxy, dyx, dyy = self._distort(np.array([x]), np.array([y]))
                ex, ey = cx[0] - xd, cy[0] - yd
                det = dxx[0] * dyy[0] - dxy[0] * dyx[0]
                x -= (dyy[0] * ex - dxy[0] * ey) / det
                y -= (-dyx[0] * ex + dxx[0] * ey) / det
        return np.array([x, y, 1.0])


@dataclass
class CameraRig:
    """Cameras plus their fixed extrinsics T_SC (sensor-from-camera)."""

    cameras: list[CameraModel]
    extrinsics: list[Pose]

    def __post_init__(self) -> None:
        if len(self.cameras) < 1:
            raise ValueError("rig needs at least one camera")
        if len(self.cameras) != len(self.extrinsics):
            raise ValueError("extrinsics count must equal camera count")

    def __len__(self) -> int:
        return len(self.cameras)


@dataclass
class ReprojectionFactor:
    """One pixel observation of a landmark from a frame/camera pair."""

    cam_index: int
    landmark_id: int
    frame_id: int
    measurement: np.ndarray  # pixels
    weight: np.ndarray  # 2x2 information

    def __post_init__(self) -> None:
        self.measurement = np.asarray(self.measurement, dtype=float)
        self.weight = np.asarray(self.weight, dtype=float)


def pixel_weight(sigma_px: float) -> np.ndarray:
    """Isotropic 2x2 pixel information for a noise std in pixels."""
    return np.eye(2) / (sigma_px * sigma_px)


def reprojection_error_many(
    rig: CameraRig,
    cam_index: int,
    T_WS: Pose,
    landmarks_W: np.ndarray,
    measurements: np.ndarray,
):
    """Errors and Jacobians for many observations sharing a frame/camera.

    ``landmarks_W`` is (N, 3) Euclidean world points, ``measurements``
    (N, 2) pixels.  Returns ``(err (N,2), J_pose (N,2,6),
    J_landmark (N,2,3), valid (N,))``; invalid rows (behind camera) are
    zeroed so they drop out of any accumulation.
    """
    cam = rig.cameras[cam_index]
    T_SC = rig.extrinsics[cam_index]
    landmarks_W = np.atleast_2d(np.asarray(landmarks_W, dtype=float))
    measurements = np.atleast_2d(np.asarray(measurements, dtype=float))

    R_WS = T_WS.q.rotation_matrix()
    R_SW = R_WS.T
    R_CS = T_SC.q.rotation_matrix().T
    R_CW = R_CS @ R_SW

    rel = landmarks_W - T_WS.r  # (N, 3), world
    p_S = rel @ R_SW.T
    p_C = (p_S - T_SC.r) @ R_CS.T

    uv, J_proj, valid = cam.project_many(p_C)
    err = measurements - uv

    # d p_C / d delta = R_CW @ [-I, [rel]x | I(landmark)]
    N = landmarks_W.shape[0]
    skews = np.zeros((N, 3, 3))
    skews[:, 0, 1] = -rel[:, 2]
    skews[:, 0, 2] = rel[:, 1]
    skews[:, 1, 0] = rel[:, 2]
    skews[:, 1, 2] = -rel[:, 0]
    skews[:, 2, 0] = -rel[:, 1]
    skews[:, 2, 1] = rel[:, 0]

    J_hC = -J_proj  # error = z - h, so d err/d p_C = -J_proj
    J_pose = np.empty((N, 2, 6))
    J_pose[:, :, :3] = J_hC @ (-R_CW)
    J_pose[:, :, 3:] = np.einsum("nij,njk->nik", J_hC @ R_CW, skews)
    J_landmark = J_hC @ R_CW

    err[~valid] = 0.0
    J_pose[~valid] = 0.0
    J_landmark[~valid] = 0.0
    return err, J_pose, J_landmark, valid


def reprojection_error_batch(
    rig: CameraRig,
    cam_index: int,
    R_WS: np.ndarray,
    r_WS: np.ndarray,
    frame_rows: np.ndarray,
    landmarks_W: np.ndarray,
    measurements: np.ndarray,
    want_jacobians: bool = True,
):
    """Observations from one camera across many frames in a single pass.

    ``R_WS`` (F, 3, 3) and ``r_WS`` (F, 3) stack the frame poses;
    ``frame_rows`` (N,) picks the frame of each observation.  Batching a
    whole window this way keeps the per-observation cost flat instead of
    paying a call per frame.  With ``want_jacobians=False`` only
    ``(err, valid)`` come back; otherwise the outputs match
    :func:`reprojection_error_many` row for row.
    """
    cam = rig.cameras[cam_index]
    T_SC = rig.extrinsics[cam_index]
    R_CS = T_SC.q.rotation_matrix().T

    Rn = R_WS[frame_rows]  # (N, 3, 3)
    rel = landmarks_W - r_WS[frame_rows]
    p_S = np.matmul(rel[:, None, :], Rn)[:, 0]  # R_WS^T rel, row form
    p_C = (p_S - T_SC.r) @ R_CS.T

    if not want_jacobians:
        uv, valid = cam.project_points(p_C)
        err = measurements - uv
        err[~valid] = 0.0
        return err, valid

    uv, J_proj, valid = cam.project_many(p_C)
    err = measurements - uv

    N = rel.shape[0]
    skews = np.zeros((N, 3, 3))
    skews[:, 0, 1] = -rel[:, 2]
    skews[:, 0, 2] = rel[:, 1]
    skews[:, 1, 0] = rel[:, 2]
    skews[:, 1, 2] = -rel[:, 0]
    skews[:, 2, 0] = -rel[:, 1]
    skews[:, 2, 1] = rel[:, 0]

    R_CW = np.matmul(R_CS[None, :, :], Rn.transpose(0, 2, 1))
    JR = np.matmul(-J_proj, R_CW)  # d err / d landmark, world frame
    J_pose = np.empty((N, 2, 6))
    J_pose[:, :, :3] = -JR
    J_pose[:, :, 3:] = np.matmul(JR, skews)
    J_landmark = JR

    err[~valid] = 0.0
    J_pose[~valid] = 0.0
    J_landmark[~valid] = 0.0
    return err, J_pose, J_landmark, valid


def reprojection_error(
    rig: CameraRig,
    cam_index: int,
    T_WS: Pose,
    landmark_W: np.ndarray,
    measurement: np.ndarray,
):
    """Single-observation form; ``None`` when the point falls behind the
    camera.  The landmark is a homogeneous 4-vector with scale 1."""
    landmark_W = np.asarray(landmark_W, dtype=float)
    if landmark_W.shape[0] == 4:
        landmark_W = landmark_W[:3] / landmark_W[3]
    err, J_pose, J_landmark, valid = reprojection_error_many(
        rig, cam_index, T_WS, landmark_W[None, :], np.asarray(measurement, dtype=float)[None, :]
    )
    if not valid[0]:
        return None
    return err[0], J_pose[0], J_landmark[0]


def triangulate(
    rig: CameraRig, views: list[tuple[int, Pose, np.ndarray]]
) -> np.ndarray | None:
    """Linear multi-view triangulation.

    ``views`` holds ``(cam_index, T_WS, uv)`` tuples.  Returns the world
    point, or ``None`` if the system is degenerate or the point lands
    behind any contributing camera.
    """
    rows = []
    for cam_index, T_WS, uv in views:
        T_WC = T_WS @ rig.extrinsics[cam_index]
        ray = rig.cameras[cam_index].backproject(uv)
        P = T_WC.inverse().matrix()[:3, :]  # world -> camera
        rows.append(ray[0] * P[2] - P[0])
        rows.append(ray[1] * P[2] - P[1])
    A = np.asarray(rows)
    _, s, vh = np.linalg.svd(A)
    if s[-2] < 1e-10:
        return None
    X = vh[-1]
    if abs(X[3]) < 1e-12:
        return None
    point = X[:3] / X[3]
    for cam_index, T_WS, _ in views:
        p_C = (rig.extrinsics[cam_index].inverse() @ T_WS.inverse()).transform(point)
        if p_C[2] <= MIN_DEPTH:
            return None
    return point
