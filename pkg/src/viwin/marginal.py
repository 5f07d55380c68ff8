"""Relative two-pose factors obtained by marginalizing landmarks.

When a pair of frames leaves the optimization window, their joint
landmark observations are condensed into a single factor on the relative
pose between them.  The factor is built in the reference frame of the
first pose: landmarks are expressed in its sensor coordinates, the
relative pose is linearized once, and the landmark blocks are eliminated
with a Schur complement.  What remains is a 6x6 information matrix, a
residual offset, and an archive of everything needed to resurrect the
original reprojection terms later.

Observations are ``(cam_index, landmark_id, uv)`` tuples throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraRig, pixel_weight, reprojection_error_many
from .geometry import (
    Pose,
    box_minus,
    skew,
    so3_left_jacobian_inv,
)

PINV_RCOND = 1e-8


def build_two_frame_system(
    rig: CameraRig,
    T_rc: Pose,
    landmarks_ref: dict[int, np.ndarray],
    obs_ref: list[tuple[int, int, np.ndarray]],
    obs_other: list[tuple[int, int, np.ndarray]],
    sigma_px: float,
):
    """Gauss-Newton system for one relative pose plus its landmarks.

    Variable order is ``[relative pose (6), landmarks (3 each)]`` with
    landmarks sorted by id.  Returns ``(H, b, landmark_ids)`` with the
    usual ``H delta = b`` convention, ``b = -J^T W e``.  Observations of
    ids missing from ``landmarks_ref`` are ignored.
    """
    ids = sorted(
        {lid for _, lid, _ in obs_ref if lid in landmarks_ref}
        & {lid for _, lid, _ in obs_other if lid in landmarks_ref}
    )
    index = {lid: k for k, lid in enumerate(ids)}
    n = 6 + 3 * len(ids)
    H = np.zeros((n, n))
    b = np.zeros(n)
    W = pixel_weight(sigma_px)
    identity = Pose.identity()

    for in_ref, obs in ((True, obs_ref), (False, obs_other)):
        pose = identity if in_ref else T_rc
        for cam_index, lid, uv in obs:
            if lid not in index:
                continue
            out = reprojection_error_many(
                rig, cam_index, pose, landmarks_ref[lid][None, :],
                np.asarray(uv, dtype=float)[None, :])
            e, J_pose, J_l, valid = out
            if not valid[0]:
                continue
            e, J_l = e[0], J_l[0]
            j = 6 + 3 * index[lid]
            if in_ref:
                # the reference pose is the anchor: no pose Jacobian
                H[j:j + 3, j:j + 3] += J_l.T @ W @ J_l
                b[j:j + 3] += -J_l.T @ W @ e
            else:
                J_p = J_pose[0]
                H[0:6, 0:6] += J_p.T @ W @ J_p
                H[0:6, j:j + 3] += J_p.T @ W @ J_l
                H[j:j + 3, 0:6] += J_l.T @ W @ J_p
                H[j:j + 3, j:j + 3] += J_l.T @ W @ J_l
                b[0:6] += -J_p.T @ W @ e
                b[j:j + 3] += -J_l.T @ W @ e
    return H, b, ids


def schur_marginalize(H: np.ndarray, b: np.ndarray, keep: int = 6,
                      rcond: float = PINV_RCOND):
    """Eliminate trailing 3x3 landmark blocks from ``H delta = b``.

    Rank-deficient landmark blocks (e.g. never-triangulated or collinear
    geometry) are handled with a pseudo-inverse cut at ``rcond`` times
    each block's largest singular value.
    """
    n = H.shape[0]
    if (n - keep) % 3 != 0:
        raise ValueError("trailing dimension is not a multiple of 3")
    H_star = H[:keep, :keep].copy()
    b_star = b[:keep].copy()
    for j in range(keep, n, 3):
        H_pj = H[:keep, j:j + 3]
        H_jj = H[j:j + 3, j:j + 3]
        H_jj_inv = np.linalg.pinv(H_jj, rcond=rcond, hermitian=True)
        H_star -= H_pj @ H_jj_inv @ H_pj.T
        b_star -= H_pj @ H_jj_inv @ b[j:j + 3]
    return 0.5 * (H_star + H_star.T), b_star


@dataclass
class TwoPoseFactor:
    """Condensed relative-pose constraint between two frames.

    ``weight`` and ``error_offset`` define the quadratic cost; the
    archived landmarks (reference-sensor coordinates) and inlier
    observations allow the original terms to be revived.
    """

    frame_r: int
    frame_c: int
    T_rc_bar: Pose
    weight: np.ndarray       # 6x6
    error_offset: np.ndarray  # 6
    landmarks_ref: dict[int, np.ndarray] = field(default_factory=dict)
    obs_r: list = field(default_factory=list)
    obs_c: list = field(default_factory=list)
    sigma_px: float = 1.0


def make_two_pose_factor(
    rig: CameraRig,
    frame_r: int,
    frame_c: int,
    T_WSr: Pose,
    T_WSc: Pose,
    landmarks_W: dict[int, np.ndarray],
    obs_r: list[tuple[int, int, np.ndarray]],
    obs_c: list[tuple[int, int, np.ndarray]],
    *,
    sigma_px: float = 1.0,
    min_joint_observations: int = 8,
    residual_gate_sigma: float = 2.5,
) -> TwoPoseFactor | None:
    """Build the condensed factor, or ``None`` when support is too thin.

    Observations whose linearization residual exceeds the per-coordinate
    gate are dropped; landmarks must keep at least one inlier view in
    each frame to stay joint, and at least ``min_joint_observations``
    joint landmarks must survive.
    """
    T_rW = T_WSr.inverse()
    T_rc = T_rW @ T_WSc
    landmarks_ref = {lid: T_rW.transform(np.asarray(l, dtype=float))
                     for lid, l in landmarks_W.items()}

    gate = residual_gate_sigma * sigma_px
    identity = Pose.identity()

    def gated(obs, pose):
        kept = []
        for cam_index, lid, uv in obs:
            if lid not in landmarks_ref:
                continue
            e, _, _, valid = reprojection_error_many(
                rig, cam_index, pose, landmarks_ref[lid][None, :],
                np.asarray(uv, dtype=float)[None, :])
            if valid[0] and np.all(np.abs(e[0]) <= gate):
                kept.append((cam_index, lid, np.asarray(uv, dtype=float).copy()))
        return kept

    obs_r_in = gated(obs_r, identity)
    obs_c_in = gated(obs_c, T_rc)
    joint = {lid for _, lid, _ in obs_r_in} & {lid for _, lid, _ in obs_c_in}
    if len(joint) < min_joint_observations:
        return None
    obs_r_in = [o for o in obs_r_in if o[1] in joint]
    obs_c_in = [o for o in obs_c_in if o[1] in joint]

    H, b, ids = build_two_frame_system(
        rig, T_rc, landmarks_ref, obs_r_in, obs_c_in, sigma_px)
    H_star, b_star = schur_marginalize(H, b)
    error_offset = -np.linalg.pinv(H_star, rcond=PINV_RCOND, hermitian=True) @ b_star

    return TwoPoseFactor(
        frame_r=frame_r,
        frame_c=frame_c,
        T_rc_bar=T_rc,
        weight=H_star,
        error_offset=error_offset,
        landmarks_ref={lid: landmarks_ref[lid].copy() for lid in ids},
        obs_r=obs_r_in,
        obs_c=obs_c_in,
        sigma_px=sigma_px,
    )


def eval_two_pose_error(factor: TwoPoseFactor, T_WSr: Pose, T_WSc: Pose):
    """Error and Jacobians of the condensed factor at the given poses.

    Returns ``(e, J_r, J_c, W)``; Jacobians are with respect to the
    world-frame pose perturbations of the two frames.
    """
    T_rc = T_WSr.inverse() @ T_WSc
    u = box_minus(T_rc.q, factor.T_rc_bar.q)
    e = factor.error_offset + np.concatenate([T_rc.r - factor.T_rc_bar.r, u])

    R_rT = T_WSr.q.rotation_matrix().T
    Jli = so3_left_jacobian_inv(u)

    J_r = np.zeros((6, 6))
    J_r[0:3, 0:3] = -R_rT
    J_r[0:3, 3:6] = R_rT @ skew(T_WSc.r - T_WSr.r)
    J_r[3:6, 3:6] = -Jli @ R_rT

    J_c = np.zeros((6, 6))
    J_c[0:3, 0:3] = R_rT
    J_c[3:6, 3:6] = Jli @ R_rT
    return e, J_r, J_c, factor.weight


def revive(factor: TwoPoseFactor, T_WSr: Pose):
    """Resurrect the archived landmarks and observations.

    Landmarks come back in world coordinates anchored at the *current*
    reference pose, so the revived terms are consistent with wherever a
    loop closure has since moved the frame.  Returns
    ``(landmarks_W, observations)`` with observations as
    ``(frame_id, cam_index, landmark_id, uv)``.
    """
    landmarks_W = {lid: T_WSr.transform(l) for lid, l in factor.landmarks_ref.items()}
    observations = (
        [(factor.frame_r, cam, lid, uv.copy()) for cam, lid, uv in factor.obs_r]
        + [(factor.frame_c, cam, lid, uv.copy()) for cam, lid, uv in factor.obs_c]
    )
    return landmarks_W, observations
