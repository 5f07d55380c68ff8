"""Configuration containers and JSON (de)serialization.

Everything tunable lives here under descriptive names so experiment
configs stay readable.  ``SystemConfig.default()`` is a forward-looking
stereo rig (11 cm baseline) with typical MEMS inertial noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .camera import CameraModel, CameraRig
from .geometry import Pose, Quaternion
from .imu import ImuParams


@dataclass
class WindowConfig:
    """Realtime estimator: window shape, keyframing, factor building."""

    num_recent_frames: int = 3
    max_keyframes: int = 5
    max_loop_frames: int = 5
    min_variable_states: int = 12
    variable_time_horizon_s: float = 2.0
    keypoint_radius_px: int = 15
    overlap_threshold: float = 0.55
    sigma_px: float = 1.0
    min_joint_observations: int = 8
    edge_residual_gate_sigma: float = 2.5
    max_iterations: int = 10
    initial_damping: float = 1e-4
    cauchy_scale: float = 3.0
    # stop refining a frame once an accepted step improves the cost by
    # less than this fraction; the iteration cap still applies
    function_tolerance: float = 1e-3
    # initial-bias prior: keeps the very first optimizations from letting
    # an accelerometer bias impersonate a gravity-direction error
    gyro_bias_prior_std: float = 0.01
    accel_bias_prior_std: float = 0.1


@dataclass
class LoopConfig:
    """Loop-closure recognition, verification and repair."""

    min_shared_landmarks: int = 15
    min_frame_separation: int = 20
    min_inliers: int = 10
    min_inlier_ratio: float = 0.5
    verify_gate_sigma: float = 3.0
    max_iterations: int = 50
    function_tolerance: float = 1e-6
    background_mode: str = "deferred"  # "deferred" (deterministic) | "thread"
    # recognition oracle: fraction of true revisits deliberately missed
    false_negative_rate: float = 0.0


def _pose_to_dict(T: Pose) -> dict:
    return {"r": list(T.r), "q_wxyz": list(T.q.wxyz)}


def _pose_from_dict(d: dict) -> Pose:
    return Pose(np.asarray(d["r"], dtype=float),
                Quaternion(np.asarray(d["q_wxyz"], dtype=float)).normalized())


def rig_to_dict(rig: CameraRig) -> dict:
    cams = []
    for cam, T_SC in zip(rig.cameras, rig.extrinsics):
        cams.append({
            "fu": cam.fu, "fv": cam.fv, "cu": cam.cu, "cv": cam.cv,
            "width": cam.width, "height": cam.height,
            "distortion": cam.distortion,
            "coeffs": list(cam.coeffs),
            "T_SC": _pose_to_dict(T_SC),
        })
    return {"cameras": cams}


def rig_from_dict(d: dict) -> CameraRig:
    cams, exts = [], []
    for c in d["cameras"]:
        cams.append(CameraModel(
            fu=c["fu"], fv=c["fv"], cu=c["cu"], cv=c["cv"],
            width=c["width"], height=c["height"],
            distortion=c.get("distortion", "none"),
            coeffs=np.asarray(c.get("coeffs", [0, 0, 0, 0]), dtype=float),
        ))
        exts.append(_pose_from_dict(c["T_SC"]))
    return CameraRig(cams, exts)


def imu_params_to_dict(p: ImuParams) -> dict:
    d = asdict(p)
    d["gravity"] = list(p.gravity)
    return d


def imu_params_from_dict(d: dict) -> ImuParams:
    d = dict(d)
    d["gravity"] = np.asarray(d.get("gravity", [0.0, 0.0, -9.81]), dtype=float)
    return ImuParams(**d)


# camera optical axis along body +x, image right along body -y, image
# down along body -z (forward-looking mount on a z-up body frame)
FORWARD_MOUNT = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def default_stereo_rig(baseline: float = 0.11) -> CameraRig:
    from .geometry import rotation_matrix_to_quat

    q = rotation_matrix_to_quat(FORWARD_MOUNT)
    cam = dict(fu=460.0, fv=460.0, cu=320.0, cv=240.0, width=640, height=480)
    return CameraRig(
        [CameraModel(**cam), CameraModel(**cam)],
        [Pose(np.array([0.0, baseline / 2, 0.0]), q.copy()),
         Pose(np.array([0.0, -baseline / 2, 0.0]), q.copy())],
    )


@dataclass
class SystemConfig:
    rig: CameraRig = field(default_factory=default_stereo_rig)
    imu: ImuParams = field(default_factory=ImuParams)
    window: WindowConfig = field(default_factory=WindowConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)

    @staticmethod
    def default() -> "SystemConfig":
        return SystemConfig()

    def to_dict(self) -> dict:
        return {
            "rig": rig_to_dict(self.rig),
            "imu": imu_params_to_dict(self.imu),
            "window": asdict(self.window),
            "loop": asdict(self.loop),
        }

    @staticmethod
    def from_dict(d: dict) -> "SystemConfig":
        return SystemConfig(
            rig=rig_from_dict(d["rig"]),
            imu=imu_params_from_dict(d["imu"]),
            window=WindowConfig(**d.get("window", {})),
            loop=LoopConfig(**d.get("loop", {})),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "SystemConfig":
        with open(path) as f:
            return SystemConfig.from_dict(json.load(f))
