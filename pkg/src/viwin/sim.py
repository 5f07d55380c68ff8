"""Synthetic visual-inertial datasets with exact ground truth.

A dataset is built from a smooth analytic trajectory: positions come
from a closed-form path (or a cubic spline through waypoints), the body
orientation keeps the forward axis on the velocity direction, and IMU
samples are read off the analytic derivatives.  Everything downstream
(biases, measurement noise, outliers) is driven by one seeded generator,
so a (spec, seed) pair maps to a byte-identical dataset.

Frame zero starts ``warmup_s`` after the IMU stream begins, leaving the
estimator a short static-free stretch of samples for initial leveling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path as _Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation as _Rot

from .camera import CameraRig
from .config import default_stereo_rig, rig_from_dict, rig_to_dict, \
    imu_params_from_dict, imu_params_to_dict
from .geometry import Pose, Quaternion
from .imu import ImuParams, ImuSample, NavState, PreintegratedImu, predict, \
    load_imu_csv, save_imu_csv

GYRO_DIFF_EPS = 1e-6  # central-difference step for body rates [s]


@dataclass
class TrajectorySpec:
    """Shape of the simulated trajectory plus the landmark field.

    ``kind`` is one of ``rest``, ``circle``, ``lissajous`` or
    ``waypoints``; only the parameters of the chosen kind matter.
    """

    kind: str = "circle"
    duration: float = 20.0
    frame_rate: float = 10.0
    imu_rate: float = 200.0
    warmup_s: float = 0.1
    # The body holds still through the warmup, then accelerates into the
    # nominal path over this many seconds (quintic speed blend, so the
    # position stays C2 and the IMU stream physical).  Accelerometer
    # leveling at startup only works on a stationary stretch; 0 disables
    # the hold and starts the nominal path at full speed.
    ramp_s: float = 1.0

    # circle (planar, constant speed; revisits its start every lap)
    radius: float = 5.0
    angular_rate: float = 0.6           # rad/s about world z

    # lissajous (3-axis sinusoid; phases chosen so speed never vanishes,
    # rates gentle enough that midpoint dead-reckoning stays accurate)
    amplitude: tuple = (5.0, 2.5, 0.3)
    frequency: tuple = (0.07, 0.14, 0.05)  # Hz per axis
    phase: tuple = (0.0, 0.3, 1.1)

    # waypoints (cubic spline through rows of an (M, 3) array)
    waypoints: list | None = None
    closed: bool = False

    # orientation richness
    yaw_dither_amplitude: float = 0.2    # rad
    yaw_dither_frequency: float = 0.15   # Hz
    min_speed: float = 0.05              # validation floor [m/s]

    # landmark field: shell around the path
    n_landmarks: int = 800
    shell_inner: float = 2.0
    shell_outer: float = 12.0
    center: tuple = (0.0, 0.0, 1.2)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.waypoints is not None:
            d["waypoints"] = np.asarray(self.waypoints, dtype=float).tolist()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrajectorySpec":
        d = dict(d)
        for key in ("amplitude", "frequency", "phase", "center"):
            if key in d:
                d[key] = tuple(d[key])
        return TrajectorySpec(**d)


@dataclass
class NoiseConfig:
    """Measurement corruption.  ``imu_noise_scale`` multiplies all four
    continuous-time densities from :class:`ImuParams` (0 = clean IMU and
    frozen biases); initial biases are drawn once per dataset."""

    sigma_px: float = 1.0
    outlier_fraction: float = 0.02
    imu_noise_scale: float = 1.0
    gyro_bias_std: float = 0.003    # rad/s, initial draw
    accel_bias_std: float = 0.02    # m/s^2, initial draw

    @staticmethod
    def zero() -> "NoiseConfig":
        return NoiseConfig(sigma_px=0.0, outlier_fraction=0.0,
                           imu_noise_scale=0.0, gyro_bias_std=0.0,
                           accel_bias_std=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "NoiseConfig":
        return NoiseConfig(**d)


# ---------------------------------------------------------------------------
# analytic paths


def _times(t) -> np.ndarray:
    return np.atleast_1d(np.asarray(t, dtype=float))


class _RestPath:
    def __init__(self, spec):
        self.c = np.asarray(spec.center, dtype=float)

    def pos(self, t):
        return np.broadcast_to(self.c, (_times(t).size, 3)).copy()

    def vel(self, t):
        return np.zeros((_times(t).size, 3))

    def acc(self, t):
        return np.zeros((_times(t).size, 3))


class _CirclePath:
    def __init__(self, spec):
        self.c = np.asarray(spec.center, dtype=float)
        self.R = float(spec.radius)
        self.w = float(spec.angular_rate)

    def pos(self, t):
        th = self.w * _times(t)
        return self.c + self.R * np.stack(
            [np.cos(th), np.sin(th), np.zeros_like(th)], axis=-1)

    def vel(self, t):
        th = self.w * _times(t)
        return self.R * self.w * np.stack(
            [-np.sin(th), np.cos(th), np.zeros_like(th)], axis=-1)

    def acc(self, t):
        th = self.w * _times(t)
        return -self.R * self.w ** 2 * np.stack(
            [np.cos(th), np.sin(th), np.zeros_like(th)], axis=-1)


class _LissajousPath:
    def __init__(self, spec):
        self.c = np.asarray(spec.center, dtype=float)
        self.A = np.asarray(spec.amplitude, dtype=float)
        self.w = 2.0 * np.pi * np.asarray(spec.frequency, dtype=float)
        self.p = np.asarray(spec.phase, dtype=float)

    def pos(self, t):
        arg = np.multiply.outer(_times(t), self.w) + self.p
        return self.c + self.A * np.sin(arg)

    def vel(self, t):
        arg = np.multiply.outer(_times(t), self.w) + self.p
        return self.A * self.w * np.cos(arg)

    def acc(self, t):
        arg = np.multiply.outer(_times(t), self.w) + self.p
        return -self.A * self.w ** 2 * np.sin(arg)


class _SplinePath:
    """Cubic spline through waypoints, parameterized over the duration.

    ``closed`` uses periodic boundary conditions (the last waypoint must
    repeat the first), so loops are C2 across the seam.
    """

    def __init__(self, spec):
        if spec.waypoints is None:
            spec.waypoints = _default_waypoints()
            spec.closed = True
        wp = np.asarray(spec.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 3 or wp.shape[0] < 4:
            raise ValueError("waypoints must be an (M>=4, 3) array")
        bc = "periodic" if spec.closed else "natural"
        if spec.closed and not np.allclose(wp[0], wp[-1]):
            wp = np.vstack([wp, wp[0]])
        ts = np.linspace(0.0, spec.duration, wp.shape[0])
        self.s = CubicSpline(ts, wp, bc_type=bc)
        self.ds = self.s.derivative(1)
        self.dds = self.s.derivative(2)

    def pos(self, t):
        return np.atleast_2d(self.s(_times(t)))

    def vel(self, t):
        return np.atleast_2d(self.ds(_times(t)))

    def acc(self, t):
        return np.atleast_2d(self.dds(_times(t)))


_PATHS = {"rest": _RestPath, "circle": _CirclePath,
          "lissajous": _LissajousPath, "waypoints": _SplinePath}


class _WarpedPath:
    """Time-warped view of a nominal path: still through the hold, a
    quintic-smoothstep speed ramp over ``ramp`` seconds, unit rate after.

    ``tau`` maps wall time to path time; velocity and acceleration follow
    by the chain rule.  ``heading`` exposes the *nominal* velocity
    direction, which stays well-defined even while the warped speed is
    zero.  ``ramp <= 0`` makes the warp the identity.
    """

    def __init__(self, path, hold: float, ramp: float):
        self.path = path
        self.t0 = float(hold)
        self.T = float(ramp)

    def _u(self, t):
        if self.T <= 0.0:
            return None
        return np.clip((_times(t) - self.t0) / self.T, 0.0, 1.0)

    def tau(self, t):
        t = _times(t)
        if self.T <= 0.0:
            return t
        u = self._u(t)
        ramped = self.T * (u ** 6 - 3.0 * u ** 5 + 2.5 * u ** 4)
        return np.where(t >= self.t0 + self.T,
                        t - self.t0 - 0.5 * self.T, ramped)

    def rate(self, t):
        if self.T <= 0.0:
            return np.ones(_times(t).size)
        u = self._u(t)
        return ((6.0 * u - 15.0) * u + 10.0) * u ** 3

    def rate_dot(self, t):
        if self.T <= 0.0:
            return np.zeros(_times(t).size)
        u = self._u(t)
        return 30.0 * u ** 2 * (1.0 - u) ** 2 / self.T

    def pos(self, t):
        return self.path.pos(self.tau(t))

    def vel(self, t):
        return self.rate(t)[:, None] * self.path.vel(self.tau(t))

    def acc(self, t):
        tau = self.tau(t)
        return (self.rate_dot(t)[:, None] * self.path.vel(tau)
                + (self.rate(t) ** 2)[:, None] * self.path.acc(tau))

    def nominal_vel(self, t):
        return self.path.vel(self.tau(t))


def _make_path(spec: TrajectorySpec):
    try:
        inner = _PATHS[spec.kind](spec)
    except KeyError:
        raise ValueError(f"unknown trajectory kind {spec.kind!r}") from None
    ramp = 0.0 if spec.kind == "rest" else spec.ramp_s
    return _WarpedPath(inner, spec.warmup_s, ramp)


def _orientations(spec: TrajectorySpec, path, t: np.ndarray) -> np.ndarray:
    """World-from-body rotations (N, 3, 3) at times ``t``.

    Body x tracks the velocity direction, body z stays as vertical as
    the path allows (Gram-Schmidt against world z), and a sinusoidal
    yaw dither about body z keeps the rotation axes rich enough for
    bias observability.  Rest datasets sit exactly at identity.
    """
    t = _times(t)
    n = t.size
    if spec.kind == "rest":
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    else:
        # heading follows the nominal path direction, which is defined
        # even while the startup hold/ramp keeps the actual speed at zero
        v = path.nominal_vel(t)
        speed = np.linalg.norm(v, axis=-1)
        if np.any(speed < spec.min_speed):
            raise ValueError(
                "trajectory speed drops below min_speed; orientation from "
                "velocity would be ill-defined")
        x = v / speed[:, None]
        z_w = np.array([0.0, 0.0, 1.0])
        z = z_w - (x @ z_w)[:, None] * x
        zn = np.linalg.norm(z, axis=-1)
        if np.any(zn < 1e-6):
            raise ValueError("trajectory velocity turns vertical; body "
                             "frame would be ill-defined")
        z = z / zn[:, None]
        y = np.cross(z, x)
        base = np.stack([x, y, z], axis=-1)
    psi = spec.yaw_dither_amplitude * np.sin(
        2.0 * np.pi * spec.yaw_dither_frequency * path.tau(t))
    c, s = np.cos(psi), np.sin(psi)
    dither = np.zeros((n, 3, 3))
    dither[:, 0, 0] = c
    dither[:, 0, 1] = -s
    dither[:, 1, 0] = s
    dither[:, 1, 1] = c
    dither[:, 2, 2] = 1.0
    return base @ dither


def _body_rates(spec, path, t: np.ndarray) -> np.ndarray:
    """Angular velocity in the body frame via a tight central difference
    of the analytic orientation (exact to ~1e-10 for smooth paths)."""
    e = GYRO_DIFF_EPS
    R0 = _orientations(spec, path, t - 0.5 * e)
    R1 = _orientations(spec, path, t + 0.5 * e)
    rel = np.einsum("nij,nik->njk", R0, R1)  # R0^T R1
    return _Rot.from_matrix(rel).as_rotvec() / e


def _quats_wxyz(R: np.ndarray) -> np.ndarray:
    q = _Rot.from_matrix(R).as_quat()  # xyzw
    q = np.concatenate([q[:, 3:4], q[:, :3]], axis=1)
    q[q[:, 0] < 0] *= -1.0
    return q


# ---------------------------------------------------------------------------
# dataset


@dataclass
class FrameObs:
    """Observations of one camera in one frame."""

    ids: np.ndarray       # (M,) int landmark ids
    pixels: np.ndarray    # (M, 2)
    outlier: np.ndarray   # (M,) bool, True where the pixel was replaced

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.outlier = np.asarray(self.outlier, dtype=bool)


@dataclass
class Frame:
    frame_id: int
    t: float
    cameras: list  # list[FrameObs], one per rig camera


@dataclass
class SimDataset:
    spec: TrajectorySpec
    noise: NoiseConfig
    seed: int
    rig: CameraRig
    imu_params: ImuParams
    gt_t: np.ndarray       # (N,) imu-rate timestamps
    gt_r: np.ndarray       # (N, 3) positions
    gt_q: np.ndarray       # (N, 4) orientations, wxyz
    gt_v: np.ndarray       # (N, 3) world velocities
    gt_bg: np.ndarray      # (N, 3) gyro biases
    gt_ba: np.ndarray      # (N, 3) accel biases
    imu: list              # list[ImuSample], noisy measurements
    frames: list           # list[Frame]
    landmarks: dict        # id -> (3,) world point

    def gt_state(self, i: int) -> NavState:
        return NavState(
            Pose(self.gt_r[i].copy(), Quaternion(self.gt_q[i].copy())),
            self.gt_v[i].copy(), self.gt_bg[i].copy(), self.gt_ba[i].copy())

    def gt_pose_at(self, t: float) -> Pose:
        i = int(np.argmin(np.abs(self.gt_t - t)))
        return Pose(self.gt_r[i].copy(), Quaternion(self.gt_q[i].copy()))

    def save(self, directory) -> None:
        d = _Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        cols = ("t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,"
                "bgx,bgy,bgz,bax,bay,baz")
        rows = np.hstack([self.gt_t[:, None], self.gt_r, self.gt_q,
                          self.gt_v, self.gt_bg, self.gt_ba])
        _write_csv(d / "gt.csv", cols, rows)
        save_imu_csv(d / "imu.csv", self.imu)
        with open(d / "frames.jsonl", "w") as f:
            for fr in self.frames:
                rec = {
                    "frame_id": fr.frame_id,
                    "t": fr.t,
                    "cameras": [{
                        "ids": obs.ids.tolist(),
                        "pixels": obs.pixels.tolist(),
                        "outlier": obs.outlier.astype(int).tolist(),
                    } for obs in fr.cameras],
                }
                f.write(json.dumps(rec) + "\n")
        ids = sorted(self.landmarks)
        lm_rows = np.array([[i, *self.landmarks[i]] for i in ids],
                           dtype=float).reshape(-1, 4)
        _write_csv(d / "landmarks.csv", "id,x,y,z", lm_rows)
        with open(d / "config.json", "w") as f:
            json.dump({
                "spec": self.spec.to_dict(),
                "noise": self.noise.to_dict(),
                "seed": self.seed,
                "rig": rig_to_dict(self.rig),
                "imu": imu_params_to_dict(self.imu_params),
            }, f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(directory) -> "SimDataset":
        d = _Path(directory)
        with open(d / "config.json") as f:
            cfg = json.load(f)
        gt = np.loadtxt(d / "gt.csv", delimiter=",", skiprows=1, ndmin=2)
        frames = []
        with open(d / "frames.jsonl") as f:
            for line in f:
                rec = json.loads(line)
                cams = [FrameObs(np.asarray(c["ids"], dtype=int),
                                 np.asarray(c["pixels"], dtype=float),
                                 np.asarray(c["outlier"], dtype=bool))
                        for c in rec["cameras"]]
                frames.append(Frame(rec["frame_id"], rec["t"], cams))
        lm = np.loadtxt(d / "landmarks.csv", delimiter=",", skiprows=1,
                        ndmin=2)
        landmarks = {int(r[0]): r[1:4].copy() for r in lm}
        return SimDataset(
            spec=TrajectorySpec.from_dict(cfg["spec"]),
            noise=NoiseConfig.from_dict(cfg["noise"]),
            seed=int(cfg["seed"]),
            rig=rig_from_dict(cfg["rig"]),
            imu_params=imu_params_from_dict(cfg["imu"]),
            gt_t=gt[:, 0].copy(), gt_r=gt[:, 1:4].copy(),
            gt_q=gt[:, 4:8].copy(), gt_v=gt[:, 8:11].copy(),
            gt_bg=gt[:, 11:14].copy(), gt_ba=gt[:, 14:17].copy(),
            imu=load_imu_csv(d / "imu.csv"),
            frames=frames,
            landmarks=landmarks,
        )


def _write_csv(path, header: str, rows: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join("%.17g" % v for v in row) + "\n")


# ---------------------------------------------------------------------------
# generation


def _sample_landmarks(spec: TrajectorySpec, path, rng) -> dict:
    """Uniform random points in a spherical shell around random points
    of the path — near/far structure on every side of the trajectory."""
    ts = rng.uniform(0.0, spec.duration, size=spec.n_landmarks)
    anchors = path.pos(ts)
    u = rng.normal(size=(spec.n_landmarks, 3))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    radii = rng.uniform(spec.shell_inner, spec.shell_outer,
                        size=spec.n_landmarks)
    pts = anchors + u * radii[:, None]
    return {i: pts[i].copy() for i in range(spec.n_landmarks)}


def generate(spec: TrajectorySpec, rig: CameraRig, imu_params: ImuParams,
             noise: NoiseConfig, seed: int) -> SimDataset:
    """Build a complete dataset.  Deterministic given (arguments, seed).

    Raises ``ValueError`` for infeasible specs: speed below the floor,
    or any frame seeing fewer than 30 landmarks across the rig.
    """
    path = _make_path(spec)
    rng = np.random.default_rng(seed)

    dt = 1.0 / spec.imu_rate
    n_imu = int(round(spec.duration * spec.imu_rate)) + 1
    t_imu = np.arange(n_imu) * dt

    # ground truth kinematics at IMU rate
    gt_r = path.pos(t_imu)
    gt_v = path.vel(t_imu)
    acc_w = path.acc(t_imu)
    R = _orientations(spec, path, t_imu)
    gt_q = _quats_wxyz(R)
    omega = _body_rates(spec, path, t_imu)

    # biases: one initial draw, then a random walk at the IMU rate
    bg0 = rng.normal(size=3) * noise.gyro_bias_std
    ba0 = rng.normal(size=3) * noise.accel_bias_std
    ns = noise.imu_noise_scale
    walk_g = rng.normal(size=(n_imu - 1, 3)) * (
        ns * imu_params.sigma_gyro_bias * np.sqrt(dt))
    walk_a = rng.normal(size=(n_imu - 1, 3)) * (
        ns * imu_params.sigma_accel_bias * np.sqrt(dt))
    gt_bg = np.vstack([bg0, bg0 + np.cumsum(walk_g, axis=0)])
    gt_ba = np.vstack([ba0, ba0 + np.cumsum(walk_a, axis=0)])

    # measured = truth + bias + discrete white noise
    g_w = imu_params.gravity
    f_body = np.einsum("nij,nj->ni", R.transpose(0, 2, 1), acc_w - g_w)
    noise_g = rng.normal(size=(n_imu, 3)) * (
        ns * imu_params.sigma_gyro / np.sqrt(dt))
    noise_a = rng.normal(size=(n_imu, 3)) * (
        ns * imu_params.sigma_accel / np.sqrt(dt))
    gyro_meas = omega + gt_bg + noise_g
    accel_meas = f_body + gt_ba + noise_a
    imu = [ImuSample(t_imu[i], gyro_meas[i], accel_meas[i])
           for i in range(n_imu)]

    landmarks = _sample_landmarks(spec, path, rng)
    lm_ids = np.array(sorted(landmarks), dtype=int)
    lm_pts = np.array([landmarks[i] for i in lm_ids])

    # frames: project, then corrupt
    n_frames = int(np.floor(
        (spec.duration - spec.warmup_s) * spec.frame_rate + 1e-9)) + 1
    frames = []
    for fi in range(n_frames):
        t = spec.warmup_s + fi / spec.frame_rate
        r_ws = path.pos(t)[0]
        R_ws = _orientations(spec, path, t)[0]
        cams = []
        total = 0
        for ci, (cam, T_SC) in enumerate(zip(rig.cameras, rig.extrinsics)):
            # world -> body -> camera
            p_s = (lm_pts - r_ws) @ R_ws
            p_c = (p_s - T_SC.r) @ T_SC.q.rotation_matrix()
            uv, _, ok = cam.project_many(p_c)
            ok = ok & cam.in_image(uv)
            ids = lm_ids[ok]
            px = uv[ok]
            px = px + rng.normal(size=px.shape) * noise.sigma_px
            out_mask = rng.uniform(size=ids.size) < noise.outlier_fraction
            n_out = int(out_mask.sum())
            if n_out:
                px[out_mask, 0] = rng.uniform(0.0, cam.width, size=n_out)
                px[out_mask, 1] = rng.uniform(0.0, cam.height, size=n_out)
            cams.append(FrameObs(ids, px, out_mask))
            total += ids.size
        if total < 30:
            raise ValueError(
                f"infeasible spec: frame {fi} (t={t:.2f}) sees only "
                f"{total} landmarks; need >= 30")
        frames.append(Frame(fi, t, cams))

    return SimDataset(spec=spec, noise=noise, seed=seed, rig=rig,
                      imu_params=imu_params,
                      gt_t=t_imu, gt_r=gt_r, gt_q=gt_q, gt_v=gt_v,
                      gt_bg=gt_bg, gt_ba=gt_ba,
                      imu=imu, frames=frames, landmarks=landmarks)


def integrate_check(dataset: SimDataset) -> float:
    """Dead-reckon the noiseless IMU stream from the first ground-truth
    state and return the largest position deviation from ground truth.

    Only meaningful for datasets generated with ``imu_noise_scale == 0``
    (constant biases, no additive noise); anything else raises.
    """
    if dataset.noise.imu_noise_scale != 0.0:
        raise ValueError("integrate_check needs a zero-noise dataset")
    state0 = dataset.gt_state(0)
    pre = PreintegratedImu(dataset.imu_params, state0.bg, state0.ba,
                           dataset.imu[0])
    worst = 0.0
    for i in range(1, len(dataset.imu)):
        pre.append(dataset.imu[i])
        state = predict(state0, pre)
        dev = float(np.linalg.norm(state.T_WS.r - dataset.gt_r[i]))
        worst = max(worst, dev)
    return worst


def default_dataset(kind: str = "circle", duration: float = 20.0,
                    seed: int = 0, noise: NoiseConfig | None = None,
                    **spec_kw) -> SimDataset:
    """Convenience wrapper: stock stereo rig, stock IMU, one call."""
    spec = TrajectorySpec(kind=kind, duration=duration, **spec_kw)
    return generate(spec, default_stereo_rig(), ImuParams(),
                    noise if noise is not None else NoiseConfig(), seed)


def _default_waypoints() -> list:
    """A rounded figure-eight, closed so splines can be periodic."""
    th = np.linspace(0.0, 2.0 * np.pi, 9)
    pts = np.stack([6.0 * np.sin(th), 3.0 * np.sin(2.0 * th),
                    1.2 + 0.4 * np.sin(th + 0.7)], axis=-1)
    pts[-1] = pts[0]
    return pts.tolist()
